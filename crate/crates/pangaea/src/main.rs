fn main() {
    std::process::exit(pangaea::cli::run(std::env::args_os()));
}
