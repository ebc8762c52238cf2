//! Batch command-line interface. Every command prints one JSON summary
//! line on stdout; failures print `{"error": kind, "message": …}` on stderr.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pangaea_core::data::{encode_sample, gen_synthetic, EncodeOptions, SynthSpec};
use pangaea_core::eval::Direction;
use pangaea_core::pretrain::{choose_masked_tokens, CorruptionSpec};
use pangaea_core::scaling::{aggregate_by_cardinality, fit_scaling, AttentionSlice, CombinationResult};
use pangaea_core::transformer::{count_parameters, ModelConfig};
use pangaea_core::triplet::TripletSet;
use pangaea_core::{Error, ModalityKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::checkpoint::load_checkpoint;
use crate::dataset::Dataset;
use crate::error::{IoError, Result};
use crate::manifest::{RunManifest, Strategy};
use crate::pipeline::{self, AttentionDump};
use crate::plot::write_plotdata;
use crate::records::{Record, RecordWriter};
use crate::runner;
use crate::tabular::Table;
use crate::tensorfile::TensorFile;

#[derive(Debug, Parser)]
#[command(name = "pangaea", version, about = "Triplet-encoded multimodal pre-training toolkit", arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by the training commands; they override manifest fields.
#[derive(Debug, Args, Default)]
pub struct RunFlags {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated modality names.
    #[arg(long, value_delimiter = ',')]
    pub modalities: Option<Vec<ModalityKind>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Model configuration (JSON) replacing the manifest's.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode samples into triplets and summarize the result.
    Encode {
        #[arg(long)]
        modality: ModalityKind,
        /// A TensorFile with one sample per row, a table CSV, or a dataset
        /// directory.
        #[arg(long)]
        input: PathBuf,
        /// Encode only this sample.
        #[arg(long)]
        index: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the triplet sets as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Masked-reconstruction pre-training.
    Pretrain {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        steps: Option<u64>,
        /// Dataset directories, replacing the manifest's.
        #[arg(long, value_delimiter = ',')]
        data: Option<Vec<PathBuf>>,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Fine-tune a checkpoint (or a fresh model) on a labelled dataset.
    Finetune {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        freeze_body: bool,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Metrics of a fine-tuned checkpoint on a labelled dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        head: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for the metric records.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the modality scaling law to points or combination results.
    FitScaling {
        /// `x,y` CSV, or JSON with `tasks` and `results`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Modality-to-modality attention affinity.
    Affinity {
        /// Attention dump written by an earlier run.
        #[arg(long, conflicts_with_all = ["checkpoint", "data"])]
        dump: Option<PathBuf>,
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        data: Option<Vec<PathBuf>>,
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        heads: Option<Vec<usize>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset from a generator spec.
    GenSynth {
        /// Generator spec (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write `train/` and `eval/` splits with this evaluation share.
        #[arg(long)]
        eval_fraction: Option<f64>,
    },
    /// Summarize a checkpoint file.
    InspectCheckpoint {
        path: PathBuf,
    },
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}

pub fn run_with<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(summary) => {
            let _ = writeln!(stdout, "{summary}");
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "{}", json!({ "error": e.kind(), "message": e.to_string() }));
            1
        }
    }
}

fn execute(command: Command) -> Result<Value> {
    match command {
        Command::Encode { modality, input, index, seed, out } => encode(modality, &input, index, seed, out.as_deref()),
        Command::Pretrain { run, steps, data, strategy, batch_size } => {
            let mut m = manifest_from(&run)?;
            if let Some(s) = steps {
                m.steps = s;
            }
            if let Some(d) = data {
                m.datasets = d;
            }
            if let Some(s) = strategy {
                m.strategy = s;
            }
            if let Some(b) = batch_size {
                m.batch_size = b;
            }
            let outcome = pipeline::run_pretrain(&m, runner::thread_count())?;
            Ok(serde_json::to_value(&outcome)?)
        }
        Command::Finetune { run, epochs, checkpoint, train, eval, freeze_body, lr } => {
            let mut m = manifest_from(&run)?;
            let ft = &mut m.finetune;
            if let Some(e) = epochs {
                ft.config.epochs = e;
            }
            if checkpoint.is_some() {
                ft.checkpoint = checkpoint;
            }
            if train.is_some() {
                ft.train = train;
            }
            if eval.is_some() {
                ft.eval = eval;
            }
            ft.config.freeze_body |= freeze_body;
            if let Some(lr) = lr {
                ft.config.lr = lr;
            }
            let outcome = pipeline::run_finetune(&m)?;
            let last = outcome.epochs.last().map(|e| e.metrics.clone()).unwrap_or_default();
            Ok(json!({ "epochs": outcome.epochs.len().saturating_sub(1), "metrics": last, "checkpoint": outcome.checkpoint }))
        }
        Command::Eval { checkpoint, data, head, seed, out } => {
            let metrics = pipeline::run_eval(&checkpoint, &data, head.as_deref(), seed)?;
            if let Some(dir) = out {
                let mut w = RecordWriter::create(dir.join("metrics.jsonl"))?;
                for (k, v) in &metrics {
                    w.write(&Record { step: None, epoch: None, name: k.clone(), value: v.is_finite().then_some(*v) })?;
                }
                w.finish()?;
            }
            Ok(json!({ "metrics": metrics }))
        }
        Command::FitScaling { input, out } => fit(&input, out.as_deref()),
        Command::Affinity { dump, checkpoint, data, samples, seed, layers, heads, out } => {
            let dump = match (dump, checkpoint) {
                (Some(p), _) => serde_json::from_str(&read_text(&p)?)?,
                (None, Some(ck)) => {
                    let model = load_checkpoint(&ck)?.model;
                    let datasets = data.unwrap_or_default().iter().map(Dataset::load).collect::<Result<Vec<_>>>()?;
                    let dump = pipeline::attention_dump(&model, &datasets, samples, seed)?;
                    if let Some(dir) = &out {
                        crate::write_atomic(&dir.join("attention.json"), &serde_json::to_vec(&dump)?)?;
                    }
                    dump
                }
                (None, None) => return Err(Error::Config("affinity needs --dump or --checkpoint with --data".into()).into()),
            };
            let dump: AttentionDump = dump;
            let matrix = pipeline::affinity(&dump, &AttentionSlice { layers, heads })?;
            if let Some(dir) = &out {
                crate::write_atomic(&dir.join("affinity.json"), serde_json::to_string_pretty(&matrix)?.as_bytes())?;
            }
            Ok(serde_json::to_value(&matrix)?)
        }
        Command::GenSynth { config, seed, out, eval_fraction } => {
            let spec: SynthSpec = serde_json::from_str(&read_text(&config)?)?;
            let ds = Dataset::from_synth(gen_synthetic(&spec, seed)?, &spec, seed);
            ds.save(&out)?;
            let mut summary = json!({ "modality": ds.modality(), "samples": ds.len(), "out": out });
            if let Some(f) = eval_fraction {
                let (train, eval) = ds.split(f, seed)?;
                train.save(out.join("train"))?;
                eval.save(out.join("eval"))?;
                summary["train"] = json!(train.len());
                summary["eval"] = json!(eval.len());
            }
            Ok(summary)
        }
        Command::InspectCheckpoint { path } => {
            let ck = load_checkpoint(&path)?;
            let counts = count_parameters(&ck.model);
            Ok(json!({
                "format_version": ck.manifest.format_version,
                "step": ck.manifest.step,
                "has_rng": ck.manifest.rng.is_some(),
                "config": ck.manifest.config,
                "heads": ck.manifest.heads,
                "tensors": ck.manifest.params.len(),
                "parameters": { "total": counts.total, "tokenizer": counts.tokenizer, "pre_embed": counts.pre_embed, "body": counts.body, "heads": counts.heads },
                "meta": ck.manifest.meta,
            }))
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(IoError::io(path))
}

fn manifest_from(flags: &RunFlags) -> Result<RunManifest> {
    let mut m = match &flags.manifest {
        Some(p) => RunManifest::read(p)?,
        None => RunManifest::default(),
    };
    if let Some(s) = flags.seed {
        m.seed = s;
    }
    if let Some(ms) = &flags.modalities {
        m.modalities = ms.clone();
    }
    if let Some(o) = &flags.out {
        m.out = o.clone();
    }
    if let Some(c) = &flags.config {
        m.model = serde_json::from_str::<ModelConfig>(&read_text(c)?)?;
    }
    Ok(m)
}

fn load_samples(modality: ModalityKind, input: &Path, seed: u64) -> Result<(Vec<Vec<f64>>, EncodeOptions)> {
    if input.is_dir() {
        let ds = Dataset::load(input)?;
        if ds.modality() != modality {
            return Err(Error::Config(format!("dataset holds {}, not {modality}", ds.modality())).into());
        }
        return Ok((ds.flat_samples(seed)?, ds.encode_options(EncodeOptions::default().vocab)));
    }
    let opts = EncodeOptions { table_seed: seed, ..EncodeOptions::default() };
    if input.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        return Ok((Table::read(input, None)?.imputed()?, opts));
    }
    let t = TensorFile::read(input)?;
    let rows = if t.dims.len() <= 1 { vec![t.to_f64()] } else { t.rows() };
    Ok((rows, opts))
}

fn encode(modality: ModalityKind, input: &Path, index: Option<usize>, seed: u64, out: Option<&Path>) -> Result<Value> {
    let (mut samples, opts) = load_samples(modality, input, seed)?;
    if let Some(i) = index {
        if i >= samples.len() {
            return Err(Error::Contract(format!("sample {i} of {}", samples.len())).into());
        }
        samples = vec![samples.swap_remove(i)];
    }
    let sets: Vec<TripletSet> =
        samples.iter().map(|s| encode_sample(modality, s, &opts)).collect::<pangaea_core::Result<_>>()?;
    let counts: Vec<usize> = sets.iter().map(TripletSet::len).collect();
    let mut summary = json!({
        "modality": modality,
        "samples": sets.len(),
        "triplets": if counts.windows(2).all(|w| w[0] == w[1]) { json!(counts.first()) } else { json!(counts) },
        "sample_shape": sets.first().map(|s| s.sample_shape.clone()),
    });
    if let Some(first) = sets.first().and_then(|s| s.triplets.first()) {
        summary["part_lengths"] = json!([first.num1.len(), first.num2.len()]);
    }
    if modality == ModalityKind::Image {
        if let Some(set) = sets.first() {
            let spec = CorruptionSpec::default_for(modality)?;
            let masked = choose_masked_tokens(set.len(), &spec, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let m = masked.iter().filter(|&&b| b).count();
            summary["masked"] = json!(m);
            summary["visible"] = json!(set.len() - m);
        }
    }
    if let Some(path) = out {
        crate::write_atomic(path, &serde_json::to_vec(&sets)?)?;
    }
    Ok(summary)
}

#[derive(Deserialize)]
struct Combinations {
    tasks: BTreeMap<String, Direction>,
    results: Vec<CombinationResult>,
}

fn fit(input: &Path, out: Option<&Path>) -> Result<Value> {
    let is_json = input.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let (points, gaps) = if is_json {
        let c: Combinations = serde_json::from_str(&read_text(input)?)?;
        let curve = aggregate_by_cardinality(&c.results, &c.tasks)?;
        (curve.points, curve.gaps)
    } else {
        let raw = crate::plot::read_plotdata(input)?;
        let pts = raw
            .into_iter()
            .map(|(x, y)| {
                if x < 0.0 || x.fract() != 0.0 || x > f64::from(u32::MAX) {
                    Err(IoError::format("scaling points", format!("x = {x} is not a modality count")))
                } else {
                    Ok((x as u32, y))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        (pts, Vec::new())
    };
    let f = fit_scaling(&points)?;
    let curve: Vec<(f64, f64)> = (0..=5).map(|x| (f64::from(x), f.predict(f64::from(x)))).collect();
    if let Some(dir) = out {
        let pts: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (f64::from(x), y)).collect();
        write_plotdata(dir.join("scaling_points.csv"), "modalities", "score", &pts)?;
        write_plotdata(dir.join("scaling_curve.csv"), "modalities", "predicted", &curve)?;
    }
    Ok(json!({
        "p": f.p,
        "c": f.c,
        "residual_sse": f.residual_sse,
        "boundary": f.boundary,
        "points": points,
        "gaps": gaps,
        "curve": curve,
    }))
}
