use std::fs;
use std::path::Path;

use pangaea::cli::run_with;
use pangaea::tensorfile::TensorFile;
use pangaea_core::transformer::ModelConfig;
use serde_json::Value;

struct Output {
    code: i32,
    stdout: String,
    stderr: String,
}

impl Output {
    fn json(&self) -> Value {
        serde_json::from_str(self.stdout.trim()).unwrap_or_else(|e| panic!("{e}: {:?} / {:?}", self.stdout, self.stderr))
    }
}

fn pangaea(args: &[&str]) -> Output {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("pangaea").chain(args.iter().copied());
    let code = run_with(argv, &mut out, &mut err);
    Output { code, stdout: String::from_utf8(out).unwrap(), stderr: String::from_utf8(err).unwrap() }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn no_arguments_prints_usage_with_exit_2() {
    let o = pangaea(&[]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("Usage"), "{}", o.stderr);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = pangaea(&["fit-scaling", "--input", "x.csv", "--bogus"]);
    assert_eq!(o.code, 2);
    let o = pangaea(&["teleport"]);
    assert_eq!(o.code, 2);
}

#[test]
fn runtime_failure_emits_one_error_record() {
    let o = pangaea(&["inspect-checkpoint", "/nonexistent/m.pgck"]);
    assert_eq!(o.code, 1);
    assert_eq!(o.stderr.lines().count(), 1);
    let rec: Value = serde_json::from_str(o.stderr.trim()).unwrap();
    assert_eq!(rec["error"], "io");
    assert!(rec["message"].as_str().unwrap().contains("m.pgck"));
}

#[test]
fn encode_timeseries_window_gives_eight_triplets() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.pgt");
    let w: Vec<f64> = (0..256).map(|i| (i as f64 / 9.0).cos()).collect();
    TensorFile::from_f64(vec![1, 256], &w).unwrap().write(&path).unwrap();
    let o = pangaea(&["encode", "--modality", "timeseries", "--input", p(&path)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let s = o.json();
    assert_eq!(s["triplets"], 8);
    assert_eq!(s["samples"], 1);
}

#[test]
fn encode_image_reports_masked_and_visible_counts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("img.pgt");
    let img: Vec<f64> = (0..224 * 224 * 3).map(|i| (i % 251) as f64 / 251.0).collect();
    TensorFile::from_f64(vec![1, 224, 224, 3], &img).unwrap().write(&path).unwrap();
    let out = dir.path().join("sets.json");
    let o = pangaea(&["encode", "--modality", "image", "--input", p(&path), "--out", p(&out)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let s = o.json();
    assert_eq!(s["triplets"], 196);
    assert_eq!(s["masked"], 147);
    assert_eq!(s["visible"], 49);
    let sets: Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(sets[0]["triplets"].as_array().unwrap().len(), 196);
}

#[test]
fn encode_table_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    fs::write(&path, "a,b,c,d,e\n1,2,3,4,5\n6,,8,9,10\n").unwrap();
    let o = pangaea(&["encode", "--modality", "table", "--input", p(&path)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert_eq!(o.json()["triplets"], 5);
    assert_eq!(o.json()["samples"], 2);
}

#[test]
fn fit_scaling_recovers_generating_constants() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("points.csv");
    let mut text = String::from("modalities,score\n");
    for x in 0..=5 {
        text.push_str(&format!("{x},{}\n", 1.0 - 0.82f64.powi(x) + 0.14));
    }
    fs::write(&path, text).unwrap();
    let out = dir.path().join("fit");
    let o = pangaea(&["fit-scaling", "--input", p(&path), "--out", p(&out)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let s = o.json();
    assert!((s["p"].as_f64().unwrap() - 0.18).abs() < 1e-6);
    assert!((s["c"].as_f64().unwrap() - 0.14).abs() < 1e-6);
    let curve = fs::read_to_string(out.join("scaling_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 7);
}

#[test]
fn fit_scaling_from_combination_results() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("combos.json");
    let mut results = Vec::new();
    let all = ["text", "table", "timeseries", "graph", "image"];
    for mask in 0u32..32 {
        let subset: Vec<&str> = all.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, m)| *m).collect();
        let k = subset.len() as i32;
        let y = 1.0 - 0.7f64.powi(k);
        results.push(serde_json::json!({ "subset": subset, "scores": { "acc": y, "err": 1.0 - y } }));
    }
    let doc = serde_json::json!({ "tasks": { "acc": "higher_better", "err": "lower_better" }, "results": results });
    fs::write(&path, doc.to_string()).unwrap();
    let o = pangaea(&["fit-scaling", "--input", p(&path)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let s = o.json();
    assert_eq!(s["points"].as_array().unwrap().len(), 6);
    assert!(s["p"].as_f64().unwrap() > 0.0);
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let cfg = ModelConfig { token_dim: 32, hidden_dim: 16, intermediate_dim: 24, vocab_size: 64, pre_embed_dim: 8, point_hidden: 8, ..ModelConfig::desk() };
    let path = dir.join("model.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn end_to_end_batch_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let model = small_config(d);
    fs::write(d.join("table.json"), r#"{"modality":"table","rows":48,"features":5,"task":"binary"}"#).unwrap();
    fs::write(d.join("ts.json"), r#"{"modality":"timeseries","windows":16,"frequencies":[3,7]}"#).unwrap();

    let o = pangaea(&["gen-synth", "--config", p(&d.join("table.json")), "--seed", "2", "--out", p(&d.join("table")), "--eval-fraction", "0.25"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert_eq!(o.json()["train"], 36);
    let o = pangaea(&["gen-synth", "--config", p(&d.join("ts.json")), "--out", p(&d.join("ts"))]);
    assert_eq!(o.code, 0, "{}", o.stderr);

    let data = format!("{},{}", p(&d.join("table/train")), p(&d.join("ts")));
    let pre = d.join("pre");
    let o = pangaea(&[
        "pretrain", "--config", p(&model), "--data", &data, "--steps", "4", "--batch-size", "4", "--seed", "5", "--out", p(&pre),
        "--modalities", "table,timeseries",
    ]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert_eq!(o.json()["updates"], 4);
    assert_eq!(fs::read_to_string(pre.join("loss.csv")).unwrap().lines().count(), 5);

    let o = pangaea(&["inspect-checkpoint", p(&pre.join("checkpoint.pgck"))]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let s = o.json();
    assert_eq!(s["step"], 4);
    assert_eq!(s["heads"].as_object().unwrap().len(), 2);

    let ft = d.join("ft");
    let o = pangaea(&[
        "finetune", "--checkpoint", p(&pre.join("checkpoint.pgck")), "--train", p(&d.join("table/train")), "--eval",
        p(&d.join("table/eval")), "--epochs", "2", "--out", p(&ft),
    ]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert_eq!(o.json()["epochs"], 2);

    let o = pangaea(&["eval", "--checkpoint", p(&ft.join("finetuned.pgck")), "--data", p(&d.join("table/eval")), "--out", p(&ft)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert!(o.json()["metrics"]["acc"].as_f64().is_some());
    assert!(ft.join("metrics.jsonl").exists());

    let aff = d.join("aff");
    let o = pangaea(&[
        "affinity", "--checkpoint", p(&pre.join("checkpoint.pgck")), "--data", &data, "--samples", "2", "--out", p(&aff),
    ]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let m = o.json();
    assert_eq!(m["modalities"].as_array().unwrap().len(), 5);
    let again = pangaea(&["affinity", "--dump", p(&aff.join("attention.json"))]);
    assert_eq!(again.code, 0, "{}", again.stderr);
    assert_eq!(again.json(), m);
}

#[test]
fn invalid_generator_spec_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.json");
    fs::write(&spec, r#"{"modality":"graph","nodes":0,"blocks":1,"p_in":0.5,"p_out":0.1,"features":3}"#).unwrap();
    let o = pangaea(&["gen-synth", "--config", p(&spec), "--out", p(&dir.path().join("g"))]);
    assert_eq!(o.code, 1);
    let rec: Value = serde_json::from_str(o.stderr.trim()).unwrap();
    assert_eq!(rec["error"], "config");
}
