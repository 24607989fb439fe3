//! End-to-end runs of the `ord2seq` binary on tiny problems.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &[&str] = &[
    "--width", "8", "--heads", "2", "--layers", "1", "--ff-width", "8", "--encoder-hidden", "8", "--encoder-tokens", "2",
];

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ord2seq"));
    c.env("ORD2SEQ_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn ord2seq")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas").join(format!("{name}.schema.json"));
    let value: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&value).unwrap()
}

fn check(name: &str, value: &Value) {
    let v = schema(name);
    let errors: Vec<String> = v.iter_errors(value).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{name}: {errors:?}");
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a small dataset and returns the sidecar path.
fn dataset(dir: &Path, categories: usize, extra: &[&str]) -> PathBuf {
    let out = dir.join("data");
    let n = categories.to_string();
    let mut args = vec![
        "generate", "--categories", &n, "--train-samples", "120", "--val-samples", "40", "--test-samples", "60", "--noise", "0.05",
        "--out", s(&out),
    ];
    args.extend_from_slice(extra);
    ok(&args);
    out.join("spec.json")
}

fn train_args<'a>(data: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec!["train", "--categories", "5", "--data", data, "--out", out, "--epochs", "2"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    args
}

#[test]
fn train_writes_valid_artifacts_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 5, &[]);
    check("data_spec", &read_json(&data));
    let out = dir.path().join("run");
    ok(&train_args(s(&data), s(&out), &["--alpha", "0.3"]));

    check("train_metrics", &read_json(&out.join("metrics.json")));
    check("checkpoint", &read_json(&out.join("checkpoint.json")));
    let manifest = read_json(&out.join("manifest.json"));
    check("manifest", &manifest);
    let log = std::fs::read_to_string(out.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        check("log_record", &serde_json::from_str(line).unwrap());
    }
    let artifacts = manifest["artifacts"].as_object().unwrap();
    for f in ["checkpoint.json", "metrics.json", "log.jsonl"] {
        assert!(artifacts.contains_key(f), "{f}");
    }

    let replay = dir.path().join("again");
    ok(&["replay", "--manifest", s(&out.join("manifest.json")), "--out", s(&replay)]);
    for f in ["checkpoint.json", "metrics.json", "log.jsonl"] {
        assert_eq!(std::fs::read(out.join(f)).unwrap(), std::fs::read(replay.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn replay_detects_tampered_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 5, &[]);
    let out = dir.path().join("run");
    ok(&train_args(s(&data), s(&out), &["--epochs", "1"]));
    let path = out.join("manifest.json");
    let mut manifest = read_json(&path);
    manifest["artifacts"]["metrics.json"] = Value::String("0".repeat(64));
    std::fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
    let res = run(&["replay", "--manifest", s(&path)]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("metrics.json"));
}

#[test]
fn alpha_one_matches_no_mask_losses() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 5, &[]);
    let a = dir.path().join("full");
    let b = dir.path().join("nomask");
    ok(&train_args(s(&data), s(&a), &["--alpha", "1.0", "--variant", "full"]));
    ok(&train_args(s(&data), s(&b), &["--variant", "no-mask"]));
    assert_eq!(
        std::fs::read(a.join("log.jsonl")).unwrap(),
        std::fs::read(b.join("log.jsonl")).unwrap()
    );
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 5, &[]);
    let out = dir.path().join("x");
    let cases: Vec<Vec<&str>> = vec![
        vec!["train", "--categories", "1", "--data", s(&data), "--out", s(&out)],
        vec!["train", "--categories", "5", "--data", s(&data), "--out", s(&out), "--alpha", "0"],
        vec!["train", "--categories", "5", "--data", s(&data), "--out", s(&out), "--variant", "bogus"],
        vec!["train", "--categories", "4", "--data", s(&data), "--out", s(&out)],
        vec!["sweep-alpha", "--categories", "5", "--data", s(&data), "--out", s(&out), "--alphas", "1.5"],
        vec!["ablation", "--categories", "5", "--data", s(&data), "--out", s(&out), "--seeds", "2"],
        vec!["generate", "--categories", "1", "--out", s(&out)],
        vec!["no-such-command"],
    ];
    for args in cases {
        assert_eq!(run(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn nan_loss_exits_three_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 5, &[]);
    let csv = dir.path().join("data/train.csv");
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut cells: Vec<&str> = lines[1].split(',').collect();
    cells[0] = "NaN";
    lines[1] = cells.join(",");
    std::fs::write(&csv, lines.join("\n") + "\n").unwrap();
    let out = dir.path().join("run");
    let res = run(&train_args(s(&data), s(&out), &["--batch-size", "500"]));
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stderr).contains("nan_diagnostics.json"));
    let diag = read_json(&out.join("nan_diagnostics.json"));
    assert_eq!(diag["epoch"], 1);
}

#[test]
fn decode_trace_masks_follow_predicted_path() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 7, &[]);
    let run_dir = dir.path().join("run");
    let mut args = vec!["train", "--categories", "7", "--data", s(&data), "--out", s(&run_dir), "--epochs", "1"];
    args.extend_from_slice(TINY);
    ok(&args);
    let out = dir.path().join("dec");
    let ck = run_dir.join("checkpoint.json");
    ok(&["decode", "--checkpoint", s(&ck), "--data", s(&data), "--index", "4", "--trace", "--out", s(&out)]);
    let summary = read_json(&out.join("decode.json"));
    check("decode", &summary);
    check("manifest", &read_json(&out.join("manifest.json")));
    let trace: Vec<Value> = std::fs::read_to_string(out.join("trace.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(trace.len(), 3);
    let tree = ord2seq::DichotomicTree::build(7).unwrap();
    let path: Vec<u8> = trace.iter().map(|r| r["bit"].as_u64().unwrap() as u8).collect();
    assert_eq!(summary["path"], serde_json::json!(path));
    for (t, rec) in trace.iter().enumerate() {
        check("trace_record", rec);
        let mask: Vec<f64> = serde_json::from_value(rec["mask"].clone()).unwrap();
        let expect: Vec<f64> = if t == 0 {
            vec![1.0; 7]
        } else {
            let node = tree.node_at(&path[..t]).unwrap();
            (0..7).map(|c| if node.range().contains(c) { 1.0 } else { 0.3 }).collect()
        };
        assert_eq!(mask, expect, "step {}", t + 1);
    }

    let features = ok(&["decode", "--checkpoint", s(&ck), "--features", "0.1,-0.2,0.3,0,0,0,0,0.5", "--out", s(&out)]);
    let v: Value = serde_json::from_slice(&features.stdout).unwrap();
    assert!(v["label"].is_null());
}

#[test]
fn evaluate_matches_train_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 5, &[]);
    let run_dir = dir.path().join("run");
    ok(&train_args(s(&data), s(&run_dir), &[]));
    let out = dir.path().join("eval");
    ok(&["evaluate", "--checkpoint", s(&run_dir.join("checkpoint.json")), "--data", s(&data), "--out", s(&out)]);
    let eval = read_json(&out.join("metrics.json"));
    check("evaluate_metrics", &eval);
    let train = read_json(&run_dir.join("metrics.json"));
    assert_eq!(eval["metrics"], train["test"]);
}

#[test]
fn sweep_rows_are_sorted_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 5, &[]);
    let out = dir.path().join("sweep");
    let mut args = vec![
        "sweep-alpha", "--categories", "5", "--data", s(&data), "--out", s(&out), "--alphas", "0.5,0,0.2", "--seeds", "2",
        "--epochs", "1",
    ];
    args.extend_from_slice(TINY);
    ok(&args);
    let text = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("alpha,seed,accuracy,mae"));
    let keys: Vec<(String, String)> = lines
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            (c[0].to_string(), c[1].to_string())
        })
        .collect();
    let expect: Vec<(String, String)> = ["0.0", "0.2", "0.5"]
        .iter()
        .flat_map(|a| ["0", "1"].map(|s| (a.to_string(), s.to_string())))
        .collect();
    assert_eq!(keys, expect);
    let manifest = read_json(&out.join("manifest.json"));
    check("manifest", &manifest);
    assert!(manifest["substitutions"][0].as_str().unwrap().contains("1e-6"));

    let replay = dir.path().join("replay");
    ok(&["replay", "--manifest", s(&out.join("manifest.json")), "--out", s(&replay)]);
    assert_eq!(text, std::fs::read_to_string(replay.join("sweep.csv")).unwrap());
}

#[test]
fn ablation_report_shape() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 5, &[]);
    let out = dir.path().join("abl");
    let mut args = vec![
        "ablation", "--categories", "5", "--data", s(&data), "--out", s(&out), "--seeds", "3", "--epochs", "1",
    ];
    args.extend_from_slice(TINY);
    ok(&args);
    let report = read_json(&out.join("ablation.json"));
    check("ablation", &report);
    let variants = report["variants"].as_array().unwrap();
    assert_eq!(variants.len(), 4);
    for v in variants {
        assert_eq!(v["runs"].as_array().unwrap().len(), 3);
        for row in v["adjacency"].as_array().unwrap() {
            let total = row["correct"].as_f64().unwrap() + row["adjacent"].as_f64().unwrap() + row["other"].as_f64().unwrap();
            assert!((total - 1.0).abs() < 1e-9 || row["count"] == 0);
        }
    }
    let nomask = variants.iter().find(|v| v["variant"] == "no-mask").unwrap();
    assert_eq!(nomask["alpha"], 1.0);

    // the no-mask entry is the full variant at alpha 1 with the same seeds
    let full_run = dir.path().join("full1");
    ok(&train_args(s(&data), s(&full_run), &["--alpha", "1", "--epochs", "1", "--seed", "1"]));
    let m = read_json(&full_run.join("metrics.json"));
    let rec = &nomask["runs"][1];
    assert_eq!(rec["seed"], 1);
    assert_eq!(rec["accuracy"], m["test"]["accuracy"]);
    assert_eq!(rec["mae"], m["test"]["mae"]);
}

#[test]
fn tree_oracle_and_calibration_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tree");
    let res = ok(&["tree", "--categories", "6", "--out", s(&out)]);
    let tree: Value = serde_json::from_slice(&res.stdout).unwrap();
    check("tree", &tree);
    assert_eq!(tree["depth"], 3);
    assert_eq!(read_json(&out.join("tree.json")), tree);

    let data = dataset(dir.path(), 5, &["--spec-only"]);
    assert!(!dir.path().join("data/train.csv").exists());
    let res = ok(&["oracle", "--data", s(&data)]);
    let v: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert!(v["accuracy"].as_f64().unwrap() > 0.8);

    let res = ok(&["calibrate-noise", "--categories", "4", "--target", "0.9"]);
    let v: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert!(v["noise"].as_f64().unwrap() > 0.0);
}

#[test]
fn threads_env_must_be_positive() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 5, &[]);
    let out = dir.path().join("sweep");
    let mut args = vec!["sweep-alpha", "--categories", "5", "--data", s(&data), "--out", s(&out), "--alphas", "0.3", "--seeds", "1"];
    args.extend_from_slice(TINY);
    let res = bin().args(&args).env("ORD2SEQ_THREADS", "0").output().unwrap();
    assert_eq!(res.status.code(), Some(2));
}
