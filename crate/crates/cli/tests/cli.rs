use std::path::Path;
use std::process::{Command, Output};

use mlt_core::autodiff::Tensor;
use mlt_core::config::RunConfig;
use mlt_core::data::{Dataset, SyntheticSpec};
use mlt_core::eval::smooth_sequences;
use mlt_core::util::read_tensor;

fn mlt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlt"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("run mlt")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn spec(seed: u64, prefix: &str) -> SyntheticSpec {
    SyntheticSpec {
        num_sequences: 3,
        sequence_length: 30,
        n_x: 4,
        patch_dim: 3,
        num_labels: 3,
        trigger_size: 1,
        positive_rates: Some(vec![0.2, 0.3, 0.4]),
        min_segment: 3,
        max_segment: 8,
        seed,
        id_prefix: prefix.into(),
        ..SyntheticSpec::default()
    }
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

/// Generates train/valid data, trains a tiny model and returns the
/// workspace.
fn trained_workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_json(&root.join("train_spec.json"), &spec(1, "t"));
    write_json(&root.join("valid_spec.json"), &spec(2, "v"));
    assert_eq!(code(&mlt(root, &["gen-data", "--config", "train_spec.json", "--out", "train"])), 0);
    assert_eq!(code(&mlt(root, &["gen-data", "--config", "valid_spec.json", "--out", "valid"])), 0);
    let mut cfg = RunConfig::default();
    cfg.model = mlt_core::config::ModelConfig::tiny();
    cfg.data.train = "train".into();
    cfg.data.valid = Some("valid".into());
    cfg.data.batch_size = 16;
    cfg.run.epochs = 1;
    cfg.eval.window = 5;
    write_json(&root.join("run.json"), &cfg);
    let out = mlt(root, &["train", "--config", "run.json", "--out", "ckpt"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_eq!(code(&mlt(root, &["frobnicate"])), 1);
    assert_eq!(code(&mlt(root, &["train"])), 1);
    assert_eq!(code(&mlt(root, &["--help"])), 0);
    assert_eq!(code(&mlt(root, &["gradcheck", "--inject-fault", "no_such_op"])), 1);

    std::fs::write(root.join("bad.json"), "{ nope").unwrap();
    assert_eq!(code(&mlt(root, &["train", "--config", "bad.json"])), 1);
    std::fs::write(root.join("heads.json"), r#"{"model": {"d": 10, "N_h": 3}}"#).unwrap();
    assert_eq!(code(&mlt(root, &["train", "--config", "heads.json"])), 1);
    std::fs::write(root.join("spec.json"), r#"{"num_labels": 0}"#).unwrap();
    assert_eq!(code(&mlt(root, &["gen-data", "--config", "spec.json", "--out", "d"])), 1);
}

#[test]
fn missing_dataset_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    write_json(&dir.path().join("run.json"), &RunConfig::default());
    let out = mlt(dir.path(), &["train", "--config", "run.json"]);
    assert_eq!(code(&out), 2);
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn gen_data_is_deterministic_and_seedable() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_json(&root.join("spec.json"), &spec(4, "s"));
    for out in ["a", "b"] {
        assert_eq!(code(&mlt(root, &["gen-data", "--config", "spec.json", "--out", out])), 0);
    }
    assert_eq!(dir_bytes(&root.join("a")), dir_bytes(&root.join("b")));
    assert_eq!(code(&mlt(root, &["gen-data", "--config", "spec.json", "--out", "c", "--seed", "9"])), 0);
    assert_ne!(dir_bytes(&root.join("a")), dir_bytes(&root.join("c")));

    let ds = Dataset::load(&root.join("a")).unwrap();
    assert_eq!(ds.x.shape(), &[90, 4, 3]);
    assert_eq!(ds.y.shape(), &[90, 3]);
    assert_eq!(ds.sequences.len(), 3);
}

#[test]
fn eval_reports_both_smoothing_settings() {
    let ws = trained_workspace();
    let root = ws.path();
    let out = mlt(
        root,
        &["eval", "--checkpoint", "ckpt/final.mltc", "--data", "valid", "--config", "run.json", "--out", "report.json"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(root.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["window"], 5);
    assert_eq!(report["num_samples"], 90);
    for block in ["unsmoothed", "smoothed"] {
        let f1 = &report[block];
        assert_eq!(f1["per_label_f1"].as_array().unwrap().len(), 3, "{block}");
        let m = f1["macro_f1"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&m), "{block}");
    }

    // Stdout carries the same report when no path is given.
    let out = mlt(root, &["eval", "--checkpoint", "ckpt/final.mltc", "--data", "valid", "--config", "run.json"]);
    let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(printed, report);
}

#[test]
fn eval_rejects_incompatible_data() {
    let ws = trained_workspace();
    let root = ws.path();
    let other = SyntheticSpec {
        num_labels: 2,
        positive_rates: Some(vec![0.2, 0.3]),
        ..spec(3, "o")
    };
    write_json(&root.join("other.json"), &other);
    assert_eq!(code(&mlt(root, &["gen-data", "--config", "other.json", "--out", "other"])), 0);
    let out = mlt(root, &["eval", "--checkpoint", "ckpt/final.mltc", "--data", "other"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn predict_writes_raw_and_smoothed_probabilities() {
    let ws = trained_workspace();
    let root = ws.path();
    let out = mlt(
        root,
        &["predict", "--checkpoint", "ckpt/best.mltc", "--data", "valid", "--config", "run.json", "--out", "pred"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let raw = read_tensor(&root.join("pred/probs.mlt")).unwrap();
    let smoothed = read_tensor(&root.join("pred/probs_smoothed.mlt")).unwrap();
    assert_eq!(raw.shape(), &[90, 3]);
    assert!(raw.data().iter().all(|&p| p > 0.0 && p < 1.0));
    let ds = Dataset::load(&root.join("valid")).unwrap();
    let want: Tensor = smooth_sequences(&raw, &ds.sequences, 5).unwrap();
    assert_eq!(smoothed, want);
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("pred/predictions.json")).unwrap()).unwrap();
    assert_eq!(index["num_samples"], 90);
    assert_eq!(index["window"], 5);
    assert_eq!(index["sequences"].as_array().unwrap().len(), 3);
}

#[test]
fn gradcheck_reports_and_flags_faults() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let ok = mlt(root, &["gradcheck", "--out", "ok.json"]);
    assert_eq!(code(&ok), 0);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(root.join("ok.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);

    let bad = mlt(root, &["gradcheck", "--inject-fault", "softmax", "--out", "bad.json"]);
    assert_eq!(code(&bad), 2);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(root.join("bad.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], false);
    let softmax = report["components"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["component"] == "primitive.softmax")
        .unwrap();
    assert_eq!(softmax["passed"], false);
}
