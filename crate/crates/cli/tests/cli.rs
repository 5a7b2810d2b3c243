use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fem(out_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fem"))
        .arg("--out-dir")
        .arg(out_dir)
        .args(args)
        .env_remove("FEM_SEED")
        .env_remove("FEM_CONFIG")
        .env_remove("FEM_DETERMINISTIC")
        .env_remove("FEM_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn manifests(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("manifest_"))
        .collect();
    names.sort();
    names
}

#[test]
fn check_fem_read_reports_at_least_twelve_suites() {
    let dir = tempfile::tempdir().unwrap();
    let out = fem(dir.path(), &["--deterministic", "check", "fem_read", "--instances", "5"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    let rows = text.lines().filter(|l| l.starts_with("fem_read.")).count();
    assert!(rows >= 12, "{rows} suites");
    assert!(text.lines().all(|l| !l.ends_with("FAIL")));
    assert_eq!(manifests(dir.path()), vec!["manifest_check.json"]);
}

#[test]
fn injected_gradient_sign_fault_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = fem(dir.path(), &["check", "fem_read", "--instances", "5", "--fault", "grad-sign"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn deterministic_check_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["--deterministic", "--seed", "7", "check", "--instances", "3", "--json"];
    let ra = fem(a.path(), &args);
    let rb = fem(b.path(), &args);
    assert_eq!(ra.status.code(), Some(0));
    assert_eq!(ra.stdout, rb.stdout);
    assert_eq!(fs::read(a.path().join("check_report.jsonl")).unwrap(), fs::read(b.path().join("check_report.jsonl")).unwrap());
}

#[test]
fn table_degrees_prints_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = fem(dir.path(), &["table-degrees"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    for n in ["N=19", "N=22", "N=25", "N=33", "N=36", "N=40"] {
        assert!(text.contains(n), "{n} missing from\n{text}");
    }
    let csv = fs::read_to_string(dir.path().join("table_degrees.csv")).unwrap();
    assert!(csv.contains("10,1e-6,36,"));
    assert_eq!(manifests(dir.path()), vec!["manifest_table-degrees.json"]);
}

#[test]
fn train_toy_without_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(fem(dir.path(), &["train-toy"]).status.code(), Some(2));
    let missing = dir.path().join("absent.json");
    assert_eq!(fem(dir.path(), &["--config", missing.to_str().unwrap(), "train-toy"]).status.code(), Some(2));
}

#[test]
fn bad_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"steps": 2, "learning_rate": 1}"#).unwrap();
    assert_eq!(fem(dir.path(), &["--config", cfg.to_str().unwrap(), "train-toy"]).status.code(), Some(2));
}

#[test]
fn train_toy_writes_metrics_checkpoints_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.json");
    fs::write(&cfg, r#"{"t": 8, "d": 16, "heads": 2, "steps": 6, "eval_every": 3, "n_val": 16}"#).unwrap();
    let out = fem(dir.path(), &["--config", cfg.to_str().unwrap(), "--seed", "2", "train-toy"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("final fem step 6 index_accuracy")));
    assert!(text.lines().any(|l| l.starts_with("final softmax step 6 index_accuracy")));
    for f in ["metrics_fem.csv", "metrics_softmax.csv", "model_fem.ckpt", "model_softmax.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest_train-toy.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 2);
    assert_eq!(manifest["config"]["steps"], 6);
    assert_eq!(manifest["config"]["lr"], 0.01);
    assert_eq!(manifest["param_hash"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["artifacts"].as_array().unwrap().len(), 4);
}

#[test]
fn env_overrides_reach_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.json");
    fs::write(&cfg, r#"{"t": 8, "d": 16, "heads": 2, "steps": 6, "n_val": 8}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fem"))
        .args(["--config", cfg.to_str().unwrap(), "train-toy"])
        .env("FEM_OUT_DIR", dir.path())
        .env("FEM_STEPS", "2")
        .env("FEM_MODEL", "fem")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("final fem step 2"), "{text}");
    assert!(!text.contains("softmax"));
}

#[test]
fn export_golden_writes_every_op() {
    let dir = tempfile::tempdir().unwrap();
    let out = fem(dir.path(), &["export-golden", "--rows", "4"]);
    assert_eq!(out.status.code(), Some(0));
    let files = fs::read_dir(dir.path().join("golden")).unwrap().count();
    assert_eq!(files, fem_core::golden::GoldenOp::ALL.len());
}

#[test]
fn bench_writes_csv_and_bands() {
    let dir = tempfile::tempdir().unwrap();
    let out = fem(dir.path(), &["bench", "--t", "64,128,256", "--trials", "1", "--min-time-ms", "1", "--families", "decay,softmax"]);
    // Tiny sizes make the bands meaningless; only the artifacts are checked here.
    assert!(matches!(out.status.code(), Some(0) | Some(1)));
    let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "family,path,lse,t,seconds");
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 3);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest_bench.json")).unwrap()).unwrap();
    assert_eq!(manifest["extra"]["bands"].as_array().unwrap().len(), 4);
    assert_eq!(manifest["extra"]["linear_band"], serde_json::json!([1.6, 2.6]));
}

#[test]
fn bench_rejects_a_non_doubling_ladder() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(fem(dir.path(), &["bench", "--t", "64,100,200"]).status.code(), Some(2));
}

#[test]
fn config_flag_is_rejected_outside_train_toy() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(fem(dir.path(), &["--config", "x.json", "table-degrees"]).status.code(), Some(2));
}
