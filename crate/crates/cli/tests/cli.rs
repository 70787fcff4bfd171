use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn harood(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_harood"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok_json(args: &[&str]) -> Value {
    let out = harood(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("run.yaml");
    let text = format!(
        "algorithm: ERM
output: '{}'
max_epoch: 1
trials: 1
deterministic: true
grid:
  lr: [0.01]
  batch_size: [8]
synthetic:
  domain_count: 3
  class_count: 2
  channels: 1
  length: 16
  samples_per_class_per_domain: 5
  noise_std: 0.2
  seed: 1
",
        dir.join("out").display()
    );
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let summary = ok_json(&["run", "--config", &cfg, "--set", "algorithm=CORAL"]);
    assert_eq!(summary["algorithm"], "CORAL");
    assert_eq!(summary["records"], 3);
    assert_eq!(summary["complete"], true);

    let report_dir = dir.path().join("report");
    let out = harood(&[
        "report",
        "--store",
        dir.path().join("out").to_str().unwrap(),
        "--out",
        report_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(report_dir.join("ranks.csv").is_file());
}

#[test]
fn partial_run_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let first = ok_json(&["run", "--config", &cfg, "--max-new-runs", "1"]);
    assert_eq!(first["complete"], false);
    let second = ok_json(&["run", "--config", &cfg]);
    assert_eq!(second["complete"], true);
    assert_eq!(second["records"], 3);
}

#[test]
fn build_then_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("bundle");
    let manifest = ok_json(&[
        "build",
        "--task",
        "cross_position",
        "--dataset",
        "dsads",
        "--mock",
        "1",
        "--out",
        bundle.to_str().unwrap(),
    ]);
    assert_eq!(manifest["domain_count"], 5);
    let report = ok_json(&["analyze", "--bundle", bundle.to_str().unwrap(), "--sample-cap", "50", "--bins", "20"]);
    assert_eq!(report["pairs"].as_array().unwrap().len(), 10);
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = harood(&["run", "--set", "algorithm=SuperDG"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("SuperDG"));
    let missing = dir.path().join("nothing");
    let out = harood(&["report", "--store", missing.to_str().unwrap()]);
    assert!(!out.status.success());
}
