use std::fs;
use std::process::{Command, Output};

use glyphcomp::ExperimentConfig;

fn glyphcomp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glyphcomp")).args(args).env("RUST_LOG", "error").output().unwrap()
}

#[test]
fn usage_errors_exit_with_1() {
    assert_eq!(glyphcomp(&[]).status.code(), Some(1));
    assert_eq!(glyphcomp(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(glyphcomp(&["train", "--seed", "minus-one"]).status.code(), Some(1));
    assert_eq!(glyphcomp(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    let cfg = dir.path().to_str().unwrap();
    fs::write(&p, r#"{"schema_version": 99}"#).unwrap();
    let out = glyphcomp(&["train", "--config", p.to_str().unwrap(), "--out", cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema_version 99"));
    assert_eq!(glyphcomp(&["train", "--config", "/nonexistent/c.json"]).status.code(), Some(1));
    let mut c = ExperimentConfig::default();
    c.train.batch = 0;
    fs::write(&p, c.to_json()).unwrap();
    assert_eq!(glyphcomp(&["train", "--config", p.to_str().unwrap(), "--out", cfg]).status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = glyphcomp(&["sample", "--checkpoint", "/nonexistent.bin", "--prompt", "a glyph on a red field", "--identities", "64", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    fs::write(dir.path().join(".lock"), "1").unwrap();
    assert_eq!(glyphcomp(&["train", "--out", dir.path().to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn print_config_round_trips_and_report_tolerates_empty_dirs() {
    let out = glyphcomp(&["print-config", "--seed", "5"]);
    assert_eq!(out.status.code(), Some(0));
    let cfg = ExperimentConfig::from_json(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg.seeds, vec![5]);
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(glyphcomp(&["report", "--out", dir.path().to_str().unwrap()]).status.code(), Some(0));
}

#[test]
fn gen_data_writes_manifests_with_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let out = glyphcomp(&["gen-data", "--train-count", "3", "--heldout-count", "2", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let m = glyphcomp_world::io::read_manifest(&dir.path().join("heldout.json")).unwrap();
    assert_eq!(m.scenes.len(), 2);
    assert_eq!(m.config_hash, ExperimentConfig::default().hash());
    assert!(dir.path().join("train/masks/00002.png").exists());
}
