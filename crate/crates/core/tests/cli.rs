use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sourceaware"))
        .arg("--data")
        .arg(dir.join("data"))
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn error_line(out: &Output) -> serde_json::Value {
    assert!(!out.status.success(), "expected failure, stdout: {}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("an error line");
    serde_json::from_str(last).unwrap_or_else(|_| panic!("not a json error line: {last}"))
}

#[test]
fn stages_refuse_to_run_out_of_order() {
    let dir = tempfile::tempdir().unwrap();
    let e = error_line(&run(dir.path(), &["train", "--stage", "2b"]));
    assert_eq!(e["error"], "missing_prerequisite");
    assert!(e["message"].as_str().unwrap().contains("2a"), "{e}");

    let e = error_line(&run(dir.path(), &["train", "--stage", "3"]));
    assert_eq!(e["error"], "missing_prerequisite");
    assert!(e["message"].as_str().unwrap().contains("stage 1"), "{e}");

    let e = error_line(&run(dir.path(), &["predict"]));
    assert_eq!(e["error"], "missing_prerequisite");
    let e = error_line(&run(dir.path(), &["fuse"]));
    assert_eq!(e["error"], "missing_prerequisite");
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let e = error_line(&run(dir.path(), &["train", "--stage", "4"]));
    assert_eq!(e["error"], "invalid_argument");

    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "schema_version = 1\n[paths]\nledger = \"does_not_exist.csv\"\n").unwrap();
    let e = error_line(&run(dir.path(), &["--config", cfg.to_str().unwrap(), "synth"]));
    assert_eq!(e["error"], "io");
    assert!(e["message"].as_str().unwrap().contains("does_not_exist.csv"));

    fs::write(&cfg, "schema_version = 1\nunknown_key = 3\n").unwrap();
    let e = error_line(&run(dir.path(), &["--config", cfg.to_str().unwrap(), "synth"]));
    assert_eq!(e["error"], "format");
}

#[test]
fn synth_then_prep_stamps_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "schema_version = 1\nseed = 3\n[synth]\npercent = 2\n").unwrap();
    let args = ["--config", cfg.to_str().unwrap()];
    let out = run(dir.path(), &[&args[..], &["synth"]].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary["scans"].as_u64().unwrap() > 0);
    assert!(dir.path().join("data/manifest.csv").exists());
    assert!(dir.path().join("data/test_truth.csv").exists());

    // stage 2b still needs 2a after the data exists
    let e = error_line(&run(dir.path(), &[&args[..], &["train", "--stage", "2b"]].concat()));
    assert!(e["message"].as_str().unwrap().contains("2a"));

    let out = run(dir.path(), &[&args[..], &["prep"]].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let resolved = fs::read_to_string(dir.path().join("out/resolved_config.toml")).unwrap();
    assert!(resolved.contains("seed = 3"));
    let stamp = fs::read_to_string(dir.path().join("out/ledger.sha256")).unwrap();
    assert!(stamp.starts_with("ledger "), "{stamp}");
}
