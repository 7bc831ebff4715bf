use std::path::Path;
use std::process::{Command, Output};

use latinf_core::fixtures::tiny_run_config;

fn latinf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latinf"))
        .args(args)
        .env_remove("LATINF_CHECKPOINTS")
        .env_remove("LATINF_OUTPUTS")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, tiny_run_config(dir).to_toml()).unwrap();
    path.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn selftest_exits_zero_and_lists_checks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = latinf(&["--config", &cfg, "selftest"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 13, "{text}");
    assert!(!text.contains("FAIL"));
    assert!(dir.path().join("outputs/selftest.json").exists());
}

#[test]
fn invalid_config_exits_two_and_lists_every_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "seed = 1\n[influence]\ndamping = -1.0\nbogus = 3\n[sae]\nk = 0\n").unwrap();
    let out = latinf(&["--config", path.to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    for needle in ["damping", "bogus", "k 0"] {
        assert!(err.contains(needle), "missing {needle} in {err}");
    }
}

#[test]
fn missing_prerequisite_exits_one_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = latinf(&["--config", &cfg, "influence"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("model checkpoint") && err.contains("latinf train"), "{err}");
}

#[test]
fn pipeline_end_to_end_with_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("elsewhere");
    let out_arg = out_dir.to_str().unwrap();
    for cmd in ["train", "sae-train", "influence", "eval-mask", "ortho", "heatmap", "bench"] {
        let out = latinf(&["--config", &cfg, "--workers", "2", "--out", out_arg, cmd]);
        assert!(out.status.success(), "{cmd}: {}", stderr(&out));
    }
    // retain-fraction 0.5 of 24 candidates
    let sidecar: serde_json::Value = read_json(&out_dir.join("influence/test-0000.json"));
    assert_eq!(sidecar["row_ids"].as_array().unwrap().len(), 12);
    let manifest: serde_json::Value = read_json(&out_dir.join("manifests/influence.json"));
    assert_eq!(manifest["workers"], 2);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert!(out_dir.join("eval/mask.csv").exists());
    assert!(out_dir.join("bench/bench.csv").exists());
    assert!(!dir.path().join("outputs").exists());
}

#[test]
fn env_overrides_paths_and_seed_flag_changes_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let ck = dir.path().join("env-ck");
    let out = Command::new(env!("CARGO_BIN_EXE_latinf"))
        .args(["--config", &cfg, "--seed", "7", "print-config"])
        .env("LATINF_CHECKPOINTS", &ck)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("seed = 7"), "{text}");
    assert!(text.contains("env-ck"), "{text}");
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}
