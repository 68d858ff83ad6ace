//! End-to-end tests of the `saesteer` binary.

mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use common::{run_toy_pipeline, saesteer};
use serde_json::Value;

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

fn small_setup(dir: &Path) {
    fs::create_dir_all(dir.join("data")).unwrap();
    saesteer(dir, &["toyworld", "make", "--d", "64", "--dict", "96", "--k", "4", "--drivers", "FF:3,MF:2", "--seed", "1", "--out", "data/world.json"]);
    saesteer(dir, &["toyworld", "studies", "--world", "data/world.json", "--count", "40", "--seed", "2", "--out", "data/studies.json"]);
}

#[test]
fn toy_pipeline_shows_mf_down_under_combined_steering() {
    let tmp = tempfile::tempdir().unwrap();
    run_toy_pipeline(tmp.path(), 0);
    let score = read_json(&tmp.path().join("score.json"));
    let mf = score["per_type"]["delta"]["MF"].as_i64().unwrap();
    assert!(mf < 0, "MF delta {mf}");
    let green = score["metrics"]
        .as_array()
        .unwrap()
        .iter()
        .find(|m| m["metric"] == "green")
        .unwrap();
    assert!(green["test"]["mean_delta"].as_f64().unwrap() > 0.0);

    for f in ["profile/profile.tsv", "profile/profile.json", "census.json", "grid.json", "plan.json"] {
        assert!(tmp.path().join(f).is_file(), "{f} missing");
    }
    let run = read_json(&tmp.path().join("saes/sae_l16.bin.run.json"));
    assert_eq!(run["command"], "train-sae");
    assert_eq!(run["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn scoring_identical_files_gives_zero_deltas() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_setup(dir);
    saesteer(dir, &["steer", "--world", "data/world.json", "--inputs", "data/studies.json", "--out", "base.jsonl"]);
    saesteer(dir, &["toyworld", "score", "--studies", "data/studies.json", "--reports", "base.jsonl", "--out", "scores.jsonl"]);
    saesteer(dir, &["score", "--baseline", "scores.jsonl", "--steered", "scores.jsonl", "--bootstrap", "500", "--out", "score.json"]);
    let score = read_json(&dir.join("score.json"));
    for m in score["metrics"].as_array().unwrap() {
        assert_eq!(m["test"]["mean_delta"].as_f64().unwrap(), 0.0, "{}", m["metric"]);
    }
    for (_, v) in score["per_type"]["delta"].as_object().unwrap() {
        assert_eq!(v.as_i64().unwrap(), 0);
    }
}

#[test]
fn zero_alpha_steering_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_setup(dir);
    fs::create_dir_all(dir.join("saes")).unwrap();
    saesteer(dir, &["collect", "--in", "data", "--layers", "16", "--out", "shards"]);
    saesteer(dir, &["train-sae", "--shards", "shards", "--layer", "16", "--dict", "96", "--k", "8", "--epochs", "2", "--out", "saes/sae_l16.bin"]);
    saesteer(dir, &["screen", "--sae", "saes/sae_l16.bin", "--world", "data/world.json", "--studies", "data/studies.json", "--layer", "16", "--panel-size", "20", "--out", "deltas_l16.json"]);
    saesteer(dir, &["plan", "--lists", "lists_l16.json", "--alpha", "0", "--k-budget", "20", "--out", "plan.json"]);
    saesteer(dir, &["steer", "--world", "data/world.json", "--inputs", "data/studies.json", "--out", "base.jsonl"]);
    saesteer(dir, &["steer", "--plan", "plan.json", "--saes", "saes", "--world", "data/world.json", "--inputs", "data/studies.json", "--out", "steered.jsonl"]);
    assert_eq!(fs::read(dir.join("base.jsonl")).unwrap(), fs::read(dir.join("steered.jsonl")).unwrap());
}

#[test]
fn errors_use_documented_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_saesteer");

    let out = Command::new(bin).arg("no-such-command").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "usage");

    let out = Command::new(bin)
        .current_dir(tmp.path())
        .args(["score", "--pairs", "missing.jsonl", "--out", "x.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["exit_code"], 3);

    fs::write(tmp.path().join("plan.json"), r#"{"alpha": 1.5, "beta": 0, "mode": "residual", "layers": {}}"#).unwrap();
    small_setup(tmp.path());
    let out = Command::new(bin)
        .current_dir(tmp.path())
        .args(["steer", "--plan", "plan.json", "--world", "data/world.json", "--inputs", "data/studies.json", "--out", "r.jsonl"])
        .output()
        .unwrap();
    assert_ne!(out.status.code(), Some(0));
    assert!(!tmp.path().join("r.jsonl").exists());

    let out = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let help = String::from_utf8_lossy(&out.stdout);
    for sub in ["collect", "train-sae", "screen", "grid", "steer", "score", "census", "profile", "toyworld"] {
        assert!(help.contains(sub), "{sub} missing from help");
    }
}
