//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sae_steer::topk_sae::SaeModel;

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// An SAE with every parameter drawn i.i.d. Gaussian, biases included.
pub fn random_sae(d: usize, dict: usize, k: usize, seed: u64) -> SaeModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SaeModel::from_parts(
        d,
        dict,
        k,
        gaussian(&mut rng, d * dict, 1.0),
        gaussian(&mut rng, dict, 0.5),
        gaussian(&mut rng, dict * d, 1.0),
        gaussian(&mut rng, d, 0.5),
    )
    .unwrap()
}

/// Linear-interpolation percentile written out independently of the library.
pub fn oracle_percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (v.len() - 1) as f64 * q;
    let i = h.floor() as usize;
    if i + 1 >= v.len() {
        return v[v.len() - 1];
    }
    v[i] + (h - i as f64) * (v[i + 1] - v[i])
}

/// Means of all `n^n` resamples, built by recursion over positions.
pub fn oracle_resample_means(values: &[f64]) -> Vec<f64> {
    fn rec(values: &[f64], picked: &mut Vec<usize>, out: &mut Vec<f64>) {
        if picked.len() == values.len() {
            let s: f64 = picked.iter().map(|&i| values[i]).sum();
            out.push(s / values.len() as f64);
            return;
        }
        for i in 0..values.len() {
            picked.push(i);
            rec(values, picked, out);
            picked.pop();
        }
    }
    let mut out = Vec::new();
    rec(values, &mut Vec::new(), &mut out);
    out
}

// ---------------------------------------------------------------------------
// CLI pipeline
// ---------------------------------------------------------------------------

pub fn saesteer(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_saesteer"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn saesteer");
    assert!(
        out.status.success(),
        "saesteer {:?} failed ({:?}): {}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Runs the whole toy pipeline inside `dir` with `threads` workers:
/// world, studies, collect, train, screen at two layers, plan, steer with
/// and without the plan, score, census and profile.
pub fn run_toy_pipeline(dir: &Path, threads: usize) {
    let t = threads.to_string();
    let run = |args: &[&str]| {
        let mut full: Vec<&str> = vec!["--threads", &t];
        full.extend_from_slice(args);
        saesteer(dir, &full);
    };
    for sub in ["data", "test", "saes", "lists", "model_b"] {
        fs::create_dir_all(dir.join(sub)).unwrap();
    }
    run(&["toyworld", "make", "--seed", "1", "--out", "data/world.json"]);
    run(&["toyworld", "studies", "--world", "data/world.json", "--count", "600", "--seed", "2", "--out", "data/studies.json"]);
    run(&["toyworld", "studies", "--world", "data/world.json", "--count", "120", "--seed", "3", "--out", "test/studies.json"]);
    fs::copy(dir.join("data/world.json"), dir.join("test/world.json")).unwrap();
    run(&["collect", "--in", "data", "--layers", "8,16", "--out", "shards", "--seed", "4"]);
    run(&["collect", "--in", "test", "--layers", "16", "--out", "test_shards", "--seed", "4"]);
    for l in ["8", "16"] {
        let sae = format!("saes/sae_l{l}.bin");
        run(&["train-sae", "--shards", "shards", "--layer", l, "--dict", "128", "--k", "8", "--epochs", "8", "--seed", "5", "--out", &sae]);
        let deltas = format!("lists/deltas_l{l}.json");
        run(&["screen", "--sae", &sae, "--world", "data/world.json", "--studies", "data/studies.json", "--layer", l, "--panel-size", "48", "--seed", "6", "--out", &deltas]);
        fs::copy(dir.join(&deltas), dir.join(format!("model_b/deltas_l{l}.json"))).unwrap();
    }
    run(&["plan", "--lists", "lists/lists_l8.json,lists/lists_l16.json", "--alpha", "0.5", "--k-budget", "10", "--directions", "combined", "--out", "plan.json"]);
    run(&["grid", "--world", "data/world.json", "--studies", "test/studies.json", "--saes", "saes", "--lists", "lists", "--alphas", "0.2,0.5", "--kbudgets", "5,10", "--layer-sets", "16;8,16", "--out", "grid.json"]);
    run(&["steer", "--world", "data/world.json", "--inputs", "test/studies.json", "--out", "base.jsonl"]);
    run(&["steer", "--plan", "plan.json", "--saes", "saes", "--world", "data/world.json", "--inputs", "test/studies.json", "--out", "steered.jsonl"]);
    run(&["toyworld", "score", "--studies", "test/studies.json", "--reports", "base.jsonl", "--out", "base_scores.jsonl"]);
    run(&["toyworld", "score", "--studies", "test/studies.json", "--reports", "steered.jsonl", "--out", "steered_scores.jsonl"]);
    run(&["score", "--baseline", "base_scores.jsonl", "--steered", "steered_scores.jsonl", "--bootstrap", "2000", "--seed", "7", "--out", "score.json"]);
    run(&["census", "--model-a", "lists", "--model-b", "model_b", "--layers", "8,16", "--boot", "500", "--seed", "8", "--out", "census.json"]);
    run(&["profile", "--sae", "saes/sae_l16.bin", "--shards", "test_shards", "--layer", "16", "--reports", "base.jsonl", "--features", "0,1,2,3", "--out", "profile"]);
}

/// Every regular file under `root`, as sorted relative paths.
pub fn list_files(root: &Path) -> Vec<PathBuf> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}
