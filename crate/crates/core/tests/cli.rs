use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::Value;

fn vbc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vbc")).args(args).output().unwrap()
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

const TINY: &[&str] = &["--max-steps", "10", "--batch-size", "4", "--eval-every", "5", "--eval-episodes", "2"];

fn train(dir: &Path, method: &str, episodes: &str) -> Value {
    let mut args = vec!["train", "--method", method, "--seeds", "0", "--episodes", episodes, "--out"];
    args.push(dir.to_str().unwrap());
    args.extend_from_slice(TINY);
    json(&vbc(&args))
}

#[test]
fn ten_episode_run_is_quick_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let summary = train(dir.path(), "vbc-qmix", "10");
    assert!(started.elapsed().as_secs() < 60);
    assert_eq!(summary["seeds"][0]["status"], "completed");
    assert_eq!(summary["checkpoints"].as_array().unwrap().len(), 2);
    let seed_dir = dir.path().join("seed-0");
    for file in ["manifest.json", "metrics.csv", "commlog.jsonl", "checkpoint.json"] {
        assert!(seed_dir.join(file).exists(), "{file}");
    }
    assert!(dir.path().join("summary.csv").exists());
}

#[test]
fn final_beta_of_baselines() {
    let dir = tempfile::tempdir().unwrap();
    let fc = train(&dir.path().join("fc"), "fc", "5");
    let vdn = train(&dir.path().join("vdn"), "vdn", "5");
    assert_eq!(fc["final_beta"], 1.0);
    assert_eq!(vdn["final_beta"], 0.0);
}

#[test]
fn eval_accepts_infinite_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), "vbc-vdn", "5");
    let run = dir.path().join("seed-0");
    let run = run.to_str().unwrap();
    let beta = |d1: &str, d2: &str| {
        json(&vbc(&["eval", "--run", run, "--episodes", "3", "--delta1", d1, "--delta2", d2]))["beta"]
            .as_f64()
            .unwrap()
    };
    assert_eq!(beta("inf", "-inf"), 1.0);
    assert_eq!(beta("-inf", "-inf"), 0.0);
    assert_eq!(beta("inf", "inf"), 0.0);
    let betas: Vec<f64> = ["-inf", "0", "inf"].iter().map(|d2| beta("1", d2)).collect();
    assert!(betas.windows(2).all(|w| w[0] >= w[1]), "{betas:?}");

    let tuned = json(&vbc(&["eval", "--run", run, "--episodes", "3", "--tune-max-beta", "0.5"]));
    assert!(tuned["beta"].as_f64().unwrap() <= 1.0);
    assert!(!tuned["tuning"].as_array().unwrap().is_empty());
}

#[test]
fn manifest_rerun_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    train(&dir.path().join("a"), "qmix", "10");
    let manifest = dir.path().join("a/seed-0/manifest.json");
    let again = dir.path().join("b");
    let out = vbc(&["train", "--manifest", manifest.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    json(&out);
    assert_eq!(
        std::fs::read(dir.path().join("a/seed-0/metrics.csv")).unwrap(),
        std::fs::read(again.join("metrics.csv")).unwrap()
    );
}

#[test]
fn env_overrides_and_dry_run() {
    let out = Command::new(env!("CARGO_BIN_EXE_vbc"))
        .args(["train", "--dry-run", "--lambda", "0.3"])
        .env("VBC_ENV", "predator-prey")
        .env("VBC_DELTA2", "-inf")
        .output()
        .unwrap();
    let spec = json(&out);
    assert_eq!(spec["env"], "predator-prey");
    assert_eq!(spec["train"]["lambda"], 0.3);
    assert_eq!(spec["comm"]["delta2"], "-inf");
}

#[test]
fn invalid_input_is_rejected() {
    assert!(!vbc(&["train", "--dry-run", "--gamma", "1.5"]).status.success());
    assert!(!vbc(&["train", "--method", "nope"]).status.success());
    assert!(!vbc(&["train", "--dry-run", "--delta1", "nan"]).status.success());
}

#[test]
fn theorem_check_reports_pass_and_fail() {
    let quick = ["verify-theorem1", "--updates", "100000", "--seeds", "0,1"];
    let out = vbc(&quick);
    let reports = json(&out);
    assert_eq!(reports.as_array().unwrap().len(), 2);
    assert!(reports[0]["final_error"].as_f64().unwrap() <= 0.35);

    let mut constant = quick.to_vec();
    constant.extend(["--mode", "constant"]);
    let out = vbc(&constant);
    assert_eq!(out.status.code(), Some(1));
    let reports: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(reports[0]["pass"], false);
}

#[test]
fn sweep_of_nothing_and_of_two_specs() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.json");
    std::fs::write(&empty, "[]").unwrap();
    let out = vbc(&["sweep", "--specs", empty.to_str().unwrap(), "--out", dir.path().join("e").to_str().unwrap()]);
    assert_eq!(json(&out), Value::Array(vec![]));

    let specs = dir.path().join("specs.json");
    let spec = |method: &str| {
        serde_json::json!({
            "method": method,
            "seeds": [0],
            "grid": {"max_steps": 8},
            "train": {"batch_size": 2},
            "schedule": {"episodes": 4, "eval_every": 4, "eval_episodes": 1},
        })
    };
    std::fs::write(&specs, serde_json::to_string(&[spec("vbc-vdn"), spec("vdn")]).unwrap()).unwrap();
    let out_dir = dir.path().join("s");
    let rows = json(&vbc(&["sweep", "--specs", specs.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]));
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert!(out_dir.join("sweep.csv").exists());
}

#[test]
fn gradcheck_command_passes() {
    let checks = json(&vbc(&["gradcheck", "--seeds", "2"]));
    assert_eq!(checks.as_array().unwrap().len(), 8);
}
