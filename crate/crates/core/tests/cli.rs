use std::fs;
use std::path::Path;

use grainmoe::analysis::{read_ep_load, read_logit_ranks, read_metrics};
use grainmoe::cli::{main_with_args, RunConfig, CHECKPOINT_FILE, CONFIG_FILE, EXIT_INVALID, EXIT_OK};

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = main_with_args(std::iter::once("grainmoe").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn train_toy(dir: &Path, steps: &str) {
    let (code, out, err) = run(&["train", "--preset", "toy-g8", "--seed", "3", "--steps", steps, "--out", dir.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK, "stderr: {err}");
    assert!(out.contains("trained"));
}

#[test]
fn plan_lists_every_preset() {
    let (code, out, _) = run(&["plan"]);
    assert_eq!(code, EXIT_OK);
    for name in grainmoe::configplan::PRESET_NAMES {
        assert!(out.contains(name), "missing {name} in\n{out}");
    }
}

#[test]
fn plan_json_parses() {
    let (code, out, _) = run(&["plan", "--preset", "11b-g8", "--json"]);
    assert_eq!(code, EXIT_OK);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(v.is_object() || v.is_array());
}

#[test]
fn bad_inputs_exit_invalid() {
    assert_eq!(run(&["plan", "--preset", "nope"]).0, EXIT_INVALID);
    assert_eq!(run(&["train", "--preset", "nope", "--out", "x"]).0, EXIT_INVALID);
    assert_eq!(run(&["frobnicate"]).0, EXIT_INVALID);
    let (code, _, err) = run(&["train", "--preset", "toy-g8"]);
    assert_eq!(code, EXIT_INVALID);
    assert!(err.contains("--out"));
}

#[test]
fn train_writes_artifacts_and_config_reproduces() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    train_toy(&a, "6");
    for f in ["metrics.csv", "ep_load.csv", "logit_ranks.json", CHECKPOINT_FILE, CONFIG_FILE] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    let records = read_metrics(&a.join("metrics.csv")).unwrap();
    assert_eq!(records.len(), 6);
    assert!(records.iter().all(|r| r.loss.is_finite()));
    assert_eq!(read_ep_load(&a.join("ep_load.csv")).unwrap().len(), 6 * 8);
    assert!(!read_logit_ranks(&a.join("logit_ranks.json")).unwrap().is_empty());

    let cfg = RunConfig::load(&a.join(CONFIG_FILE)).unwrap();
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.hp.steps, 6);

    let b = tmp.path().join("b");
    let (code, _, err) = run(&["train", "--config", a.join(CONFIG_FILE).to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK, "stderr: {err}");
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join(CHECKPOINT_FILE)).unwrap(), fs::read(b.join(CHECKPOINT_FILE)).unwrap());
}

#[test]
fn analyze_reads_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    train_toy(&run_dir, "4");
    let (code, out, err) = run(&["analyze", "--run", run_dir.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK, "stderr: {err}");
    assert!(out.contains("wrote"));
}

#[test]
fn analyze_missing_run_is_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, _, _) = run(&["analyze", "--run", tmp.path().join("none").to_str().unwrap()]);
    assert_ne!(code, EXIT_OK);
}
