use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn evofa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evofa")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = evofa(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const DRIFT: &str = r#"{
  "num_subjects": 2, "trials_per_session": 6, "samples_per_trial": 8,
  "n_electrodes": 4, "d_bands": 2, "intra_drift_rate": 1.0, "rng_seed": 3
}"#;

fn experiment(dir: &Path, dataset: &str) -> std::path::PathBuf {
    let text = format!(
        r#"{{
  "dataset": {dataset},
  "protocol": "intra",
  "backbone": {{"conv_channels": [4, 4, 8, 8]}},
  "train": {{"max_epochs": 2, "supervised_epochs": 2, "episodes_per_epoch": 4, "validation_episodes": 4}},
  "eval": {{"episodes": 12}},
  "adapt": {{"snapshot_size": 4}},
  "subjects": [1],
  "shots": [1, 2],
  "seed": 7
}}"#
    );
    let path = dir.join("experiment.json");
    fs::write(&path, text).unwrap();
    path
}

fn synthetic(dir: &Path) -> std::path::PathBuf {
    let inner = DRIFT.trim_start_matches('{');
    experiment(dir, &format!(r#"{{"kind": "synthetic", {inner}"#))
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = evofa(&["compare", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_gen_output_passes_import_check() {
    let tmp = TempDir::new().unwrap();
    let drift = tmp.path().join("drift.json");
    fs::write(&drift, DRIFT).unwrap();
    let data = tmp.path().join("data");
    ok(&["synth-gen", "--config", p(&drift), "--out", p(&data)]);
    let manifest = data.join("manifest.json");
    assert!(manifest.exists());
    let summary = ok(&["import-check", "--manifest", p(&manifest)]);
    assert!(summary.contains("subject 1"), "{summary}");

    // The imported copy trains like the generated one.
    let cfg = experiment(tmp.path(), r#"{"kind": "import", "manifest": "data/manifest.json"}"#);
    let out = tmp.path().join("run");
    ok(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert!(out.join("checkpoints/subject1.ckpt").exists());
}

#[test]
fn train_then_evaluate_with_and_without_adaptation() {
    let tmp = TempDir::new().unwrap();
    let cfg = synthetic(tmp.path());
    let run = tmp.path().join("run");
    ok(&["train", "--config", p(&cfg), "--out", p(&run)]);
    let ckpt = run.join("checkpoints/subject1.ckpt");
    assert!(ckpt.exists());
    assert!(run.join("checkpoints/subject1-supervised.ckpt").exists());
    let log = fs::read_to_string(run.join("logs/train-subject1.csv")).unwrap();
    assert!(log.lines().count() >= 2);
    assert!(run.join("run-manifest.json").exists());

    let on = tmp.path().join("on");
    let off = tmp.path().join("off");
    ok(&["evaluate", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--shots", "1,2", "--export-embeddings", "--out", p(&on)]);
    ok(&["evaluate", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--adapt", "off", "--out", p(&off)]);
    let with = fs::read_to_string(on.join("results.csv")).unwrap();
    let without = fs::read_to_string(off.join("results.csv")).unwrap();
    assert!(with.contains("FSL+EvoFA"));
    assert!(!without.contains("FSL+EvoFA"));
    assert!(on.join("accuracy-vs-shots.csv").exists());
    let emb = fs::read_to_string(on.join("embeddings/subject1.csv")).unwrap();
    assert!(emb.starts_with("subject,session,trial,time_index,label,e1"));
}

#[test]
fn compare_is_deterministic_and_report_rebuilds_csv() {
    let tmp = TempDir::new().unwrap();
    let cfg = synthetic(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["compare", "--config", p(&cfg), "--out", p(&a)]);
    ok(&["compare", "--config", p(&cfg), "--out", p(&b)]);
    let csv_a = fs::read(a.join("results.csv")).unwrap();
    assert_eq!(csv_a, fs::read(b.join("results.csv")).unwrap());

    let r = tmp.path().join("report");
    let summary = ok(&["report", "--results", p(&a.join("results.json")), "--out", p(&r)]);
    assert!(summary.contains("FSL"), "{summary}");
    assert_eq!(csv_a, fs::read(r.join("results.csv")).unwrap());
}

#[test]
fn invalid_config_fails_without_partial_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"eval": {"way": 5}, "dataset": {"kind": "synthetic", "num_subjects": 1}}"#).unwrap();
    let out = tmp.path().join("out");
    let res = evofa(&["compare", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).starts_with("error:"));
    let leftovers = fs::read_dir(&out).map(|d| d.count()).unwrap_or(0);
    assert_eq!(leftovers, 0);

    let missing = evofa(&["evaluate", "--config", p(&cfg), "--checkpoint", "nowhere.ckpt", "--out", p(&out)]);
    assert_eq!(missing.status.code(), Some(1));
}
