//! The `bgm` binary end to end on a small config.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const VERBS: [&str; 8] = [
    "generate-data",
    "retrieve",
    "synth-sps",
    "train-sl",
    "train-rl",
    "eval",
    "gap-experiment",
    "report",
];

fn small_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/configs/small.toml")
}

fn bgm(out: &Path, threads: usize, args: &[&str]) -> Output {
    let cfg = small_config();
    Command::new(env!("CARGO_BIN_EXE_bgm"))
        .arg("--config")
        .arg(&cfg)
        .arg("--seed")
        .arg("3")
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RAYON_NUM_THREADS", threads.to_string())
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn bgm")
}

fn run_all(out: &Path, threads: usize) {
    for verb in VERBS {
        let o = bgm(out, threads, &[verb]);
        assert!(o.status.success(), "{verb}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

fn read(dir: &Path, rel: &str) -> String {
    std::fs::read_to_string(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

#[test]
fn every_verb_runs_and_thread_count_does_not_change_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_all(a.path(), 1);
    run_all(b.path(), 4);
    for rel in [
        "data/examples.jsonl",
        "retrieved.jsonl",
        "sps.jsonl",
        "checkpoints/sl-seed3.json",
        "checkpoints/rl-seed3.json",
        "logs/sl_curve-seed3.csv",
        "logs/rl-seed3.csv",
        "results.csv",
        "gap_report.md",
        "report.md",
    ] {
        assert_eq!(read(a.path(), rel), read(b.path(), rel), "{rel} differs across thread counts");
    }
    let results = read(a.path(), "results.csv");
    for system in ["naive", "gtr", "random", "psr", "bgm"] {
        assert!(results.lines().any(|l| l.starts_with(system)), "{system} missing:\n{results}");
    }
    assert!(read(a.path(), "report.md").contains("## "));
}

#[test]
fn eval_twice_replaces_rows_instead_of_appending() {
    let dir = tempfile::tempdir().unwrap();
    assert!(bgm(dir.path(), 1, &["eval"]).status.success());
    let first = read(dir.path(), "results.csv");
    assert!(bgm(dir.path(), 1, &["eval"]).status.success());
    assert_eq!(first, read(dir.path(), "results.csv"));
}

#[test]
fn bad_inputs_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_bgm"))
        .args(["--config", "/nonexistent/bgm.toml", "retrieve"])
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/bgm.toml"));

    let o = bgm(dir.path(), 1, &["report"]);
    assert!(!o.status.success(), "report without results should fail");
    assert!(String::from_utf8_lossy(&o.stderr).contains("results.csv"));
}
