//! Contract tests for the command-line surface: flag plumbing, artifact
//! layout, determinism, and error reporting.

use clap::Parser;
use scp2_cli::{execute, Cli};
use std::fs;
use std::path::Path;
use tempfile::tempdir;

fn run(args: &[&str]) -> anyhow::Result<()> {
    let cli = Cli::try_parse_from(args).expect("arguments should parse");
    execute(cli, None)
}

fn line_count(path: &Path) -> usize {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .count()
}

#[test]
fn gen_data_splits_requested_records_in_half() {
    let dir = tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    run(&[
        "scp2", "--out", out, "gen-data", "--n", "1000", "--seed", "7",
    ])
    .unwrap();
    assert_eq!(line_count(&dir.path().join("train.jsonl")), 500);
    assert_eq!(line_count(&dir.path().join("cal.jsonl")), 500);
}

#[test]
fn config_file_drives_dataset_size() {
    let dir = tempdir().unwrap();
    let config_path = dir.path().join("run.toml");
    fs::write(
        &config_path,
        format!(
            "output_dir = \"{}\"\n[dataset]\nn_records = 400\n",
            dir.path().join("artifacts").display()
        ),
    )
    .unwrap();
    run(&[
        "scp2",
        "--config",
        config_path.to_str().unwrap(),
        "gen-data",
    ])
    .unwrap();
    let artifacts = dir.path().join("artifacts");
    assert_eq!(line_count(&artifacts.join("train.jsonl")), 200);
    assert_eq!(line_count(&artifacts.join("cal.jsonl")), 200);
}

#[test]
fn eval_runs_are_byte_identical_for_identical_seeds() {
    let dir = tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let eval = || {
        run(&[
            "scp2",
            "--out",
            out,
            "eval",
            "--controller",
            "apf",
            "--m",
            "1",
            "--episodes",
            "3",
            "--seed",
            "1",
        ])
        .unwrap();
        (
            fs::read(dir.path().join("eval_apf_m1/summary.csv")).unwrap(),
            fs::read(dir.path().join("eval_apf_m1/episodes.csv")).unwrap(),
        )
    };
    assert_eq!(eval(), eval());
}

#[test]
fn calibrate_before_train_names_the_missing_step() {
    let dir = tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let err = run(&["scp2", "--out", out, "calibrate"]).unwrap_err();
    let message = err.to_string();
    assert!(message.contains("train"), "unhelpful error: {message}");
}

#[test]
fn unknown_controller_is_rejected_with_the_valid_choices() {
    let dir = tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let err = run(&[
        "scp2", "--out", out, "eval", "--controller", "pid", "--episodes", "1",
    ])
    .unwrap_err();
    let message = err.to_string();
    assert!(message.contains("scp2"), "choices missing: {message}");
}

#[test]
fn stored_episodes_replay_exactly() {
    let dir = tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    run(&[
        "scp2",
        "--out",
        out,
        "eval",
        "--controller",
        "apf",
        "--m",
        "1",
        "--episodes",
        "1",
        "--seed",
        "3",
        "--logs",
    ])
    .unwrap();
    let log = dir.path().join("eval_apf_m1/logs/ep_000.jsonl");
    assert!(log.exists());
    run(&["scp2", "--out", out, "replay", log.to_str().unwrap(), "--check"]).unwrap();
}
