//! End-to-end smoke tests for the `hglmrec` binary: artifact layout,
//! command round trips and error reporting.

use std::path::Path;
use std::process::Command;

use hglmrec_core::config::RunConfig;
use hglmrec_core::data::filter_min_interactions;
use hglmrec_core::pipeline::Model;
use hglmrec_core::synth::planted_dataset;
use hglmrec_core::{checkpoint, moa};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hglmrec"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn run_err(cmd: &mut Command) -> String {
    let out = cmd.output().expect("binary runs");
    assert!(!out.status.success(), "command unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_planted_csv(path: &Path) {
    let ds = planted_dataset(0);
    let mut text = String::new();
    for r in &ds.records {
        text.push_str(&format!(
            "{},{},{},{}\n",
            r.user_id,
            r.item_id,
            r.behaviour.name(),
            r.timestamp
        ));
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn prep_train_eval_recommend_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("data.csv");
    write_planted_csv(&csv);
    let data = csv.to_str().unwrap();

    // prep
    let prep = dir.path().join("prep");
    let stdout = run_ok(bin().args([
        "prep",
        "--data",
        data,
        "--out",
        prep.to_str().unwrap(),
        "--negatives",
        "20",
        "--seed",
        "1",
    ]));
    assert!(stdout.contains("prepared 20 users"), "stdout: {stdout}");
    for name in [
        "dataset.json",
        "train.json",
        "validation_instances.jsonl",
        "test_instances.jsonl",
        "stats.json",
        "split_report.json",
        "config.json",
    ] {
        assert!(prep.join(name).is_file(), "missing {name}");
    }

    // train
    let run = dir.path().join("run");
    let stdout = run_ok(bin().args([
        "train",
        "--data",
        data,
        "--out",
        run.to_str().unwrap(),
        "--dim",
        "16",
        "--epochs",
        "2",
        "--negatives",
        "20",
        "--seed",
        "1",
    ]));
    assert!(stdout.contains("trained 2 epochs"), "stdout: {stdout}");
    let ckpt = run.join("checkpoint.hgrc");
    assert!(ckpt.is_file());
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "mean_loss", "clamp_count", "val_hr5", "val_ndcg5", "wall_ms"] {
            assert!(v.get(key).is_some(), "train log missing {key}");
        }
    }

    // eval
    let ev = dir.path().join("eval");
    let stdout = run_ok(bin().args([
        "eval",
        "--data",
        data,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        ev.to_str().unwrap(),
        "--negatives",
        "20",
        "--seed",
        "1",
    ]));
    assert!(stdout.contains("HR@5"), "stdout: {stdout}");
    let report = std::fs::read_to_string(ev.join("eval_report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 20 + 1, "20 user rows + summary");

    // recommend: exactly k ranked lines of distinct unseen items
    let stdout = run_ok(bin().args([
        "recommend",
        "--data",
        data,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--user",
        "u0",
        "--k",
        "5",
    ]));
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 5);
    let mut seen = std::collections::HashSet::new();
    for (i, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(fields.len(), 3, "line {line:?}");
        assert_eq!(fields[0], (i + 1).to_string());
        assert!(seen.insert(fields[1].to_string()), "duplicate item {line:?}");
        fields[2].parse::<f64>().expect("score parses");
    }
}

#[test]
fn zero_epoch_checkpoint_equals_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("data.csv");
    write_planted_csv(&csv);
    let out = dir.path().join("run");
    run_ok(bin().args([
        "train",
        "--data",
        csv.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--dim",
        "16",
        "--epochs",
        "0",
        "--negatives",
        "20",
        "--seed",
        "9",
    ]));
    let from_cli = std::fs::read(out.join("checkpoint.hgrc")).unwrap();

    // rebuild the same initial model through the library
    let mut rc = RunConfig::default();
    rc.model.d = 16;
    let (filtered, _) = filter_min_interactions(&planted_dataset(0), rc.min_interactions).unwrap();
    let model = Model::init(rc.model, filtered.n_users(), filtered.n_items(), 9);
    assert_eq!(from_cli, checkpoint::to_bytes(&model));
}

#[test]
fn gradcheck_command_passes() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("data.csv");
    write_planted_csv(&csv);
    let stdout = run_ok(bin().args([
        "gradcheck",
        "--data",
        csv.to_str().unwrap(),
        "--dim",
        "8",
        "--layers",
        "2,1",
        "--negatives",
        "4",
        "--seed",
        "2",
    ]));
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert!(v["pass_rate"].as_f64().unwrap() >= 0.99);
}

#[test]
fn cost_command_prices_a_log() {
    let dir = tempfile::tempdir().unwrap();
    let log_path = dir.path().join("cost_log.jsonl");
    let records: Vec<moa::CostRecord> = (0..10)
        .map(|i| moa::CostRecord {
            endpoint: "mock".into(),
            layer: 0,
            agent: i % 2,
            tokens_in: 100,
            tokens_out: 100,
            latency_ms: 1.0,
        })
        .collect();
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).unwrap());
        text.push('\n');
    }
    std::fs::write(&log_path, text).unwrap();
    let prices = dir.path().join("prices.toml");
    std::fs::write(
        &prices,
        "[[endpoint]]\nendpoint = \"mock\"\nprice_in_per_1m = 2.0\nprice_out_per_1m = 1.0\nparams = 1e6\n",
    )
    .unwrap();

    let out = dir.path().join("cost");
    let stdout = run_ok(bin().args([
        "cost",
        "--data",
        log_path.to_str().unwrap(),
        "--prices",
        prices.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    // 1000 in + 1000 out tokens -> 0.002 + 0.001
    assert!(stdout.contains("mock"), "stdout: {stdout}");
    assert!(out.join("cost_report.jsonl").is_file());
    let text = std::fs::read_to_string(out.join("cost_report.jsonl")).unwrap();
    let total = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|v| v["endpoint"] == "TOTAL")
        .expect("TOTAL row present");
    assert!((total["cost"].as_f64().unwrap() - 0.003).abs() < 1e-12);
}

#[test]
fn errors_are_reported_on_stderr() {
    let stderr = run_err(bin().args(["train", "--out", "/tmp/hglmrec-missing-data"]));
    assert!(stderr.contains("error:"), "stderr: {stderr}");
    assert!(stderr.contains("--data"), "stderr: {stderr}");

    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("data.csv");
    write_planted_csv(&csv);
    let stderr = run_err(bin().args([
        "ablate",
        "--data",
        csv.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
        "--variants",
        "bogus",
    ]));
    assert!(stderr.contains("bogus"), "stderr: {stderr}");
}
