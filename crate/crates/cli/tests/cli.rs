use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[dataset]
kind = "synthetic"
[dataset.spec]
num_classes = 3
samples_per_class = 20
input_dim = 6
nuisance_dim = 2
separation = 2.0

[train]
epochs = 2
ae_pretrain_epochs = 2
batch_size = 16
warmup_epochs = 1
warmup_lr = 0.001
ae_warmup_lr = 0.001

[train.architecture]
input_dim = 6
encoder_hidden = [10]
representation_dim = 8
embedding_dim = 5

[eval.probe]
epochs = 3
"#;

fn guess(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_guess")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn run_ok(args: &[&str]) -> String {
    let out = guess(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn train_then_eval_produces_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    let (cfg, out_s) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    run_ok(&["pretrain-ae", "--config", cfg, "--out", out_s]);
    run_ok(&["train", "--config", cfg, "--out", out_s, "--dump-correlations"]);
    let table = run_ok(&["eval", "--config", cfg, "--out", out_s]);
    assert!(table.contains("ensemble"));

    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let top1 = report["top1"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&top1));
    let hash = report["provenance"]["config_hash"].as_str().unwrap().to_string();
    assert_eq!(report["provenance"]["epoch"], 2);

    // Every metrics record carries the same config hash as the report.
    let metrics = std::fs::read_to_string(out.join("metrics.ndjson")).unwrap();
    let phases: Vec<String> = metrics
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            assert_eq!(v["config_hash"], hash.as_str());
            v["phase"].as_str().unwrap().to_string()
        })
        .collect();
    for phase in ["ae_pretrain", "train", "probe", "eval"] {
        assert!(phases.iter().any(|p| p == phase), "missing {phase}");
    }
    assert!(out.join("correlations/block0_epoch0001.csv").exists());
}

#[test]
fn identical_invocations_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let mut artifacts = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let args = ["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--blocks", "2"];
        run_ok(&[&["train"], &args[..]].concat());
        run_ok(&[&["eval"], &args[..]].concat());
        artifacts.push((
            std::fs::read(out.join("metrics.ndjson")).unwrap(),
            std::fs::read(out.join("report.json")).unwrap(),
        ));
    }
    assert_eq!(artifacts[0], artifacts[1]);
}

#[test]
fn sweep_lambda_writes_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("sweep");
    run_ok(&["sweep-lambda", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let mut reader = csv::Reader::from_path(out.join("summary.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 5);
    let seeds: std::collections::BTreeSet<String> = rows.iter().map(|r| r[3].to_string()).collect();
    assert_eq!(seeds.len(), 5, "grid points must not share seeds");
    assert!(out.join("summary.txt").exists());
    assert!(out.join("regularized-gaussian/metrics.ndjson").exists());
}

#[test]
fn ablate_runs_the_baseline_and_requested_variants() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("ablate");
    let table = run_ok(&["ablate", "drop-ae", "shared-views", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    for label in ["baseline", "drop-ae", "shared-views"] {
        assert!(table.contains(label));
    }
    assert!(!table.contains("no-pretrain"));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(guess(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(guess(&[]).status.code(), Some(1));
    assert_eq!(guess(&["train", "--blocks", "x"]).status.code(), Some(1));
    let bad = write_config(dir.path(), "[train]\nepochz = 3\n");
    assert_eq!(guess(&["train", "--config", bad.to_str().unwrap()]).status.code(), Some(1));
    let missing = dir.path().join("nope.toml");
    assert_eq!(guess(&["train", "--config", missing.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(guess(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    let (cfg_s, out_s) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    // No checkpoint yet.
    assert_eq!(guess(&["eval", "--config", cfg_s, "--out", out_s]).status.code(), Some(2));
    run_ok(&["train", "--config", cfg_s, "--out", out_s]);
    // The checkpoint belongs to seed 0; a different seed is a different run.
    let clash = guess(&["train", "--config", cfg_s, "--out", out_s, "--seed", "7"]);
    assert_eq!(clash.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&clash.stderr).contains("hash"));
}
