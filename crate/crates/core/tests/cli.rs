use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn remede(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_remede"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    let cfg = serde_json::json!({
        "data": { "n_sequences": 60 },
        "train": { "depth": 3, "n_m": 2, "max_epochs": 2, "batch_size": 8 },
        "search": { "n_trials": 2, "max_epochs": 1, "max_train": 20 },
        "trials": 1,
        "max_trials": 1
    });
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn run_ok(args: &[&str]) -> Vec<PathBuf> {
    let out = remede(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(PathBuf::from)
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run_ok(&["generate", "--config", s(&cfg), "--task", "poc3", "--seed", "7", "--out", s(out)]);
    }
    let da = fs::read(a.join("dataset.jsonl")).unwrap();
    let db = fs::read(b.join("dataset.jsonl")).unwrap();
    assert_eq!(da, db);
    assert_eq!(String::from_utf8(da).unwrap().lines().count(), 60);

    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "generate");
    assert_eq!(run["seed"], 7);
    let art = &run["artifacts"][0];
    assert_eq!(art["file"], "dataset.jsonl");
    assert_eq!(art["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn train_then_evaluate_and_export() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let train_dir = dir.path().join("train");
    let paths = run_ok(&["train", "--config", s(&cfg), "--task", "poc1", "--out", s(&train_dir)]);
    assert!(paths.iter().any(|p| p.ends_with("checkpoint.json")));
    let history = fs::read_to_string(train_dir.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_accuracy"));

    let ck = train_dir.join("checkpoint.json");
    let eval_dir = dir.path().join("eval");
    run_ok(&["evaluate", "--config", s(&cfg), "--task", "poc1", "--checkpoint", s(&ck), "--out", s(&eval_dir)]);
    let table = fs::read_to_string(eval_dir.join("report.txt")).unwrap();
    for row in ["ReMeDe", "naive", "random", "tree size"] {
        assert!(table.contains(row), "missing {row} in\n{table}");
    }

    for (format, file) in [("dot", "tree.dot"), ("json", "tree.json")] {
        let out_dir = dir.path().join(format);
        run_ok(&[
            "export", "--config", s(&cfg), "--task", "poc1", "--checkpoint", s(&ck), "--format", format, "--out",
            s(&out_dir),
        ]);
        let text = fs::read_to_string(out_dir.join(file)).unwrap();
        if format == "dot" {
            assert!(text.trim_start().starts_with("digraph"));
            assert!(text.trim_end().ends_with('}'));
        } else {
            serde_json::from_str::<serde_json::Value>(&text).unwrap();
        }
    }
}

#[test]
fn untrained_checkpoint_reports_all_rows() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let train_dir = dir.path().join("train");
    let cfg0 = dir.path().join("zero.json");
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    v["train"]["max_epochs"] = 0.into();
    fs::write(&cfg0, v.to_string()).unwrap();
    run_ok(&["train", "--config", s(&cfg0), "--task", "poc2", "--out", s(&train_dir)]);
    let eval_dir = dir.path().join("eval");
    run_ok(&[
        "evaluate", "--config", s(&cfg), "--task", "poc2", "--checkpoint",
        s(&train_dir.join("checkpoint.json")), "--out", s(&eval_dir),
    ]);
    let csv = fs::read_to_string(eval_dir.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    let table = fs::read_to_string(eval_dir.join("report.txt")).unwrap();
    assert_eq!(table.lines().filter(|l| l.contains('±')).count(), 3);
}

#[test]
fn failure_leaves_no_outputs() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("out");
    let out = remede(&["evaluate", "--checkpoint", s(&dir.path().join("missing.json")), "--out", s(&out_dir)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert!(!out_dir.exists() || fs::read_dir(&out_dir).unwrap().next().is_none());

    let bad = remede(&["train", "--lr", "-1", "--out", s(&out_dir)]);
    assert!(!bad.status.success());
    assert!(!out_dir.join("checkpoint.json").exists());
}

#[test]
fn experiment_writes_tables() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("exp");
    run_ok(&["experiment", "--config", s(&cfg), "--task", "poc1", "--out", s(&out_dir)]);
    for f in ["search.csv", "trials.csv", "tables.txt", "report.json", "run.json"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let search = fs::read_to_string(out_dir.join("search.csv")).unwrap();
    assert_eq!(search.lines().count(), 3);
}
