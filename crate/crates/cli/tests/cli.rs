use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn debcat(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_debcat"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("spawn debcat")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Small simulated corpus plus a fast config.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(&debcat(
        dir.path(),
        &["simulate", "--out", "data.csv", "--examinees", "80", "--questions", "90", "--seed", "3"],
    ));
    std::fs::write(
        dir.path().join("cfg.json"),
        r#"{"data": "data.csv", "out": "runs", "pretrain": {"epochs": 3},
            "train": {"epochs": 1, "batch_size": 16, "policy_hidden": 16}}"#,
    )
    .unwrap();
    dir
}

fn only_dir(root: &Path, prefix: &str) -> PathBuf {
    let mut found: Vec<PathBuf> = std::fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with(prefix))
        .collect();
    assert_eq!(found.len(), 1, "{prefix} in {}", root.display());
    found.pop().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn missing_data_file_exits_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = debcat(dir.path(), &["pretrain", "--data", "absent.csv", "--out", "runs"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.csv"));
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn config_errors_exit_2() {
    let dir = workspace();
    let p = dir.path();
    let out = debcat(p, &["train", "--config", "cfg.json", "--strategy", "Nope"]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(p.join("bad.json"), r#"{"data": "data.csv", "train": {"omgea": 1}}"#).unwrap();
    assert_eq!(debcat(p, &["pretrain", "--config", "bad.json"]).status.code(), Some(2));
    assert_eq!(debcat(p, &["train", "--config", "cfg.json", "--omega", "-1"]).status.code(), Some(2));
    // the checkpoint each stage needs is missing
    assert_eq!(debcat(p, &["train", "--config", "cfg.json"]).status.code(), Some(2));
    assert_eq!(debcat(p, &["eval", "--config", "cfg.json"]).status.code(), Some(2));
    assert_eq!(debcat(p, &["analyze", "runs"]).status.code(), Some(2));
    assert_eq!(debcat(p, &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn pipeline_is_deterministic_and_exports_ratios() {
    let dir = workspace();
    let p = dir.path();
    let cfg = ["--config", "cfg.json", "--strategy", "MixupB"];

    ok(&debcat(p, &[&["pretrain"][..], &cfg].concat()));
    let cdm = only_dir(&p.join("runs"), "cdm-");
    let first = std::fs::read(cdm.join("bundle.json")).unwrap();
    ok(&debcat(p, &[&["pretrain"][..], &cfg].concat()));
    assert_eq!(first, std::fs::read(cdm.join("bundle.json")).unwrap());
    assert!(cdm.join("index_map.json").is_file());

    ok(&debcat(p, &[&["train"][..], &cfg].concat()));
    let run = only_dir(&p.join("runs"), "run-MixupB-");
    for f in ["policy.json", "last_policy.json", "train_log.jsonl", "summary.json", "config.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let log = std::fs::read(run.join("train_log.jsonl")).unwrap();

    ok(&debcat(p, &[&["eval", "--ood"][..], &cfg].concat()));
    let report_path = run.join("eval-ood-t10").join("report.json");
    let report = std::fs::read(&report_path).unwrap();

    ok(&debcat(p, &[&["train"][..], &cfg].concat()));
    ok(&debcat(p, &[&["eval", "--ood"][..], &cfg].concat()));
    assert_eq!(log, std::fs::read(run.join("train_log.jsonl")).unwrap());
    assert_eq!(report, std::fs::read(&report_path).unwrap());

    let r = json(&report_path);
    assert_eq!(r["t"], 10);
    assert_eq!(r["ood"], true);

    ok(&debcat(p, &["analyze", run.to_str().unwrap()]));
    let n_examinees = r["n_examinees"].as_u64().unwrap() as usize;
    for f in ["selected_ratios.csv", "meta_ratios.csv"] {
        let text = std::fs::read_to_string(run.join("analysis/eval-ood-t10").join(f)).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("examinee_id,attribute,ratio"));
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), n_examinees, "{f}");
        for row in rows {
            let attr = row.split(',').nth(1).unwrap();
            assert!(["A", "B", "C"].contains(&attr), "{row}");
        }
    }
    let meta = std::fs::read_to_string(run.join("analysis/eval-ood-t10/meta_ratios.csv")).unwrap();
    assert!(meta.lines().skip(1).all(|l| l.ends_with(",0.500000")));
}

#[test]
fn eval_lengths_give_separate_reports() {
    let dir = workspace();
    let p = dir.path();
    ok(&debcat(p, &["pretrain", "--config", "cfg.json"]));
    for t in ["5", "10"] {
        ok(&debcat(p, &["train", "--config", "cfg.json", "--t", t]));
        ok(&debcat(p, &["eval", "--config", "cfg.json", "--t", t]));
    }
    let runs: Vec<PathBuf> = std::fs::read_dir(p.join("runs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|d| d.join("policy.json").is_file())
        .collect();
    assert_eq!(runs.len(), 2);
    let mut labels: Vec<u64> = runs
        .iter()
        .flat_map(|r| ["eval-iid-t5", "eval-iid-t10"].map(|e| r.join(e).join("report.json")))
        .filter(|f| f.is_file())
        .map(|f| json(&f)["t"].as_u64().unwrap())
        .collect();
    labels.sort_unstable();
    assert_eq!(labels, [5, 10]);
}

#[test]
fn erm_matches_mixup_without_synthetic_weight() {
    let dir = workspace();
    let p = dir.path();
    ok(&debcat(p, &["pretrain", "--config", "cfg.json"]));
    ok(&debcat(p, &["train", "--config", "cfg.json", "--strategy", "ERM"]));
    ok(&debcat(p, &["train", "--config", "cfg.json", "--strategy", "MixupB", "--omega", "0"]));
    let erm = json(&only_dir(&p.join("runs"), "run-ERM-").join("summary.json"));
    let mix = json(&only_dir(&p.join("runs"), "run-MixupB-").join("summary.json"));
    assert_eq!(erm["trajectory_hash"], mix["trajectory_hash"]);
}

#[test]
fn sweep_creates_one_run_per_omega() {
    let dir = workspace();
    let p = dir.path();
    let out = debcat(p, &["sweep", "--config", "cfg.json", "--strategy", "MixupB"]);
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("omega ")).count(), 5);
    let runs = std::fs::read_dir(p.join("runs"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("run-MixupB-"))
        .count();
    assert_eq!(runs, 5);
}
