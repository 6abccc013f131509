use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use debcat_core::cdm::{self, CdmBundle};
use debcat_core::dataset::{corpus_csv, filter_min_interactions, load_corpus, split_examinees, Corpus, ExamineeSplit};
use debcat_core::eval::{
    mean_ratio_by_attribute, ratios_csv, selected_ratio_distribution, write_report, EvalReport, RATIO_BINS,
};
use debcat_core::io::{write_atomic, write_json_atomic};
use debcat_core::selector::SelectionPolicy;
use debcat_core::sim::{simulate as run_simulation, SimConfig};
use debcat_core::trainer::{
    evaluate_policy, initial_policy, log_jsonl, train_with_hook, trajectory_hash, EpochRecord, TrainError,
};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{Overrides, RunConfig};
use crate::{Usage, UsageExt};

const BUNDLE: &str = "bundle.json";
const SPLIT: &str = "split.json";
const POLICY: &str = "policy.json";
const LAST_POLICY: &str = "last_policy.json";
const TRAIN_LOG: &str = "train_log.jsonl";
const REPORT: &str = "report.json";

#[derive(Debug, Serialize, Deserialize)]
struct TrainSummary {
    selected_epoch: usize,
    epochs_run: usize,
    initial_valid: Option<(f64, f64)>,
    trajectory_hash: String,
    cdm_hash: String,
}

fn usage_err(msg: String) -> anyhow::Error {
    Usage(anyhow!(msg)).into()
}

fn filtered_corpus(cfg: &RunConfig) -> anyhow::Result<Corpus> {
    let path = cfg.data_path().usage()?;
    let (corpus, _) = load_corpus(path)
        .with_context(|| format!("cannot load {}", path.display()))
        .usage()?;
    Ok(filter_min_interactions(&corpus, cfg.min_interactions))
}

/// The frozen model and the examinee split it was trained with.
fn load_cdm(cfg: &RunConfig) -> anyhow::Result<(PathBuf, CdmBundle, ExamineeSplit)> {
    let dir = cfg.cdm_dir().usage()?;
    let bundle_path = dir.join(BUNDLE);
    if !bundle_path.is_file() {
        return Err(usage_err(format!(
            "no pretrained model at {}; run `debcat pretrain` with the same config first",
            bundle_path.display()
        )));
    }
    let bundle = CdmBundle::load(&bundle_path)?;
    let split: ExamineeSplit = serde_json::from_slice(&std::fs::read(dir.join(SPLIT))?)?;
    Ok((dir, bundle, split))
}

pub fn pretrain(o: &Overrides) -> anyhow::Result<()> {
    let cfg = RunConfig::resolve(o).usage()?;
    let corpus = filtered_corpus(&cfg)?;
    let split = split_examinees(&corpus, cfg.split, cfg.seed).usage()?;
    if split.train.is_empty() {
        return Err(usage_err(format!(
            "no training examinees with at least {} interactions",
            cfg.min_interactions
        )));
    }
    let (_, index_map) = load_corpus(cfg.data_path()?)?;
    info!(
        "pretraining {:?} on {} examinees ({} valid, {} test held out)",
        cfg.cdm,
        split.train.len(),
        split.valid.len(),
        split.test.len()
    );
    let outcome = cdm::pretrain(&corpus.subset(&split.train), &cfg.pretrain)?;
    let dir = cfg.cdm_dir()?;
    std::fs::create_dir_all(&dir)?;
    let log: String = outcome
        .log
        .iter()
        .map(|r| serde_json::to_string(r).map(|l| l + "\n"))
        .collect::<Result<_, _>>()?;
    write_atomic(dir.join("pretrain_log.jsonl"), log.as_bytes())?;
    write_json_atomic(dir.join(SPLIT), &split)?;
    write_json_atomic(dir.join("index_map.json"), &index_map)?;
    write_json_atomic(dir.join("config.json"), &cfg)?;
    outcome.bundle.save(dir.join(BUNDLE))?;
    let best = outcome.best();
    println!(
        "pretrained {:?}: best epoch {}, valid acc {:.4}, hash {} -> {}",
        cfg.cdm,
        best.epoch,
        best.valid_acc,
        &outcome.bundle.param_hash()[..12],
        dir.display()
    );
    Ok(())
}

pub fn train(o: &Overrides) -> anyhow::Result<()> {
    let cfg = RunConfig::resolve(o).usage()?;
    let (_, bundle, split) = load_cdm(&cfg)?;
    let corpus = filtered_corpus(&cfg)?;
    let (train_set, valid_set) = (corpus.subset(&split.train), corpus.subset(&split.valid));
    let run = cfg.run_dir()?;
    std::fs::create_dir_all(&run)?;
    write_json_atomic(run.join("config.json"), &cfg)?;
    info!(
        "training {} policy (T={}, omega={}, alpha={}) -> {}",
        cfg.train.strategy,
        cfg.train.t,
        cfg.train.omega,
        cfg.train.mixup_alpha,
        run.display()
    );

    let mut log = Vec::new();
    let mut hook = |rec: &EpochRecord, policy: &SelectionPolicy| -> Result<(), TrainError> {
        log.push(rec.clone());
        write_atomic(run.join(TRAIN_LOG), log_jsonl(&log).as_bytes())?;
        policy.save(run.join(LAST_POLICY))?;
        Ok(())
    };
    let start = initial_policy(bundle.n_questions(), &cfg.train);
    let outcome = train_with_hook(&train_set, &valid_set, &bundle, &cfg.train, start, &mut hook)?;
    write_atomic(run.join(TRAIN_LOG), log_jsonl(&outcome.log).as_bytes())?;
    outcome.policy.save(run.join(POLICY))?;
    write_json_atomic(
        run.join("summary.json"),
        &TrainSummary {
            selected_epoch: outcome.selected_epoch,
            epochs_run: outcome.log.len(),
            initial_valid: outcome.initial_valid,
            trajectory_hash: trajectory_hash(&outcome.log),
            cdm_hash: bundle.param_hash(),
        },
    )?;
    println!(
        "trained {} for {} epochs, kept epoch {} -> {}",
        cfg.train.strategy,
        outcome.log.len(),
        outcome.selected_epoch,
        run.display()
    );
    Ok(())
}

fn eval_dir_name(ood: bool, t: usize) -> String {
    format!("eval-{}-t{t}", if ood { "ood" } else { "iid" })
}

pub fn eval(o: &Overrides) -> anyhow::Result<()> {
    let cfg = RunConfig::resolve(o).usage()?;
    let (_, bundle, split) = load_cdm(&cfg)?;
    let run = cfg.run_dir()?;
    let policy_path = run.join(POLICY);
    if !policy_path.is_file() {
        return Err(usage_err(format!(
            "no trained policy at {}; run `debcat train` with the same config first",
            policy_path.display()
        )));
    }
    let policy = SelectionPolicy::load(&policy_path)?;
    let corpus = filtered_corpus(&cfg)?;
    let test = corpus.subset(&split.test);
    let t = cfg.eval_t();
    let (report, _) = evaluate_policy(
        &test,
        &bundle,
        &policy,
        t,
        cfg.eval.ood,
        cfg.train.meta_frac,
        cfg.seed,
        cfg.train.episode(),
    )?;
    let dir = run.join(eval_dir_name(cfg.eval.ood, t));
    write_report(&dir, &report)?;
    println!(
        "{} ({}, {} examinees, {} excluded): {}",
        report.label(),
        if cfg.eval.ood { "OOD" } else { "IID" },
        report.n_examinees,
        report.n_excluded,
        report.summary()
    );
    Ok(())
}

fn eval_reports(run: &Path) -> anyhow::Result<Vec<(String, EvalReport)>> {
    if !run.is_dir() {
        return Err(usage_err(format!("{} is not a run directory", run.display())));
    }
    let mut names: Vec<String> = std::fs::read_dir(run)?
        .filter_map(Result::ok)
        .filter(|e| e.path().join(REPORT).is_file())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.starts_with("eval-"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(usage_err(format!(
            "no evaluation reports in {}; run `debcat eval` first",
            run.display()
        )));
    }
    names
        .into_iter()
        .map(|n| {
            let path = run.join(&n).join(REPORT);
            let report = serde_json::from_slice(&std::fs::read(&path)?)
                .with_context(|| format!("cannot parse {}", path.display()))
                .usage()?;
            Ok((n, report))
        })
        .collect()
}

fn histogram_csv(report: &EvalReport) -> String {
    let selected = selected_ratio_distribution(&report.selected_ratios);
    let meta = selected_ratio_distribution(&report.meta_ratios);
    let mut s = String::from("attribute,bin_lower,bin_upper,selected,meta\n");
    let attrs: std::collections::BTreeSet<_> = selected.keys().chain(meta.keys()).copied().collect();
    for a in attrs {
        for b in 0..RATIO_BINS {
            let width = 1.0 / RATIO_BINS as f64;
            let count = |h: &std::collections::BTreeMap<_, [usize; RATIO_BINS]>| h.get(&a).map_or(0, |c| c[b]);
            writeln!(
                s,
                "{a},{:.2},{:.2},{},{}",
                b as f64 * width,
                (b + 1) as f64 * width,
                count(&selected),
                count(&meta)
            )
            .expect("write to string");
        }
    }
    s
}

pub fn analyze(run_dirs: &[PathBuf]) -> anyhow::Result<()> {
    let all: Vec<(&PathBuf, Vec<(String, EvalReport)>)> = run_dirs
        .iter()
        .map(|r| eval_reports(r).map(|reports| (r, reports)))
        .collect::<anyhow::Result<_>>()?;
    for (run, reports) in all {
        for (name, report) in reports {
            let dir = run.join("analysis").join(&name);
            write_atomic(dir.join("selected_ratios.csv"), ratios_csv(&report.selected_ratios).as_bytes())?;
            write_atomic(dir.join("meta_ratios.csv"), ratios_csv(&report.meta_ratios).as_bytes())?;
            write_atomic(dir.join("histogram.csv"), histogram_csv(&report).as_bytes())?;
            let sel = mean_ratio_by_attribute(&report.selected_ratios);
            let meta = mean_ratio_by_attribute(&report.meta_ratios);
            let means: Vec<String> = sel
                .iter()
                .map(|(a, r)| format!("{a} {r:.3} (meta {:.3})", meta.get(a).copied().unwrap_or(f64::NAN)))
                .collect();
            println!("{}/{name}: selected ratio {}", run.display(), means.join(", "));
        }
    }
    Ok(())
}

fn child(exe: &Path, sub: &str, o: &Overrides) -> anyhow::Result<()> {
    let status = std::process::Command::new(exe)
        .arg(sub)
        .args(o.to_args())
        .status()
        .with_context(|| format!("cannot start `{sub}`"))?;
    if status.success() {
        Ok(())
    } else {
        Err(anyhow!("`{sub}` with omega {:?} failed ({status})", o.omega))
    }
}

pub fn sweep(o: &Overrides, omegas: &[f64]) -> anyhow::Result<()> {
    let base = RunConfig::resolve(o).usage()?;
    base.data_path().usage()?;
    let configs: Vec<(f64, Overrides, RunConfig)> = omegas
        .iter()
        .map(|&w| {
            let ov = Overrides {
                omega: Some(w),
                ..o.clone()
            };
            RunConfig::resolve(&ov).usage().map(|c| (w, ov, c))
        })
        .collect::<anyhow::Result<_>>()?;
    let exe = std::env::current_exe()?;
    if !base.cdm_dir()?.join(BUNDLE).is_file() {
        child(&exe, "pretrain", o)?;
    }
    let mut rows = Vec::new();
    for (w, ov, cfg) in &configs {
        child(&exe, "train", ov)?;
        child(&exe, "eval", ov)?;
        let path = cfg.run_dir()?.join(eval_dir_name(cfg.eval.ood, cfg.eval_t())).join(REPORT);
        let report: EvalReport = serde_json::from_slice(&std::fs::read(&path)?)?;
        rows.push(format!("omega {w}: {}", report.summary()));
    }
    for r in rows {
        println!("{r}");
    }
    Ok(())
}

pub fn simulate(out: &Path, seed: u64, examinees: u32, questions: u32) -> anyhow::Result<()> {
    let cfg = SimConfig {
        n_examinees: examinees,
        n_questions: questions,
        seed,
        ..SimConfig::default()
    };
    let (corpus, _) = run_simulation(&cfg).usage()?;
    write_atomic(out, corpus_csv(&corpus).as_bytes())?;
    let c = corpus.counts();
    println!(
        "wrote {} interactions from {} examinees to {}",
        c.interactions,
        c.examinees,
        out.display()
    );
    Ok(())
}
