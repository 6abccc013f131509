//! Bi-level training of the selection policy.
//!
//! An episode administers `t` questions from the examinee's support set. After
//! every answer the proficiency is refit with `k_steps` gradient steps on all
//! answers so far, warm-started from the previous fit. The meta set then
//! scores the final proficiency; the configured strategy turns those scores
//! into a loss per episode, and the policy moves along the score-function
//! gradient of the negative loss with the batch mean as baseline.
//!
//! The diagnosis model stays frozen throughout.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cdm::{bce_loss, inner_optimize, predict, CdmBundle, CdmError, ItemParams, ProficiencyState};
use crate::dataset::{
    attribute_of, build_ood_meta, correct_ratio, group_key, resplit_support_meta, Attribute, Corpus, DataError,
    EpisodeSplit, GroupKey, Interaction, OodSplit,
};
use crate::debias::{
    batch_losses, reweight_weights, DebiasError, EpisodeView, StrategyContext, StrategyKind, StrategyParams,
    SynthCoords,
};
use crate::eval::{classify, report, EvalReport, Prediction, RatioRecord};
use crate::io::sha256_hex;
use crate::math::mean;
use crate::rng::{stream, Stream};
use crate::selector::{
    accumulate_log_prob_grad, select_question, PolicyGrad, SelectMode, SelectionMask, SelectionPolicy,
    SelectorError, StateVector, POLICY_HIDDEN,
};

/// Resplit coordinate used for validation and IID test episodes, so their
/// meta sets stay fixed across epochs.
pub const EVAL_EPOCH: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite policy gradient in epoch {epoch} from examinee {examinee}")]
    NonFinite { epoch: usize, examinee: u32 },
    #[error(transparent)]
    Cdm(#[from] CdmError),
    #[error(transparent)]
    Selector(#[from] SelectorError),
    #[error(transparent)]
    Debias(#[from] DebiasError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which policy `train` returns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Checkpoint {
    /// Best validation average accuracy, the untrained policy included.
    #[default]
    Best,
    /// Policy after the last epoch run.
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Questions administered per episode.
    pub t: usize,
    pub k_steps: usize,
    pub lr_inner: f64,
    pub lr_outer: f64,
    pub strategy: StrategyKind,
    pub omega: f64,
    pub mixup_alpha: f64,
    pub eta: f64,
    pub lambda_irm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub meta_frac: f64,
    pub policy_hidden: usize,
    /// Update after every step instead of once per episode.
    pub per_step_updates: bool,
    pub checkpoint: Checkpoint,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t: 10,
            k_steps: 5,
            lr_inner: 0.1,
            lr_outer: 0.002,
            strategy: StrategyKind::MixupB,
            omega: 0.6,
            mixup_alpha: 0.6,
            eta: 0.01,
            lambda_irm: 1.0,
            epochs: 100,
            batch_size: 64,
            patience: 5,
            meta_frac: 0.2,
            policy_hidden: POLICY_HIDDEN,
            per_step_updates: false,
            checkpoint: Checkpoint::Best,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.t == 0 {
            return fail("t must be at least 1");
        }
        if self.k_steps == 0 {
            return fail("k_steps must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.policy_hidden == 0 {
            return fail("policy_hidden must be at least 1");
        }
        if !(self.lr_inner.is_finite() && self.lr_inner > 0.0) {
            return fail("lr_inner must be positive");
        }
        if !(self.lr_outer.is_finite() && self.lr_outer >= 0.0) {
            return fail("lr_outer must be nonnegative");
        }
        if !(self.meta_frac > 0.0 && self.meta_frac < 1.0) {
            return fail("meta_frac must lie in (0, 1)");
        }
        self.strategy_params().validate()?;
        Ok(())
    }

    pub fn strategy_params(&self) -> StrategyParams {
        StrategyParams {
            kind: self.strategy,
            omega: self.omega,
            mixup_alpha: self.mixup_alpha,
            eta: self.eta,
            lambda_irm: self.lambda_irm,
        }
    }

    pub fn episode(&self) -> EpisodeParams {
        EpisodeParams {
            t: self.t,
            k_steps: self.k_steps,
            lr_inner: self.lr_inner,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeParams {
    pub t: usize,
    pub k_steps: usize,
    pub lr_inner: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedStep {
    pub question: u32,
    pub label: u8,
    pub log_prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace {
    pub examinee: u32,
    /// Candidate questions (the support set) in log order.
    pub pool: Vec<u32>,
    pub selected: Vec<SelectedStep>,
    /// Proficiency after each step's inner fit.
    pub theta_star: Vec<ProficiencyState>,
    /// Mean meta loss after each step.
    pub meta_loss: Vec<f64>,
}

impl EpisodeTrace {
    pub fn final_state(&self) -> &ProficiencyState {
        self.theta_star.last().expect("episodes have at least one step")
    }

    /// Correct share of the administered questions.
    pub fn selected_ratio(&self) -> f64 {
        let correct = self.selected.iter().filter(|s| s.label == 1).count();
        correct as f64 / self.selected.len() as f64
    }
}

/// Batch-mean baseline for the score-function estimator.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RewardBaseline {
    pub value: f64,
}

impl RewardBaseline {
    /// Sets the baseline to the mean of `rewards` and returns the advantages.
    /// The mean is taken as an offset from the minimum so identical rewards
    /// give exactly zero advantages.
    pub fn advantages(&mut self, rewards: &[f64]) -> Vec<f64> {
        if rewards.is_empty() {
            return Vec::new();
        }
        let lo = rewards.iter().copied().fold(f64::INFINITY, f64::min);
        let shifted: Vec<f64> = rewards.iter().map(|r| r - lo).collect();
        self.value = lo + mean(&shifted);
        rewards.iter().map(|r| r - self.value).collect()
    }
}

/// Mean loss over `meta` and the individual losses.
pub fn meta_loss(
    bundle: &CdmBundle,
    theta_star: &ProficiencyState,
    meta: &[Interaction],
) -> Result<(f64, Vec<f64>), CdmError> {
    let losses = meta
        .iter()
        .map(|it| predict(bundle, theta_star, bundle.item(it.question)).map(|p| bce_loss(it.y(), p)))
        .collect::<Result<Vec<_>, _>>()?;
    let l = if losses.is_empty() {
        0.0
    } else {
        losses.iter().sum::<f64>() / losses.len() as f64
    };
    Ok((l, losses))
}

/// Runs one episode. Returns `None` (with a warning) when the support set
/// holds fewer than `t` questions.
pub fn run_episode(
    bundle: &CdmBundle,
    policy: &SelectionPolicy,
    split: &EpisodeSplit,
    params: EpisodeParams,
    mode: SelectMode,
    seed: u64,
    epoch: u64,
) -> Result<Option<EpisodeTrace>, TrainError> {
    if split.support.len() < params.t {
        log::warn!(
            "examinee {} skipped: support holds {} questions, episode needs {}",
            split.examinee,
            split.support.len(),
            params.t
        );
        return Ok(None);
    }
    let n_q = bundle.n_questions();
    let pool: Vec<u32> = split.support.iter().map(|it| it.question).collect();
    let labels: BTreeMap<u32, u8> = split.support.iter().map(|it| (it.question, it.label)).collect();
    let mut mask = SelectionMask::from_pool(n_q, &pool, &[]);
    let mut state = StateVector::zeros(n_q);
    let mut theta = ProficiencyState::neutral(bundle.dim);
    let mut responses: Vec<(&ItemParams, f64)> = Vec::with_capacity(params.t);
    let mut trace = EpisodeTrace {
        examinee: split.examinee,
        pool,
        selected: Vec::with_capacity(params.t),
        theta_star: Vec::with_capacity(params.t),
        meta_loss: Vec::with_capacity(params.t),
    };
    for step in 0..params.t {
        let mut rng = stream(
            Stream::Selection,
            &[seed, epoch, u64::from(split.examinee), step as u64],
        );
        let q = select_question(policy, &state, &mask, mode, &mut rng)?;
        let label = labels[&q];
        let log_prob = crate::selector::log_prob(policy, &state, &mask, q)?;
        state.record(q, label)?;
        mask.disallow(q);
        responses.push((bundle.item(q), f64::from(label)));
        theta = inner_optimize(bundle, &theta, &responses, params.k_steps, params.lr_inner)?.state;
        trace.meta_loss.push(meta_loss(bundle, &theta, &split.meta)?.0);
        trace.theta_star.push(theta.clone());
        trace.selected.push(SelectedStep {
            question: q,
            label,
            log_prob,
        });
    }
    Ok(Some(trace))
}

/// Gradient of `sum_{s < upto} log pi(q_s | s_s)` rebuilt from the trace,
/// scaled by `scale` and added into `acc`.
pub fn accumulate_trace_grad(
    policy: &SelectionPolicy,
    trace: &EpisodeTrace,
    upto: usize,
    scale: f64,
    acc: &mut PolicyGrad,
) -> Result<(), SelectorError> {
    let n_q = policy.n_questions;
    let mut mask = SelectionMask::from_pool(n_q, &trace.pool, &[]);
    let mut state = StateVector::zeros(n_q);
    for s in &trace.selected[..upto] {
        accumulate_log_prob_grad(policy, &state, &mask, s.question, scale, acc)?;
        state.record(s.question, s.label)?;
        mask.disallow(s.question);
    }
    Ok(())
}

/// One REINFORCE step: reward `-loss`, batch-mean baseline, gradient ascent
/// with step `lr`. `upto` is the number of leading steps whose log-probs
/// enter the estimator. Returns the applied gradient.
pub fn outer_update(
    policy: &mut SelectionPolicy,
    traces: &[&EpisodeTrace],
    losses: &[f64],
    upto: usize,
    baseline: &mut RewardBaseline,
    lr: f64,
    epoch: usize,
) -> Result<PolicyGrad, TrainError> {
    assert_eq!(traces.len(), losses.len());
    if traces.is_empty() {
        return Ok(PolicyGrad::zeros(policy.hidden));
    }
    let rewards: Vec<f64> = losses.iter().map(|l| -l).collect();
    let adv = baseline.advantages(&rewards);
    let n = traces.len() as f64;
    let frozen: &SelectionPolicy = policy;
    let parts = traces
        .par_iter()
        .zip(adv.par_iter())
        .map(|(tr, &a)| {
            let mut g = PolicyGrad::zeros(frozen.hidden);
            if a != 0.0 {
                accumulate_trace_grad(frozen, tr, upto, a / n, &mut g)?;
            }
            Ok((tr.examinee, g))
        })
        .collect::<Result<Vec<_>, SelectorError>>()?;
    let mut order: Vec<usize> = (0..parts.len()).collect();
    order.sort_by_key(|&i| parts[i].0);
    let mut total = PolicyGrad::zeros(policy.hidden);
    for i in order {
        let (examinee, g) = &parts[i];
        if !g.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                examinee: *examinee,
            });
        }
        total.add_scaled(g, 1.0);
    }
    policy.apply(&total, lr)?;
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub strategy: StrategyKind,
    pub train_loss: f64,
    pub valid_worst: f64,
    pub valid_avg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub policy: SelectionPolicy,
    pub log: Vec<EpochRecord>,
    /// Epoch of the returned policy; 0 is the untrained policy.
    pub selected_epoch: usize,
    /// Validation metrics of the untrained policy, when validation ran.
    pub initial_valid: Option<(f64, f64)>,
}

/// JSON-lines rendering of the training log.
pub fn log_jsonl(log: &[EpochRecord]) -> String {
    log.iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect()
}

/// Hash of the training trajectory: every numeric field of every record.
/// The strategy label is left out so runs that differ only in name compare
/// equal.
pub fn trajectory_hash(log: &[EpochRecord]) -> String {
    let rows: Vec<(usize, u64, u64, u64)> = log
        .iter()
        .map(|r| {
            (
                r.epoch,
                r.train_loss.to_bits(),
                r.valid_worst.to_bits(),
                r.valid_avg.to_bits(),
            )
        })
        .collect();
    sha256_hex(&serde_json::to_vec(&rows).expect("rows serialize"))
}

struct Prepared {
    split: EpisodeSplit,
    attribute: Attribute,
}

fn attributes(corpus: &Corpus) -> Result<BTreeMap<u32, Attribute>, DataError> {
    corpus
        .logs()
        .map(|(id, log)| attribute_of(log).map(|a| (id, a)))
        .collect()
}

/// Trains a fresh policy on `train`, early-stopping on `valid` Avg.@T.
pub fn train(
    train: &Corpus,
    valid: &Corpus,
    bundle: &CdmBundle,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let policy = initial_policy(bundle.n_questions(), config);
    train_from(train, valid, bundle, config, policy)
}

/// The seeded untrained policy that [`train`] starts from.
pub fn initial_policy(n_questions: usize, config: &TrainConfig) -> SelectionPolicy {
    SelectionPolicy::new(
        n_questions,
        config.policy_hidden,
        &mut stream(Stream::PolicyInit, &[config.seed]),
    )
}

/// As [`train`], starting from `policy`.
pub fn train_from(
    train: &Corpus,
    valid: &Corpus,
    bundle: &CdmBundle,
    config: &TrainConfig,
    policy: SelectionPolicy,
) -> Result<TrainOutcome, TrainError> {
    train_with_hook(train, valid, bundle, config, policy, &mut |_, _| Ok(()))
}

/// Callback run after every epoch with its record and the current policy.
pub type EpochHook<'a> = dyn FnMut(&EpochRecord, &SelectionPolicy) -> Result<(), TrainError> + 'a;

/// As [`train_from`], calling `hook` after every epoch.
pub fn train_with_hook(
    train: &Corpus,
    valid: &Corpus,
    bundle: &CdmBundle,
    config: &TrainConfig,
    mut policy: SelectionPolicy,
    hook: &mut EpochHook<'_>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if policy.n_questions != bundle.n_questions() {
        return Err(TrainError::Config(format!(
            "policy covers {} questions, model {}",
            policy.n_questions,
            bundle.n_questions()
        )));
    }
    let attrs = attributes(train)?;
    let ep = config.episode();
    let mut ctx = StrategyContext::new(config.strategy_params())?;
    let mut baseline = RewardBaseline::default();
    let has_valid = valid.examinee_ids().next().is_some();
    let validate = |p: &SelectionPolicy| -> Result<(f64, f64), TrainError> {
        let (r, _) = evaluate_policy(valid, bundle, p, config.t, false, config.meta_frac, config.seed, ep)?;
        Ok((r.worst, r.avg))
    };
    let initial_valid = if has_valid { Some(validate(&policy)?) } else { None };
    let mut best = (initial_valid.map_or(f64::NEG_INFINITY, |v| v.1), 0, policy.clone());
    let mut stale = 0;
    let mut log = Vec::new();

    for epoch in 1..=config.epochs {
        let e = epoch as u64;
        let mut prepared = Vec::new();
        for (id, l) in train.logs() {
            let split = resplit_support_meta(l, config.meta_frac, config.seed, e)?;
            if split.meta.is_empty() {
                continue;
            }
            prepared.push(Prepared {
                split,
                attribute: attrs[&id],
            });
        }
        if config.strategy == StrategyKind::Reweight {
            let mut counts = [0usize; GroupKey::COUNT];
            for p in &prepared {
                for it in &p.split.meta {
                    counts[group_key(p.attribute, it.label).index()] += 1;
                }
            }
            ctx.group_weights = reweight_weights(&counts);
        }
        prepared.shuffle(&mut stream(Stream::BatchOrder, &[config.seed, e]));

        let mut epoch_losses = Vec::new();
        for (b, batch) in prepared.chunks(config.batch_size).enumerate() {
            let frozen = &policy;
            let rolled = batch
                .par_iter()
                .map(|p| {
                    run_episode(bundle, frozen, &p.split, ep, SelectMode::Sample, config.seed, e)
                        .map(|tr| tr.map(|tr| (tr, p)))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let done: Vec<(EpisodeTrace, &Prepared)> = rolled.into_iter().flatten().collect();
            if done.is_empty() {
                continue;
            }
            let traces: Vec<&EpisodeTrace> = done.iter().map(|(tr, _)| tr).collect();
            let steps: Vec<usize> = if config.per_step_updates {
                (1..=config.t).collect()
            } else {
                vec![config.t]
            };
            for upto in steps {
                let views: Vec<EpisodeView<'_>> = done
                    .iter()
                    .map(|(tr, p)| EpisodeView {
                        examinee: tr.examinee,
                        attribute: p.attribute,
                        state: &tr.theta_star[upto - 1],
                        meta: &p.split.meta,
                    })
                    .collect();
                let coords = SynthCoords {
                    seed: config.seed,
                    epoch: e,
                    batch: b as u64,
                    step: upto as u64,
                };
                let losses = batch_losses(&mut ctx, bundle, &views, coords)?;
                outer_update(
                    &mut policy,
                    &traces,
                    &losses.finals,
                    upto,
                    &mut baseline,
                    config.lr_outer,
                    epoch,
                )?;
                if upto == config.t {
                    epoch_losses.extend_from_slice(&losses.finals);
                }
            }
        }

        let (valid_worst, valid_avg) = if has_valid {
            validate(&policy)?
        } else {
            (0.0, 0.0)
        };
        log.push(EpochRecord {
            epoch,
            strategy: config.strategy,
            train_loss: mean(&epoch_losses),
            valid_worst,
            valid_avg,
        });
        hook(log.last().expect("just pushed"), &policy)?;
        log::info!(
            "epoch {epoch}: train loss {:.4}, valid Worst {valid_worst:.4}, Avg {valid_avg:.4}",
            mean(&epoch_losses)
        );
        if has_valid {
            if valid_avg > best.0 {
                best = (valid_avg, epoch, policy.clone());
                stale = 0;
            } else {
                stale += 1;
                if config.patience > 0 && stale >= config.patience {
                    break;
                }
            }
        }
    }

    let last_epoch = log.len();
    let (policy, selected_epoch) = match (config.checkpoint, has_valid) {
        (Checkpoint::Best, true) => (best.2, best.1),
        _ => (policy, last_epoch),
    };
    Ok(TrainOutcome {
        policy,
        log,
        selected_epoch,
        initial_valid,
    })
}

/// Greedy episodes of length `t` for every examinee in `corpus`, scored on
/// their meta sets. The meta sets are fixed per examinee: a seeded resplit,
/// or a label-balanced draw under `ood`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy(
    corpus: &Corpus,
    bundle: &CdmBundle,
    policy: &SelectionPolicy,
    t: usize,
    ood: bool,
    meta_frac: f64,
    seed: u64,
    params: EpisodeParams,
) -> Result<(EvalReport, Vec<EpisodeTrace>), TrainError> {
    let params = EpisodeParams { t, ..params };
    let attrs = attributes(corpus)?;
    let logs: Vec<(u32, &[Interaction])> = corpus.logs().collect();
    type Scored = Option<(EpisodeTrace, Vec<Prediction>, RatioRecord, RatioRecord)>;
    let results = logs
        .par_iter()
        .map(|&(id, log)| -> Result<Scored, TrainError> {
            let split = if ood {
                match build_ood_meta(log, meta_frac, seed)? {
                    OodSplit::Balanced(s) => s,
                    OodSplit::Excluded { .. } => return Ok(None),
                }
            } else {
                resplit_support_meta(log, meta_frac, seed, EVAL_EPOCH)?
            };
            if split.meta.is_empty() {
                return Ok(None);
            }
            let Some(trace) = run_episode(bundle, policy, &split, params, SelectMode::Greedy, seed, EVAL_EPOCH)?
            else {
                return Ok(None);
            };
            let attribute = attrs[&id];
            let preds = split
                .meta
                .iter()
                .map(|it| {
                    let p = predict(bundle, trace.final_state(), bundle.item(it.question))?;
                    Ok(Prediction {
                        group: group_key(attribute, it.label),
                        predicted: classify(p),
                        label: it.label,
                    })
                })
                .collect::<Result<Vec<_>, CdmError>>()?;
            let selected = RatioRecord {
                examinee: id,
                attribute,
                ratio: trace.selected_ratio(),
            };
            let meta = RatioRecord {
                examinee: id,
                attribute,
                ratio: correct_ratio(&split.meta),
            };
            Ok(Some((trace, preds, selected, meta)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n_excluded = results.iter().filter(|r| r.is_none()).count();
    let mut traces = Vec::new();
    let mut preds = Vec::new();
    let mut selected = Vec::new();
    let mut meta = Vec::new();
    for (tr, p, s, m) in results.into_iter().flatten() {
        traces.push(tr);
        preds.extend(p);
        selected.push(s);
        meta.push(m);
    }
    let mut rep = report(&preds, t, ood);
    rep.n_examinees = traces.len();
    rep.n_excluded = n_excluded;
    rep.selected_ratios = selected;
    rep.meta_ratios = meta;
    Ok((rep, traces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::QuestionMeta;

    fn toy_corpus(n_examinees: u32, n_q: u32) -> Corpus {
        let questions = (0..n_q).map(|id| QuestionMeta { id, concepts: vec![0] }).collect();
        let logs = (0..n_examinees)
            .map(|e| {
                let log = (0..n_q)
                    .map(|q| Interaction::new(e, q, u8::from((e * 7 + q * 3) % 5 < 2 + e % 3)))
                    .collect();
                (e, log)
            })
            .collect();
        Corpus::from_parts(logs, questions, 1).unwrap()
    }

    fn bundle(n_q: u32) -> CdmBundle {
        CdmBundle::irt((0..n_q).map(|q| f64::from(q) / f64::from(n_q) - 0.5).collect())
    }

    #[test]
    fn reward_baseline_identical_rewards() {
        let mut b = RewardBaseline::default();
        let a = b.advantages(&[-0.731, -0.731, -0.731]);
        assert!(a.iter().all(|&x| x == 0.0));
        assert_eq!(b.value, -0.731);
        let a = b.advantages(&[1.0, 3.0]);
        assert_eq!(a, vec![-1.0, 1.0]);
    }

    #[test]
    fn meta_loss_at_half_is_ln2() {
        let b = CdmBundle::irt(vec![0.5, 0.5]);
        let theta = ProficiencyState::neutral(1);
        let meta = [Interaction::new(0, 0, 1), Interaction::new(0, 1, 0)];
        let (l, per) = meta_loss(&b, &theta, &meta).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(per.len(), 2);
    }

    #[test]
    fn episode_shape_and_replay() {
        let corpus = toy_corpus(3, 12);
        let b = bundle(12);
        let policy = SelectionPolicy::new(12, 8, &mut stream(Stream::PolicyInit, &[1]));
        let split = resplit_support_meta(corpus.log(1).unwrap(), 0.2, 3, 1).unwrap();
        let params = EpisodeParams {
            t: 4,
            k_steps: 5,
            lr_inner: 0.1,
        };
        let tr = run_episode(&b, &policy, &split, params, SelectMode::Sample, 3, 1).unwrap().unwrap();
        assert_eq!(tr.selected.len(), 4);
        let mut qs: Vec<u32> = tr.selected.iter().map(|s| s.question).collect();
        qs.sort_unstable();
        qs.dedup();
        assert_eq!(qs.len(), 4);
        // replaying the warm-start chain reproduces every recorded state
        let mut theta = ProficiencyState::neutral(1);
        for (t, s) in tr.selected.iter().enumerate() {
            let responses: Vec<(&ItemParams, f64)> = tr.selected[..=t]
                .iter()
                .map(|x| (b.item(x.question), f64::from(x.label)))
                .collect();
            theta = inner_optimize(&b, &theta, &responses, 5, 0.1).unwrap().state;
            assert_eq!(theta, tr.theta_star[t], "step {t} ({})", s.question);
        }
        let again = run_episode(&b, &policy, &split, params, SelectMode::Sample, 3, 1).unwrap().unwrap();
        assert_eq!(again, tr);
        let long = EpisodeParams { t: 20, ..params };
        assert!(run_episode(&b, &policy, &split, long, SelectMode::Sample, 3, 1).unwrap().is_none());
    }

    #[test]
    fn identical_losses_leave_policy_unchanged() {
        let corpus = toy_corpus(4, 10);
        let b = bundle(10);
        let mut policy = SelectionPolicy::new(10, 8, &mut stream(Stream::PolicyInit, &[2]));
        let before = policy.clone();
        let params = EpisodeParams {
            t: 3,
            k_steps: 5,
            lr_inner: 0.1,
        };
        let traces: Vec<EpisodeTrace> = corpus
            .logs()
            .map(|(_, l)| {
                let s = resplit_support_meta(l, 0.2, 0, 1).unwrap();
                run_episode(&b, &policy, &s, params, SelectMode::Sample, 0, 1).unwrap().unwrap()
            })
            .collect();
        let refs: Vec<&EpisodeTrace> = traces.iter().collect();
        let g = outer_update(&mut policy, &refs, &[0.4; 4], 3, &mut RewardBaseline::default(), 0.5, 1).unwrap();
        assert!(g.is_zero());
        assert_eq!(policy, before);
    }

    #[test]
    fn zero_epochs_return_initial_policy_and_cdm_is_untouched() {
        let corpus = toy_corpus(6, 12);
        let b = bundle(12);
        let hash = b.param_hash();
        let config = TrainConfig {
            t: 2,
            epochs: 0,
            policy_hidden: 8,
            ..TrainConfig::default()
        };
        let out = train(&corpus, &corpus, &b, &config).unwrap();
        let init = SelectionPolicy::new(12, 8, &mut stream(Stream::PolicyInit, &[0]));
        assert_eq!(out.policy, init);
        assert!(out.log.is_empty());
        let config = TrainConfig { epochs: 2, ..config };
        let a = train(&corpus, &corpus, &b, &config).unwrap();
        let again = train(&corpus, &corpus, &b, &config).unwrap();
        assert_eq!(log_jsonl(&a.log), log_jsonl(&again.log));
        assert_eq!(b.param_hash(), hash);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn advantages_are_centered(rewards in prop::collection::vec(-10.0f64..0.0, 1..64)) {
            let mut b = RewardBaseline::default();
            let adv = b.advantages(&rewards);
            prop_assert!(adv.iter().sum::<f64>().abs() <= 1e-9 * rewards.len() as f64);
        }

        #[test]
        fn identical_rewards_give_zero_advantage(r in -10.0f64..0.0, n in 1usize..64) {
            let mut b = RewardBaseline::default();
            prop_assert!(b.advantages(&vec![r; n]).iter().all(|&a| a == 0.0));
        }
    }
}
