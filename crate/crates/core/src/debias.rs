//! Debiasing strategies applied to the outer objective.
//!
//! Every strategy turns a batch of finished episodes (final proficiency plus
//! meta set) into one loss per episode. The mean of these per-episode losses
//! is the batch objective; each one also serves as that episode's negative
//! reward.
//!
//! Selective Mixup builds synthetic questions for the examinees of the two
//! biased attributes (A and C) by interpolating the parameters of one of
//! their meta questions with a same-label meta question of the nearest
//! balanced (B) examinee in the batch. The ablations pair within the same
//! examinee (`MixupSelf`) or within the same attribute (`MixupInner`).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cdm::{
    bce_loss, predict_logit, CdmBundle, CdmError, IrtItem, ItemParams, NcdmItem, ProficiencyState,
};
use crate::dataset::{group_key, Attribute, GroupKey, Interaction};
use crate::math::{l2_distance, sigmoid};
use crate::rng::{stream, Stream};

#[derive(Debug, Error)]
pub enum DebiasError {
    #[error("vector lengths differ: {0} vs {1}")]
    Length(usize, usize),
    #[error("invalid strategy setting: {0}")]
    Config(String),
    #[error("episode for examinee {0} has an empty meta set")]
    EmptyMeta(u32),
    #[error(transparent)]
    Cdm(#[from] CdmError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "ERM")]
    Erm,
    #[serde(rename = "IRM")]
    Irm,
    #[serde(rename = "GroupDRO")]
    GroupDro,
    #[serde(rename = "Reweight")]
    Reweight,
    #[serde(rename = "MixupB")]
    MixupB,
    #[serde(rename = "MixupSelf")]
    MixupSelf,
    #[serde(rename = "MixupInner")]
    MixupInner,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 7] = [
        StrategyKind::Erm,
        StrategyKind::Irm,
        StrategyKind::GroupDro,
        StrategyKind::Reweight,
        StrategyKind::MixupB,
        StrategyKind::MixupSelf,
        StrategyKind::MixupInner,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Erm => "ERM",
            StrategyKind::Irm => "IRM",
            StrategyKind::GroupDro => "GroupDRO",
            StrategyKind::Reweight => "Reweight",
            StrategyKind::MixupB => "MixupB",
            StrategyKind::MixupSelf => "MixupSelf",
            StrategyKind::MixupInner => "MixupInner",
        }
    }

    pub fn is_mixup(self) -> bool {
        matches!(
            self,
            StrategyKind::MixupB | StrategyKind::MixupSelf | StrategyKind::MixupInner
        )
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = DebiasError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                DebiasError::Config(format!(
                    "unknown strategy {s:?}; expected one of ERM, IRM, GroupDRO, Reweight, MixupB, MixupSelf, MixupInner"
                ))
            })
    }
}

/// Strategy hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyParams {
    pub kind: StrategyKind,
    /// Weight of the synthetic loss.
    pub omega: f64,
    /// Shape of the symmetric Beta distribution for the mixing coefficient.
    pub mixup_alpha: f64,
    /// GroupDRO step size.
    pub eta: f64,
    /// IRM penalty weight.
    pub lambda_irm: f64,
}

impl StrategyParams {
    pub fn validate(&self) -> Result<(), DebiasError> {
        let bad = |name: &str, v: f64| DebiasError::Config(format!("{name} = {v} is out of range"));
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(bad("omega", self.omega));
        }
        if !(self.mixup_alpha > 0.0 && self.mixup_alpha.is_finite()) {
            return Err(bad("mixup_alpha", self.mixup_alpha));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(bad("eta", self.eta));
        }
        if !(self.lambda_irm >= 0.0 && self.lambda_irm.is_finite()) {
            return Err(bad("lambda_irm", self.lambda_irm));
        }
        Ok(())
    }
}

/// Strategy state carried across batches.
#[derive(Clone, Debug, PartialEq)]
pub struct StrategyContext {
    pub params: StrategyParams,
    /// GroupDRO probability vector over the six groups.
    pub dro_weights: [f64; GroupKey::COUNT],
    /// Reweight per-group weights, refreshed every epoch.
    pub group_weights: [f64; GroupKey::COUNT],
}

impl StrategyContext {
    pub fn new(params: StrategyParams) -> Result<Self, DebiasError> {
        params.validate()?;
        Ok(Self {
            params,
            dro_weights: [1.0 / GroupKey::COUNT as f64; GroupKey::COUNT],
            group_weights: [1.0; GroupKey::COUNT],
        })
    }
}

/// One finished episode as seen by the strategies.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeView<'a> {
    pub examinee: u32,
    pub attribute: Attribute,
    pub state: &'a ProficiencyState,
    pub meta: &'a [Interaction],
}

/// Coordinates of the synthesis random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthCoords {
    pub seed: u64,
    pub epoch: u64,
    pub batch: u64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    /// Examinee whose proficiency scores the sample.
    pub examinee: u32,
    pub item: ItemParams,
    pub label: u8,
    /// `(q_i, q_j)`: the biased endpoint and the partner question.
    pub source: (u32, u32),
    /// Examinee the partner question came from.
    pub partner: u32,
    pub lambda: f64,
}

pub fn similarity(theta_i: &[f64], theta_j: &[f64]) -> Result<f64, DebiasError> {
    if theta_i.len() != theta_j.len() {
        return Err(DebiasError::Length(theta_i.len(), theta_j.len()));
    }
    Ok(l2_distance(theta_i, theta_j))
}

/// Candidates ordered by ascending distance, ties by ascending id.
fn ranked(theta: &[f64], pool: &[(u32, &[f64])]) -> Result<Vec<u32>, DebiasError> {
    let mut scored = pool
        .iter()
        .map(|(id, t)| similarity(theta, t).map(|d| (d, *id)))
        .collect::<Result<Vec<_>, _>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, id)| id).collect())
}

/// Nearest pool member; `None` for an empty pool.
pub fn retrieve_partner(theta: &[f64], pool: &[(u32, &[f64])]) -> Result<Option<u32>, DebiasError> {
    Ok(ranked(theta, pool)?.first().copied())
}

/// Partner candidates for each biased (A or C) examinee of a batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PartnerIndex {
    pub lists: BTreeMap<u32, Vec<u32>>,
}

impl PartnerIndex {
    /// `MixupB` pairs with batch B examinees; `MixupInner` with other
    /// examinees of the same attribute. Other strategies get an empty index.
    pub fn build(kind: StrategyKind, batch: &[EpisodeView<'_>]) -> Result<Self, DebiasError> {
        let thetas: Vec<Vec<f64>> = batch.iter().map(|e| e.state.theta()).collect();
        let mut lists = BTreeMap::new();
        for (i, e) in batch.iter().enumerate() {
            if e.attribute == Attribute::B {
                continue;
            }
            let pool: Vec<(u32, &[f64])> = match kind {
                StrategyKind::MixupB => batch
                    .iter()
                    .zip(&thetas)
                    .filter(|(o, _)| o.attribute == Attribute::B)
                    .map(|(o, t)| (o.examinee, t.as_slice()))
                    .collect(),
                StrategyKind::MixupInner => batch
                    .iter()
                    .zip(&thetas)
                    .filter(|(o, _)| o.attribute == e.attribute && o.examinee != e.examinee)
                    .map(|(o, t)| (o.examinee, t.as_slice()))
                    .collect(),
                _ => continue,
            };
            lists.insert(e.examinee, ranked(&thetas[i], &pool)?);
        }
        Ok(Self { lists })
    }
}

/// Uniform draw among `meta` entries with `label`, skipping `exclude`.
fn draw_same_label<R: Rng + ?Sized>(
    meta: &[Interaction],
    label: u8,
    exclude: Option<usize>,
    rng: &mut R,
) -> Option<usize> {
    let eligible: Vec<usize> = meta
        .iter()
        .enumerate()
        .filter(|&(i, it)| it.label == label && Some(i) != exclude)
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        None
    } else {
        Some(eligible[rng.random_range(0..eligible.len())])
    }
}

/// Walks the ranked partners and draws a same-label meta interaction from
/// the first one that has any. Returns `(partner, interaction)`.
pub fn draw_partner_interaction<R: Rng + ?Sized>(
    partners: &[u32],
    metas: &BTreeMap<u32, &[Interaction]>,
    label: u8,
    rng: &mut R,
) -> Option<(u32, Interaction)> {
    for &p in partners {
        let Some(meta) = metas.get(&p) else { continue };
        if let Some(i) = draw_same_label(meta, label, None, rng) {
            return Some((p, meta[i]));
        }
    }
    None
}

fn lerp(a: f64, b: f64, lambda: f64) -> f64 {
    if lambda == 1.0 {
        a
    } else if lambda == 0.0 {
        b
    } else {
        // clamp absorbs rounding so the result never leaves the segment
        (lambda * a + (1.0 - lambda) * b).clamp(a.min(b), a.max(b))
    }
}

fn lerp_vec(a: &[f64], b: &[f64], lambda: f64) -> Result<Vec<f64>, DebiasError> {
    if a.len() != b.len() {
        return Err(DebiasError::Length(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| lerp(x, y, lambda)).collect())
}

/// Convex combination `lambda * q_i + (1 - lambda) * q_j` of the question
/// parameters. IRT interpolates the difficulty only.
pub fn mixup_item(
    q_i: &ItemParams,
    q_j: &ItemParams,
    lambda: f64,
) -> Result<ItemParams, DebiasError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(DebiasError::Config(format!(
            "lambda {lambda} outside [0, 1]"
        )));
    }
    match (q_i, q_j) {
        (ItemParams::Irt(a), ItemParams::Irt(b)) => Ok(ItemParams::Irt(IrtItem {
            difficulty: lerp(a.difficulty, b.difficulty, lambda),
        })),
        (ItemParams::Ncdm(a), ItemParams::Ncdm(b)) => Ok(ItemParams::Ncdm(NcdmItem {
            concepts: lerp_vec(&a.concepts, &b.concepts, lambda)?,
            difficulty: lerp_vec(&a.difficulty, &b.difficulty, lambda)?,
            discrimination: lerp(a.discrimination, b.discrimination, lambda),
        })),
        _ => Err(CdmError::KindMismatch(q_i.kind()).into()),
    }
}

/// Synthetic samples for a batch, in batch order then meta order.
///
/// Each biased examinee draws from its own stream, so the result does not
/// depend on how episodes are scheduled.
pub fn synthesize(
    kind: StrategyKind,
    bundle: &CdmBundle,
    batch: &[EpisodeView<'_>],
    mixup_alpha: f64,
    coords: SynthCoords,
) -> Result<Vec<SyntheticSample>, DebiasError> {
    if !kind.is_mixup() {
        return Ok(Vec::new());
    }
    let beta = Beta::new(mixup_alpha, mixup_alpha)
        .map_err(|e| DebiasError::Config(format!("mixup_alpha {mixup_alpha}: {e}")))?;
    let index = PartnerIndex::build(kind, batch)?;
    let metas: BTreeMap<u32, &[Interaction]> = batch.iter().map(|e| (e.examinee, e.meta)).collect();
    let mut out = Vec::new();
    for e in batch.iter().filter(|e| e.attribute != Attribute::B) {
        let mut rng = stream(
            Stream::Synthesis,
            &[
                coords.seed,
                coords.epoch,
                coords.batch,
                coords.step,
                u64::from(e.examinee),
            ],
        );
        let partners = index
            .lists
            .get(&e.examinee)
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        for (i, qi) in e.meta.iter().enumerate() {
            let drawn = match kind {
                StrategyKind::MixupSelf => draw_same_label(e.meta, qi.label, Some(i), &mut rng)
                    .map(|j| (e.examinee, e.meta[j])),
                _ => draw_partner_interaction(partners, &metas, qi.label, &mut rng),
            };
            let Some((partner, qj)) = drawn else { continue };
            let lambda: f64 = beta.sample(&mut rng);
            out.push(SyntheticSample {
                examinee: e.examinee,
                item: mixup_item(bundle.item(qi.question), bundle.item(qj.question), lambda)?,
                label: qi.label,
                source: (qi.question, qj.question),
                partner,
                lambda,
            });
        }
    }
    Ok(out)
}

/// Summed loss of each examinee's synthetic samples, keyed by examinee.
pub fn synthetic_losses(
    bundle: &CdmBundle,
    states: &BTreeMap<u32, &ProficiencyState>,
    synth: &[SyntheticSample],
) -> Result<BTreeMap<u32, f64>, DebiasError> {
    let mut out = BTreeMap::new();
    for s in synth {
        let state = states.get(&s.examinee).ok_or_else(|| {
            DebiasError::Config(format!("no proficiency for examinee {}", s.examinee))
        })?;
        let p = sigmoid(predict_logit(bundle, state, &s.item)?);
        *out.entry(s.examinee).or_insert(0.0) += bce_loss(f64::from(s.label), p);
    }
    Ok(out)
}

/// Synthetic loss averaged over the `n_examinees` of the batch and summed
/// over samples.
pub fn synthetic_loss(
    bundle: &CdmBundle,
    states: &BTreeMap<u32, &ProficiencyState>,
    synth: &[SyntheticSample],
    n_examinees: usize,
) -> Result<f64, DebiasError> {
    if synth.is_empty() || n_examinees == 0 {
        return Ok(0.0);
    }
    let total: f64 = synthetic_losses(bundle, states, synth)?.values().sum();
    Ok(total / n_examinees as f64)
}

pub fn final_loss(l_emp: f64, l_syn: f64, omega: f64) -> f64 {
    l_emp + omega * l_syn
}

/// One prediction inside an IRM environment: the output logit `z` and the
/// label. The dummy multiplier scales `z`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvPrediction {
    pub env: usize,
    pub logit: f64,
    pub y: f64,
}

/// Derivative at `s = 1` of each environment's mean loss
/// `mean bce(y, sigmoid(s * z))`, keyed by environment.
pub fn irm_env_grads(preds: &[EnvPrediction]) -> BTreeMap<usize, (f64, usize)> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for p in preds {
        let e = acc.entry(p.env).or_insert((0.0, 0));
        e.0 += (sigmoid(p.logit) - p.y) * p.logit;
        e.1 += 1;
    }
    for v in acc.values_mut() {
        v.0 /= v.1 as f64;
    }
    acc
}

/// IRMv1 penalty: sum over environments of the squared dummy-scale
/// gradient. Zero with fewer than two environments.
pub fn irm_penalty(preds: &[EnvPrediction]) -> f64 {
    let grads = irm_env_grads(preds);
    if grads.len() < 2 {
        return 0.0;
    }
    grads.values().map(|(g, _)| g * g).sum()
}

/// Exponentiated-gradient step on the group weights. Absent groups (`None`)
/// keep their pre-normalization weight and add nothing to the loss.
pub fn groupdro_step(
    group_losses: &[Option<f64>; GroupKey::COUNT],
    weights: &[f64; GroupKey::COUNT],
    eta: f64,
) -> (f64, [f64; GroupKey::COUNT]) {
    let mut w = *weights;
    if eta != 0.0 {
        for (wk, l) in w.iter_mut().zip(group_losses) {
            if let Some(l) = l {
                *wk *= (eta * l).exp();
            }
        }
        let z: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= z);
    }
    let loss = w
        .iter()
        .zip(group_losses)
        .filter_map(|(wk, l)| l.map(|l| wk * l))
        .sum();
    (loss, w)
}

/// Inverse-frequency group weights `N / (6 * N_k)`; empty groups get 0.
pub fn reweight_weights(counts: &[usize; GroupKey::COUNT]) -> [f64; GroupKey::COUNT] {
    let total: usize = counts.iter().sum();
    let mut w = [0.0; GroupKey::COUNT];
    for (k, (&n, wk)) in counts.iter().zip(w.iter_mut()).enumerate() {
        if n == 0 {
            if total > 0 {
                log::warn!(
                    "group {} has no training meta interactions; weight 0",
                    GroupKey::from_index(k)
                );
            }
        } else {
            *wk = total as f64 / (GroupKey::COUNT * n) as f64;
        }
    }
    w
}

/// Per-episode objective pieces for one batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchLosses {
    /// Final loss per episode, in batch order.
    pub finals: Vec<f64>,
    /// Unweighted mean meta loss per episode.
    pub emp: Vec<f64>,
    /// Synthetic loss per episode, normalized by its meta-set size.
    pub syn: Vec<f64>,
    pub n_synthetic: usize,
}

impl BatchLosses {
    pub fn mean_final(&self) -> f64 {
        crate::math::mean(&self.finals)
    }
}

struct Scored {
    group: GroupKey,
    logit: f64,
    y: f64,
    loss: f64,
}

fn score(bundle: &CdmBundle, e: &EpisodeView<'_>) -> Result<Vec<Scored>, DebiasError> {
    if e.meta.is_empty() {
        return Err(DebiasError::EmptyMeta(e.examinee));
    }
    e.meta
        .iter()
        .map(|it| {
            let logit = predict_logit(bundle, e.state, bundle.item(it.question))?;
            let y = it.y();
            Ok(Scored {
                group: group_key(e.attribute, it.label),
                logit,
                y,
                loss: bce_loss(y, sigmoid(logit)),
            })
        })
        .collect()
}

/// Applies the configured strategy to a batch of finished episodes.
pub fn batch_losses(
    ctx: &mut StrategyContext,
    bundle: &CdmBundle,
    batch: &[EpisodeView<'_>],
    coords: SynthCoords,
) -> Result<BatchLosses, DebiasError> {
    let scored = batch
        .iter()
        .map(|e| score(bundle, e))
        .collect::<Result<Vec<_>, _>>()?;
    let emp: Vec<f64> = scored
        .iter()
        .map(|s| s.iter().map(|x| x.loss).sum::<f64>() / s.len() as f64)
        .collect();
    let mut out = BatchLosses {
        syn: vec![0.0; batch.len()],
        ..BatchLosses::default()
    };
    let params = ctx.params.clone();
    out.finals = match params.kind {
        StrategyKind::Erm => emp.clone(),
        StrategyKind::Reweight => scored
            .iter()
            .map(|s| {
                s.iter()
                    .map(|x| ctx.group_weights[x.group.index()] * x.loss)
                    .sum::<f64>()
                    / s.len() as f64
            })
            .collect(),
        StrategyKind::GroupDro => {
            let mut sums = [0.0; GroupKey::COUNT];
            let mut counts = [0usize; GroupKey::COUNT];
            for x in scored.iter().flatten() {
                sums[x.group.index()] += x.loss;
                counts[x.group.index()] += 1;
            }
            let mut group_losses = [None; GroupKey::COUNT];
            for k in 0..GroupKey::COUNT {
                if counts[k] > 0 {
                    group_losses[k] = Some(sums[k] / counts[k] as f64);
                }
            }
            let (_, w) = groupdro_step(&group_losses, &ctx.dro_weights, params.eta);
            ctx.dro_weights = w;
            // dividing by the batch group size makes the batch mean of the
            // episode losses equal to sum_g w_g L_g
            let n_episodes = batch.len() as f64;
            scored
                .iter()
                .map(|s| {
                    n_episodes
                        * s.iter()
                            .map(|x| w[x.group.index()] * x.loss / counts[x.group.index()] as f64)
                            .sum::<f64>()
                })
                .collect()
        }
        StrategyKind::Irm => {
            let preds: Vec<EnvPrediction> = batch
                .iter()
                .zip(&scored)
                .flat_map(|(e, s)| {
                    s.iter().map(move |x| EnvPrediction {
                        env: e.attribute.index(),
                        logit: x.logit,
                        y: x.y,
                    })
                })
                .collect();
            let grads = irm_env_grads(&preds);
            let n_episodes = batch.len() as f64;
            batch
                .iter()
                .zip(&scored)
                .zip(&emp)
                .map(|((e, s), &l)| {
                    if grads.len() < 2 {
                        return l;
                    }
                    let (g_env, n_env) = grads[&e.attribute.index()];
                    let own: f64 = s.iter().map(|x| (sigmoid(x.logit) - x.y) * x.logit).sum();
                    // averages over the batch to sum_e g_e^2
                    l + params.lambda_irm * n_episodes * g_env * own / n_env as f64
                })
                .collect()
        }
        StrategyKind::MixupB | StrategyKind::MixupSelf | StrategyKind::MixupInner => {
            let synth = synthesize(params.kind, bundle, batch, params.mixup_alpha, coords)?;
            out.n_synthetic = synth.len();
            let states: BTreeMap<u32, &ProficiencyState> =
                batch.iter().map(|e| (e.examinee, e.state)).collect();
            let per = synthetic_losses(bundle, &states, &synth)?;
            for (i, e) in batch.iter().enumerate() {
                out.syn[i] = per.get(&e.examinee).copied().unwrap_or(0.0) / e.meta.len() as f64;
            }
            emp.iter()
                .zip(&out.syn)
                .map(|(&l, &s)| final_loss(l, s, params.omega))
                .collect()
        }
    };
    out.emp = emp;
    Ok(out)
}
