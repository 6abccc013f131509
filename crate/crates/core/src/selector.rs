//! Question-selection policy.
//!
//! The state is the response history encoded over the whole question bank
//! (+1 correct, -1 incorrect, 0 unattempted). A one-hidden-layer tanh network
//! maps it to one logit per question; a mask restricts the softmax to the
//! examinee's not-yet-administered support questions.
//!
//! Both weight matrices are stored question-major (`n_questions x hidden`),
//! so the input contribution of an answered question and the output logit of
//! a candidate are each a single contiguous row. Histories are short, which
//! keeps the forward and backward passes sparse in the question dimension.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::write_json_atomic;

pub const POLICY_HIDDEN: usize = 256;

/// Additive constant applied to disallowed logits.
pub const MASK_PENALTY: f64 = -1e9;

#[derive(Debug, Error)]
pub enum SelectorError {
    #[error("question {0} appears twice in the response history")]
    DuplicateQuestion(u32),
    #[error("question {question} is outside the bank of {n_questions}")]
    UnknownQuestion { question: u32, n_questions: usize },
    #[error("no candidate question left to select")]
    NoCandidate,
    #[error("question {0} is not allowed by the mask")]
    Disallowed(u32),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite policy gradient")]
    NonFinite,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StateVector {
    entries: Vec<i8>,
}

impl StateVector {
    pub fn zeros(n_questions: usize) -> Self {
        Self {
            entries: vec![0; n_questions],
        }
    }

    pub fn entries(&self) -> &[i8] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(question, value)` for administered questions, in index order.
    pub fn nonzero(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(q, &v)| (q, f64::from(v)))
    }

    pub fn record(&mut self, question: u32, label: u8) -> Result<(), SelectorError> {
        let n_questions = self.entries.len();
        let slot =
            self.entries
                .get_mut(question as usize)
                .ok_or(SelectorError::UnknownQuestion {
                    question,
                    n_questions,
                })?;
        if *slot != 0 {
            return Err(SelectorError::DuplicateQuestion(question));
        }
        *slot = if label == 1 { 1 } else { -1 };
        Ok(())
    }
}

pub fn encode_state(
    history: &[(u32, u8)],
    n_questions: usize,
) -> Result<StateVector, SelectorError> {
    let mut state = StateVector::zeros(n_questions);
    for &(q, label) in history {
        state.record(q, label)?;
    }
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionMask {
    allowed: Vec<bool>,
}

impl SelectionMask {
    pub fn from_allowed(allowed: Vec<bool>) -> Self {
        Self { allowed }
    }

    /// Allows every question of `pool` that is not yet in `administered`.
    pub fn from_pool(n_questions: usize, pool: &[u32], administered: &[u32]) -> Self {
        let mut allowed = vec![false; n_questions];
        for &q in pool {
            allowed[q as usize] = true;
        }
        for &q in administered {
            allowed[q as usize] = false;
        }
        Self { allowed }
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    pub fn is_allowed(&self, question: u32) -> bool {
        self.allowed
            .get(question as usize)
            .copied()
            .unwrap_or(false)
    }

    pub fn disallow(&mut self, question: u32) {
        if let Some(a) = self.allowed.get_mut(question as usize) {
            *a = false;
        }
    }

    pub fn indices(&self) -> Vec<usize> {
        self.allowed
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(q, _)| q)
            .collect()
    }

    pub fn count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub n_questions: usize,
    pub hidden: usize,
    /// Row `q` is the input weight of question `q`'s state entry.
    pub w_in: Array2<f64>,
    pub b_in: Array1<f64>,
    /// Row `q` produces the logit of question `q`.
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectMode {
    Sample,
    Greedy,
}

impl SelectionPolicy {
    /// Xavier-normal weights with zero biases; the initial policy is uniform
    /// over allowed questions on an empty history.
    pub fn new<R: Rng + ?Sized>(n_questions: usize, hidden: usize, rng: &mut R) -> Self {
        let std = (2.0 / (n_questions + hidden) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let w_in = Array2::from_shape_fn((n_questions, hidden), |_| normal.sample(rng));
        let w_out = Array2::from_shape_fn((n_questions, hidden), |_| normal.sample(rng));
        Self {
            n_questions,
            hidden,
            w_in,
            b_in: Array1::zeros(hidden),
            w_out,
            b_out: Array1::zeros(n_questions),
        }
    }

    fn check(&self, state: &StateVector, mask: &SelectionMask) -> Result<(), SelectorError> {
        for got in [state.len(), mask.allowed.len()] {
            if got != self.n_questions {
                return Err(SelectorError::Dimension {
                    expected: self.n_questions,
                    got,
                });
            }
        }
        Ok(())
    }

    pub fn hidden_activation(&self, state: &StateVector) -> Array1<f64> {
        let mut z = self.b_in.clone();
        for (q, v) in state.nonzero() {
            z.scaled_add(v, &self.w_in.row(q));
        }
        z.mapv_inplace(f64::tanh);
        z
    }

    fn logit(&self, h: &Array1<f64>, q: usize) -> f64 {
        self.w_out.row(q).dot(h) + self.b_out[q]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SelectorError> {
        Ok(write_json_atomic(path, self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SelectorError> {
        let policy: SelectionPolicy = serde_json::from_slice(&std::fs::read(path)?)?;
        let (q, h) = (policy.n_questions, policy.hidden);
        let shapes = [
            (policy.w_in.dim(), (q, h)),
            (policy.w_out.dim(), (q, h)),
            ((policy.b_in.len(), h), (h, h)),
            ((policy.b_out.len(), q), (q, q)),
        ];
        for (got, expected) in shapes {
            if got != expected {
                return Err(SelectorError::Dimension {
                    expected: expected.0 * expected.1,
                    got: got.0 * got.1,
                });
            }
        }
        Ok(policy)
    }

    /// Adds `lr * grad` to the parameters (gradient ascent on the objective
    /// whose gradient `grad` holds).
    pub fn apply(&mut self, grad: &PolicyGrad, lr: f64) -> Result<(), SelectorError> {
        if !grad.is_finite() {
            return Err(SelectorError::NonFinite);
        }
        for (&q, g) in &grad.w_in {
            self.w_in.row_mut(q as usize).scaled_add(lr, g);
        }
        self.b_in.scaled_add(lr, &grad.b_in);
        for (&q, g) in &grad.w_out {
            self.w_out.row_mut(q as usize).scaled_add(lr, g);
        }
        for (&q, g) in &grad.b_out {
            self.b_out[q as usize] += lr * g;
        }
        Ok(())
    }
}

/// Masked logits over the whole bank: disallowed entries carry the
/// `MASK_PENALTY` offset and take no part in the softmax.
pub fn policy_logits(
    policy: &SelectionPolicy,
    state: &StateVector,
    mask: &SelectionMask,
) -> Result<Vec<f64>, SelectorError> {
    policy.check(state, mask)?;
    if mask.count() == 0 {
        return Err(SelectorError::NoCandidate);
    }
    let h = policy.hidden_activation(state);
    Ok((0..policy.n_questions)
        .map(|q| {
            let l = policy.logit(&h, q);
            if mask.allowed[q] {
                l
            } else {
                l + MASK_PENALTY
            }
        })
        .collect())
}

/// Softmax restricted to the allowed questions.
struct Masked {
    h: Array1<f64>,
    idx: Vec<usize>,
    probs: Vec<f64>,
    log_z: f64,
    logits: Vec<f64>,
}

fn masked_softmax(
    policy: &SelectionPolicy,
    state: &StateVector,
    mask: &SelectionMask,
) -> Result<Masked, SelectorError> {
    policy.check(state, mask)?;
    let idx = mask.indices();
    if idx.is_empty() {
        return Err(SelectorError::NoCandidate);
    }
    let h = policy.hidden_activation(state);
    let logits: Vec<f64> = idx.iter().map(|&q| policy.logit(&h, q)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(Masked {
        h,
        probs: exps.iter().map(|e| e / sum).collect(),
        log_z: max + sum.ln(),
        idx,
        logits,
    })
}

pub fn select_question<R: Rng + ?Sized>(
    policy: &SelectionPolicy,
    state: &StateVector,
    mask: &SelectionMask,
    mode: SelectMode,
    rng: &mut R,
) -> Result<u32, SelectorError> {
    let m = masked_softmax(policy, state, mask)?;
    let pos = match mode {
        SelectMode::Greedy => {
            let mut best = 0;
            for (i, &l) in m.logits.iter().enumerate() {
                if l > m.logits[best] {
                    best = i;
                }
            }
            best
        }
        SelectMode::Sample => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = m.idx.len() - 1;
            for (i, &p) in m.probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        }
    };
    Ok(m.idx[pos] as u32)
}

pub fn log_prob(
    policy: &SelectionPolicy,
    state: &StateVector,
    mask: &SelectionMask,
    question: u32,
) -> Result<f64, SelectorError> {
    if !mask.is_allowed(question) {
        return Err(SelectorError::Disallowed(question));
    }
    let m = masked_softmax(policy, state, mask)?;
    let pos = m.idx.binary_search(&(question as usize)).expect("allowed");
    Ok(m.logits[pos] - m.log_z)
}

/// Sparse gradient: only the rows touched by a history or a candidate pool
/// are stored. Keys are ordered, so merging is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PolicyGrad {
    pub w_in: BTreeMap<u32, Array1<f64>>,
    pub b_in: Array1<f64>,
    pub w_out: BTreeMap<u32, Array1<f64>>,
    pub b_out: BTreeMap<u32, f64>,
}

impl PolicyGrad {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            b_in: Array1::zeros(hidden),
            ..Self::default()
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &PolicyGrad, scale: f64) {
        if self.b_in.len() != other.b_in.len() {
            self.b_in = Array1::zeros(other.b_in.len());
        }
        self.b_in.scaled_add(scale, &other.b_in);
        for (q, g) in &other.w_in {
            self.w_in
                .entry(*q)
                .or_insert_with(|| Array1::zeros(g.len()))
                .scaled_add(scale, g);
        }
        for (q, g) in &other.w_out {
            self.w_out
                .entry(*q)
                .or_insert_with(|| Array1::zeros(g.len()))
                .scaled_add(scale, g);
        }
        for (q, g) in &other.b_out {
            *self.b_out.entry(*q).or_insert(0.0) += scale * g;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.b_in.iter().all(|v| v.is_finite())
            && self.w_in.values().all(|r| r.iter().all(|v| v.is_finite()))
            && self.w_out.values().all(|r| r.iter().all(|v| v.is_finite()))
            && self.b_out.values().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.b_in.iter().all(|&v| v == 0.0)
            && self.w_in.values().all(|r| r.iter().all(|&v| v == 0.0))
            && self.w_out.values().all(|r| r.iter().all(|&v| v == 0.0))
            && self.b_out.values().all(|&v| v == 0.0)
    }
}

/// Adds `scale * d log pi(question | state, mask) / d params` into `acc` and
/// returns the log-probability.
pub fn accumulate_log_prob_grad(
    policy: &SelectionPolicy,
    state: &StateVector,
    mask: &SelectionMask,
    question: u32,
    scale: f64,
    acc: &mut PolicyGrad,
) -> Result<f64, SelectorError> {
    if !mask.is_allowed(question) {
        return Err(SelectorError::Disallowed(question));
    }
    let m = masked_softmax(policy, state, mask)?;
    if acc.b_in.len() != policy.hidden {
        acc.b_in = Array1::zeros(policy.hidden);
    }
    let hidden = policy.hidden;
    let mut dh = Array1::<f64>::zeros(hidden);
    let mut chosen_logit = 0.0;
    for (i, &q) in m.idx.iter().enumerate() {
        let onehot = if q == question as usize { 1.0 } else { 0.0 };
        if onehot == 1.0 {
            chosen_logit = m.logits[i];
        }
        let d = scale * (onehot - m.probs[i]);
        *acc.b_out.entry(q as u32).or_insert(0.0) += d;
        acc.w_out
            .entry(q as u32)
            .or_insert_with(|| Array1::zeros(hidden))
            .scaled_add(d, &m.h);
        dh.scaled_add(d, &policy.w_out.row(q));
    }
    let dz = dh * m.h.mapv(|h| 1.0 - h * h);
    acc.b_in += &dz;
    for (q, v) in state.nonzero() {
        acc.w_in
            .entry(q as u32)
            .or_insert_with(|| Array1::zeros(hidden))
            .scaled_add(v, &dz);
    }
    Ok(chosen_logit - m.log_z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn policy(n: usize, hidden: usize, seed: u64) -> SelectionPolicy {
        let mut rng = stream(Stream::PolicyInit, &[seed]);
        let mut p = SelectionPolicy::new(n, hidden, &mut rng);
        p.b_in.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        p.b_out.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        p
    }

    #[test]
    fn encoding() {
        assert!(encode_state(&[], 4)
            .unwrap()
            .entries()
            .iter()
            .all(|&v| v == 0));
        let s = encode_state(&[(3, 1), (7, 0)], 10).unwrap();
        let mut expected = [0i8; 10];
        expected[3] = 1;
        expected[7] = -1;
        assert_eq!(s.entries(), &expected[..]);
        let full: Vec<(u32, u8)> = (0..6).map(|q| (q, (q % 2) as u8)).collect();
        assert_eq!(encode_state(&full, 6).unwrap().nonzero().count(), 6);
        assert!(matches!(
            encode_state(&[(1, 1), (1, 0)], 4),
            Err(SelectorError::DuplicateQuestion(1))
        ));
    }

    #[test]
    fn logits_and_mask() {
        let p = policy(5, 4, 1);
        let state = encode_state(&[(0, 1)], 5).unwrap();
        let all = SelectionMask::from_allowed(vec![true; 5]);
        let logits = policy_logits(&p, &state, &all).unwrap();
        assert!(logits.iter().all(|&l| l > MASK_PENALTY / 2.0));
        let none = SelectionMask::from_allowed(vec![false; 5]);
        assert!(matches!(
            policy_logits(&p, &state, &none),
            Err(SelectorError::NoCandidate)
        ));
        let single = SelectionMask::from_pool(5, &[2], &[]);
        assert_eq!(log_prob(&p, &state, &single, 2).unwrap(), 0.0);
        assert!(matches!(
            log_prob(&p, &state, &single, 1),
            Err(SelectorError::Disallowed(1))
        ));
    }

    #[test]
    fn masked_question_is_never_sampled() {
        let p = policy(6, 4, 2);
        let state = StateVector::zeros(6);
        let mask = SelectionMask::from_pool(6, &[0, 1, 2, 4, 5], &[1]);
        let mut rng = stream(Stream::Selection, &[9]);
        for _ in 0..10_000 {
            let q = select_question(&p, &state, &mask, SelectMode::Sample, &mut rng).unwrap();
            assert!(mask.is_allowed(q));
        }
    }

    #[test]
    fn uniform_sampling_frequencies() {
        // zero output weights and biases give uniform logits
        let mut p = policy(6, 4, 3);
        p.w_out.fill(0.0);
        p.b_out.fill(0.0);
        let state = StateVector::zeros(6);
        let mask = SelectionMask::from_pool(6, &[0, 2, 3, 5], &[]);
        let mut rng = stream(Stream::Selection, &[4]);
        let n = 10_000;
        let mut counts = [0usize; 6];
        for _ in 0..n {
            counts[select_question(&p, &state, &mask, SelectMode::Sample, &mut rng).unwrap()
                as usize] += 1;
        }
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for q in [0, 2, 3, 5] {
            assert!(
                (counts[q] as f64 - n as f64 * 0.25).abs() < 3.0 * sigma,
                "{counts:?}"
            );
        }
    }

    #[test]
    fn greedy_ties_go_to_lowest_index() {
        let mut p = policy(3, 2, 4);
        p.w_out.fill(0.0);
        p.b_out = Array1::from(vec![1.0, 2.0, 2.0]);
        let mask = SelectionMask::from_allowed(vec![true; 3]);
        let mut rng = stream(Stream::Selection, &[0]);
        let q = select_question(
            &p,
            &StateVector::zeros(3),
            &mask,
            SelectMode::Greedy,
            &mut rng,
        )
        .unwrap();
        assert_eq!(q, 1);
        p.b_out += 7.5;
        let q = select_question(
            &p,
            &StateVector::zeros(3),
            &mask,
            SelectMode::Greedy,
            &mut rng,
        )
        .unwrap();
        assert_eq!(q, 1);
    }

    #[test]
    fn two_equal_logits_give_log_half() {
        let mut p = policy(4, 3, 5);
        p.w_out.fill(0.0);
        p.b_out.fill(0.3);
        let mask = SelectionMask::from_pool(4, &[1, 3], &[]);
        let lp = log_prob(&p, &StateVector::zeros(4), &mask, 3).unwrap();
        assert!((lp - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn log_prob_matches_straight_line_log_softmax() {
        let p = policy(7, 5, 6);
        let state = encode_state(&[(2, 1), (5, 0)], 7).unwrap();
        let mask = SelectionMask::from_pool(7, &[0, 1, 2, 3, 6], &[2]);
        // independent evaluation with plain loops
        let mut h = [0.0; 5];
        for (j, hj) in h.iter_mut().enumerate() {
            let z = p.b_in[j] + p.w_in[[2, j]] - p.w_in[[5, j]];
            *hj = z.tanh();
        }
        let logit = |q: usize| (0..5).map(|j| p.w_out[[q, j]] * h[j]).sum::<f64>() + p.b_out[q];
        let allowed = [0usize, 1, 3, 6];
        let z: f64 = allowed.iter().map(|&q| logit(q).exp()).sum();
        let mut total = 0.0;
        for &q in &allowed {
            let lp = log_prob(&p, &state, &mask, q as u32).unwrap();
            assert!((lp - (logit(q) - z.ln())).abs() < 1e-10);
            total += lp.exp();
        }
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let p = policy(5, 3, 7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        p.save(&path).unwrap();
        assert_eq!(SelectionPolicy::load(&path).unwrap(), p);
    }

    #[test]
    fn identical_gradients_cancel() {
        let p = policy(4, 3, 8);
        let state = encode_state(&[(0, 1)], 4).unwrap();
        let mask = SelectionMask::from_pool(4, &[1, 2, 3], &[]);
        let mut g = PolicyGrad::zeros(3);
        accumulate_log_prob_grad(&p, &state, &mask, 2, 1.0, &mut g).unwrap();
        let mut acc = PolicyGrad::zeros(3);
        acc.add_scaled(&g, 1.0);
        acc.add_scaled(&g, -1.0);
        assert!(acc.is_zero());
        let mut q = p.clone();
        q.apply(&acc, 0.5).unwrap();
        assert_eq!(q, p);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn masked_distribution_sums_to_one(
            seed in any::<u64>(),
            allowed in prop::collection::vec(any::<bool>(), 10),
            history in prop::collection::vec((0u32..10, 0u8..2), 0..5),
        ) {
            prop_assume!(allowed.iter().any(|&a| a));
            let policy = SelectionPolicy::new(10, 6, &mut stream(Stream::PolicyInit, &[seed]));
            let mut state = StateVector::zeros(10);
            for (q, l) in history {
                let _ = state.record(q, l);
            }
            let mask = SelectionMask::from_allowed(allowed.clone());
            let mut total = 0.0;
            for q in 0..10u32 {
                match log_prob(&policy, &state, &mask, q) {
                    Ok(lp) => {
                        prop_assert!(allowed[q as usize] && lp <= 0.0);
                        total += lp.exp();
                    }
                    Err(_) => prop_assert!(!allowed[q as usize]),
                }
            }
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }
}
