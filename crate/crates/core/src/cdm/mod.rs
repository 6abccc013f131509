//! Cognitive diagnosis models: 1PL IRT and NCDM.
//!
//! Both models map a proficiency state and one question's parameters to the
//! probability of a correct response:
//!
//! ```text
//! IRT:   p = sigmoid(theta - b)
//! NCDM:  x  = Q ∘ (theta - h_diff) * h_disc
//!        f1 = sigmoid(W1 x + b1)
//!        f2 = sigmoid(W2 f1 + b2)
//!        p  = sigmoid(W3 f2 + b3)
//! ```
//!
//! Proficiency is stored as an unconstrained `raw` vector with
//! `theta = sigmoid(raw)`, so every gradient here is taken with respect to
//! `raw`. Question parameters and network weights are frozen once
//! [`pretrain`] returns; during adaptive testing only the proficiency moves.

mod pretrain;

pub use pretrain::{pretrain, Optimizer, PretrainConfig, PretrainEpoch, PretrainOutcome};

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{json_hash, write_json_atomic};
use crate::math::{sigmoid, sigmoid_grad_from_output, PROB_EPS};

#[derive(Debug, Error)]
pub enum CdmError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("item parameters do not match the {0:?} model")]
    KindMismatch(CdmKind),
    #[error("inner optimization needs at least one step")]
    ZeroSteps,
    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("pre-training requires at least one training interaction")]
    EmptyTraining,
    #[error("invalid pre-training config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CdmKind {
    Irt,
    Ncdm,
}

/// Latent proficiency. Only `raw` is stored; `theta = sigmoid(raw)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProficiencyState {
    raw: Vec<f64>,
}

impl ProficiencyState {
    /// `raw = 0`, i.e. `theta = 0.5` in every dimension.
    pub fn neutral(dim: usize) -> Self {
        Self {
            raw: vec![0.0; dim],
        }
    }

    pub fn from_raw(raw: Vec<f64>) -> Self {
        Self { raw }
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn raw_mut(&mut self) -> &mut [f64] {
        &mut self.raw
    }

    pub fn theta(&self) -> Vec<f64> {
        self.raw.iter().map(|&r| sigmoid(r)).collect()
    }

    pub fn dim(&self) -> usize {
        self.raw.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrtItem {
    pub difficulty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NcdmItem {
    /// Concept weights in `[0, 1]`; binary for logged questions, fractional
    /// for mixed ones.
    pub concepts: Vec<f64>,
    /// Knowledge difficulty in `(0, 1)` per concept.
    pub difficulty: Vec<f64>,
    /// Discrimination in `(0, 1)`.
    pub discrimination: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ItemParams {
    Irt(IrtItem),
    Ncdm(NcdmItem),
}

impl ItemParams {
    pub fn kind(&self) -> CdmKind {
        match self {
            ItemParams::Irt(_) => CdmKind::Irt,
            ItemParams::Ncdm(_) => CdmKind::Ncdm,
        }
    }
}

pub const NCDM_HIDDEN1: usize = 128;
pub const NCDM_HIDDEN2: usize = 64;

/// NCDM interaction network. Monotonicity in proficiency holds as long as
/// every entry of `w1`, `w2` and `w3` is nonnegative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NcdmNet {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct NcdmForward {
    pub f1: Array1<f64>,
    pub f2: Array1<f64>,
    pub p: f64,
}

/// Gradients of a scalar loss with respect to the network weights.
#[derive(Clone, Debug, PartialEq)]
pub struct NcdmNetGrad {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

impl NcdmNet {
    pub fn new<R: Rng + ?Sized>(n_concepts: usize, rng: &mut R) -> Self {
        Self::with_dims(n_concepts, NCDM_HIDDEN1, NCDM_HIDDEN2, rng)
    }

    /// Xavier-normal weights, zero biases, then clamped to be monotone.
    pub fn with_dims<R: Rng + ?Sized>(n_in: usize, h1: usize, h2: usize, rng: &mut R) -> Self {
        let mut xavier = |rows: usize, cols: usize| {
            let std = (2.0 / (rows + cols) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
        };
        let net = Self {
            w1: xavier(h1, n_in),
            b1: Array1::zeros(h1),
            w2: xavier(h2, h1),
            b2: Array1::zeros(h2),
            w3: xavier(1, h2),
            b3: Array1::zeros(1),
        };
        enforce_monotonicity(net)
    }

    pub fn n_inputs(&self) -> usize {
        self.w1.ncols()
    }

    pub fn forward(&self, x: &Array1<f64>) -> NcdmForward {
        let f1 = (self.w1.dot(x) + &self.b1).mapv(sigmoid);
        let f2 = (self.w2.dot(&f1) + &self.b2).mapv(sigmoid);
        let z3 = self.w3.row(0).dot(&f2) + self.b3[0];
        NcdmForward {
            f1,
            f2,
            p: sigmoid(z3),
        }
    }

    /// Pre-activation of the output unit.
    pub fn output_logit(&self, x: &Array1<f64>) -> f64 {
        let f1 = (self.w1.dot(x) + &self.b1).mapv(sigmoid);
        let f2 = (self.w2.dot(&f1) + &self.b2).mapv(sigmoid);
        self.w3.row(0).dot(&f2) + self.b3[0]
    }

    /// Backpropagates `d_logit = dL/dz3` to the input `x`.
    pub fn input_grad(&self, fwd: &NcdmForward, d_logit: f64) -> Array1<f64> {
        let dz2 = self.w3.row(0).mapv(|w| w * d_logit) * fwd.f2.mapv(sigmoid_grad_from_output);
        let dz1 = self.w2.t().dot(&dz2) * fwd.f1.mapv(sigmoid_grad_from_output);
        self.w1.t().dot(&dz1)
    }

    /// Full backward pass: weight gradients plus `dL/dx`.
    pub fn backward(
        &self,
        x: &Array1<f64>,
        fwd: &NcdmForward,
        d_logit: f64,
    ) -> (NcdmNetGrad, Array1<f64>) {
        let mut acc = NcdmNetGrad::zeros_like(self);
        let dx = self.backward_into(x, fwd, d_logit, &mut acc);
        (acc, dx)
    }

    /// Adds the weight gradients into `acc` and returns `dL/dx`.
    pub fn backward_into(
        &self,
        x: &Array1<f64>,
        fwd: &NcdmForward,
        d_logit: f64,
        acc: &mut NcdmNetGrad,
    ) -> Array1<f64> {
        acc.w3.row_mut(0).scaled_add(d_logit, &fwd.f2);
        acc.b3[0] += d_logit;
        let dz2 = self.w3.row(0).mapv(|w| w * d_logit) * fwd.f2.mapv(sigmoid_grad_from_output);
        add_outer(&mut acc.w2, &dz2, &fwd.f1);
        acc.b2 += &dz2;
        let dz1 = self.w2.t().dot(&dz2) * fwd.f1.mapv(sigmoid_grad_from_output);
        add_outer(&mut acc.w1, &dz1, x);
        acc.b1 += &dz1;
        self.w1.t().dot(&dz1)
    }
}

impl NcdmNetGrad {
    pub fn zeros_like(net: &NcdmNet) -> Self {
        Self {
            w1: Array2::zeros(net.w1.raw_dim()),
            b1: Array1::zeros(net.b1.raw_dim()),
            w2: Array2::zeros(net.w2.raw_dim()),
            b2: Array1::zeros(net.b2.raw_dim()),
            w3: Array2::zeros(net.w3.raw_dim()),
            b3: Array1::zeros(net.b3.raw_dim()),
        }
    }
}

fn add_outer(acc: &mut Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) {
    for (mut row, &ai) in acc.rows_mut().into_iter().zip(a) {
        if ai != 0.0 {
            row.scaled_add(ai, b);
        }
    }
}

/// Clamps negative entries of `W1`, `W2`, `W3` to zero. Biases are untouched.
pub fn enforce_monotonicity(mut net: NcdmNet) -> NcdmNet {
    for w in [&mut net.w1, &mut net.w2, &mut net.w3] {
        w.mapv_inplace(|v| if v < 0.0 { 0.0 } else { v });
    }
    net
}

/// Frozen diagnosis model: per-question parameters plus, for NCDM, the
/// interaction network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdmBundle {
    pub kind: CdmKind,
    /// Proficiency dimension: 1 for IRT, the concept count for NCDM.
    pub dim: usize,
    pub items: Vec<ItemParams>,
    pub net: Option<NcdmNet>,
}

#[derive(Serialize)]
struct FrozenParams<'a> {
    items: &'a [ItemParams],
    net: &'a Option<NcdmNet>,
}

impl CdmBundle {
    pub fn irt(difficulties: Vec<f64>) -> Self {
        Self {
            kind: CdmKind::Irt,
            dim: 1,
            items: difficulties
                .into_iter()
                .map(|difficulty| ItemParams::Irt(IrtItem { difficulty }))
                .collect(),
            net: None,
        }
    }

    pub fn ncdm(items: Vec<NcdmItem>, net: NcdmNet) -> Self {
        Self {
            kind: CdmKind::Ncdm,
            dim: net.n_inputs(),
            items: items.into_iter().map(ItemParams::Ncdm).collect(),
            net: Some(net),
        }
    }

    pub fn item(&self, question: u32) -> &ItemParams {
        &self.items[question as usize]
    }

    pub fn n_questions(&self) -> usize {
        self.items.len()
    }

    /// SHA-256 over the frozen question parameters and network weights.
    pub fn param_hash(&self) -> String {
        json_hash(&FrozenParams {
            items: &self.items,
            net: &self.net,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CdmError> {
        Ok(write_json_atomic(path, self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CdmError> {
        let bytes = std::fs::read(path)?;
        let bundle: CdmBundle = serde_json::from_slice(&bytes)?;
        bundle.validate()?;
        Ok(bundle)
    }

    fn validate(&self) -> Result<(), CdmError> {
        for item in &self.items {
            if item.kind() != self.kind {
                return Err(CdmError::KindMismatch(self.kind));
            }
            if let ItemParams::Ncdm(it) = item {
                check_dim(self.dim, it.concepts.len())?;
                check_dim(self.dim, it.difficulty.len())?;
            }
        }
        match (&self.net, self.kind) {
            (Some(net), CdmKind::Ncdm) => check_dim(self.dim, net.n_inputs()),
            (None, CdmKind::Irt) => check_dim(1, self.dim),
            _ => Err(CdmError::KindMismatch(self.kind)),
        }
    }
}

fn check_dim(expected: usize, got: usize) -> Result<(), CdmError> {
    if expected == got {
        Ok(())
    } else {
        Err(CdmError::Dimension { expected, got })
    }
}

fn ncdm_input(item: &NcdmItem, theta: &[f64]) -> Array1<f64> {
    Array1::from_shape_fn(theta.len(), |k| {
        item.concepts[k] * (theta[k] - item.difficulty[k]) * item.discrimination
    })
}

fn check_inputs(
    bundle: &CdmBundle,
    state: &ProficiencyState,
    item: &ItemParams,
) -> Result<(), CdmError> {
    check_dim(bundle.dim, state.dim())?;
    if item.kind() != bundle.kind {
        return Err(CdmError::KindMismatch(bundle.kind));
    }
    if let ItemParams::Ncdm(it) = item {
        check_dim(bundle.dim, it.concepts.len())?;
        check_dim(bundle.dim, it.difficulty.len())?;
    }
    Ok(())
}

/// Pre-sigmoid output `z` with `p = sigmoid(z)`.
pub fn predict_logit(
    bundle: &CdmBundle,
    state: &ProficiencyState,
    item: &ItemParams,
) -> Result<f64, CdmError> {
    check_inputs(bundle, state, item)?;
    let theta = state.theta();
    Ok(match item {
        ItemParams::Irt(it) => theta[0] - it.difficulty,
        ItemParams::Ncdm(it) => {
            let net = bundle
                .net
                .as_ref()
                .ok_or(CdmError::KindMismatch(bundle.kind))?;
            net.output_logit(&ncdm_input(it, &theta))
        }
    })
}

/// Probability of a correct response.
pub fn predict(
    bundle: &CdmBundle,
    state: &ProficiencyState,
    item: &ItemParams,
) -> Result<f64, CdmError> {
    predict_logit(bundle, state, item).map(sigmoid)
}

/// Binary cross-entropy with `p` clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(y: f64, p: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Gradient of `bce_loss(y, predict(..))` with respect to the raw
/// proficiency, together with the prediction itself.
pub fn loss_and_grad(
    bundle: &CdmBundle,
    state: &ProficiencyState,
    item: &ItemParams,
    y: f64,
) -> Result<(f64, Vec<f64>), CdmError> {
    check_inputs(bundle, state, item)?;
    let theta = state.theta();
    let (p, d_theta) = match item {
        ItemParams::Irt(it) => {
            let p = sigmoid(theta[0] - it.difficulty);
            (p, vec![p - y])
        }
        ItemParams::Ncdm(it) => {
            let net = bundle
                .net
                .as_ref()
                .ok_or(CdmError::KindMismatch(bundle.kind))?;
            let fwd = net.forward(&ncdm_input(it, &theta));
            let dx = net.input_grad(&fwd, fwd.p - y);
            let d = (0..theta.len())
                .map(|k| dx[k] * it.concepts[k] * it.discrimination)
                .collect();
            (fwd.p, d)
        }
    };
    let grad = d_theta
        .iter()
        .zip(&theta)
        .map(|(g, &t)| g * sigmoid_grad_from_output(t))
        .collect();
    Ok((bce_loss(y, p), grad))
}

pub fn grad_theta(
    bundle: &CdmBundle,
    state: &ProficiencyState,
    item: &ItemParams,
    y: f64,
) -> Result<Vec<f64>, CdmError> {
    loss_and_grad(bundle, state, item, y).map(|(_, g)| g)
}

/// Result of [`inner_optimize`].
#[derive(Clone, Debug, PartialEq)]
pub struct InnerFit {
    pub state: ProficiencyState,
    /// Set when there were no responses and the input state was returned.
    pub no_responses: bool,
}

/// `k_steps` full-batch gradient-descent steps on the summed response loss.
pub fn inner_optimize(
    bundle: &CdmBundle,
    theta0: &ProficiencyState,
    responses: &[(&ItemParams, f64)],
    k_steps: usize,
    lr: f64,
) -> Result<InnerFit, CdmError> {
    if k_steps == 0 {
        return Err(CdmError::ZeroSteps);
    }
    if responses.is_empty() {
        return Ok(InnerFit {
            state: theta0.clone(),
            no_responses: true,
        });
    }
    let mut state = theta0.clone();
    let mut total = vec![0.0; state.dim()];
    for _ in 0..k_steps {
        total.iter_mut().for_each(|g| *g = 0.0);
        for (item, y) in responses {
            let g = grad_theta(bundle, &state, item, *y)?;
            total.iter_mut().zip(&g).for_each(|(t, gi)| *t += gi);
        }
        state
            .raw_mut()
            .iter_mut()
            .zip(&total)
            .for_each(|(r, g)| *r -= lr * g);
    }
    Ok(InnerFit {
        state,
        no_responses: false,
    })
}

/// Summed loss over `(item, y)` pairs.
pub fn total_loss(
    bundle: &CdmBundle,
    state: &ProficiencyState,
    responses: &[(&ItemParams, f64)],
) -> Result<f64, CdmError> {
    responses
        .iter()
        .map(|(item, y)| predict(bundle, state, item).map(|p| bce_loss(*y, p)))
        .sum()
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn theta_and_predictions_stay_in_unit_interval(raw in -40.0f64..40.0, b in -3.0f64..3.0) {
            let bundle = CdmBundle::irt(vec![b]);
            let state = ProficiencyState::from_raw(vec![raw]);
            let t = state.theta()[0];
            prop_assert!((0.0..=1.0).contains(&t));
            let p = predict(&bundle, &state, bundle.item(0)).unwrap();
            prop_assert!(p > 0.0 && p < 1.0);
        }

        #[test]
        fn clamped_ncdm_is_monotone(
            seed in any::<u64>(),
            raw in prop::collection::vec(-3.0f64..3.0, 4),
            bump in prop::collection::vec(0.0f64..2.0, 4),
            concepts in prop::collection::vec(0.0f64..=1.0, 4),
        ) {
            let net = enforce_monotonicity(NcdmNet::with_dims(4, 8, 6, &mut stream(Stream::CdmInit, &[seed])));
            let item = NcdmItem { concepts, difficulty: vec![0.5; 4], discrimination: 0.7 };
            let bundle = CdmBundle::ncdm(vec![item], net);
            let lo = ProficiencyState::from_raw(raw.clone());
            let hi = ProficiencyState::from_raw(raw.iter().zip(&bump).map(|(r, d)| r + d).collect());
            let d = predict(&bundle, &hi, bundle.item(0)).unwrap() - predict(&bundle, &lo, bundle.item(0)).unwrap();
            prop_assert!(d >= -1e-9);
        }
    }
}
