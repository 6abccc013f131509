//! Joint fit of examinee proficiencies, question parameters and (for NCDM)
//! network weights on the training examinees' logs.
//!
//! A seeded share of each examinee's log is held out for validation; the
//! checkpoint with the best held-out accuracy is kept. Training proficiencies
//! are discarded once the question parameters are frozen into a bundle.

use ndarray::Array1;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    bce_loss, enforce_monotonicity, CdmBundle, CdmError, CdmKind, NcdmItem, NcdmNet, NcdmNetGrad,
    NCDM_HIDDEN1, NCDM_HIDDEN2,
};
use crate::dataset::{Corpus, Interaction};
use crate::math::{sigmoid, sigmoid_grad_from_output};
use crate::rng::{stream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub kind: CdmKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    /// Share of every examinee's log held out for checkpoint selection.
    pub valid_frac: f64,
    pub hidden: [usize; 2],
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            kind: CdmKind::Irt,
            epochs: 50,
            batch_size: 256,
            lr: 0.002,
            optimizer: Optimizer::Adam,
            patience: 5,
            valid_frac: 0.2,
            hidden: [NCDM_HIDDEN1, NCDM_HIDDEN2],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub valid_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOutcome {
    pub bundle: CdmBundle,
    pub log: Vec<PretrainEpoch>,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
}

impl PretrainOutcome {
    pub fn best(&self) -> &PretrainEpoch {
        &self.log[self.best_epoch - 1]
    }
}

/// Flat parameter block with optimizer state.
struct Block {
    v: Vec<f64>,
    g: Vec<f64>,
    m: Vec<f64>,
    s: Vec<f64>,
    touched: Vec<usize>,
}

impl Block {
    fn new(v: Vec<f64>) -> Self {
        let n = v.len();
        Self {
            v,
            g: vec![0.0; n],
            m: vec![0.0; n],
            s: vec![0.0; n],
            touched: Vec::new(),
        }
    }

    fn add(&mut self, i: usize, g: f64) {
        self.touched.push(i);
        self.g[i] += g;
    }

    fn step(&mut self, opt: &Step) {
        self.touched.sort_unstable();
        self.touched.dedup();
        for &i in &self.touched {
            opt.apply(&mut self.v[i], self.g[i], &mut self.m[i], &mut self.s[i]);
            self.g[i] = 0.0;
        }
        self.touched.clear();
    }
}

struct Step {
    optimizer: Optimizer,
    lr: f64,
    t: i32,
}

impl Step {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn apply(&self, v: &mut f64, g: f64, m: &mut f64, s: &mut f64) {
        match self.optimizer {
            Optimizer::Sgd => *v -= self.lr * g,
            Optimizer::Adam => {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *s = Self::BETA2 * *s + (1.0 - Self::BETA2) * g * g;
                let mh = *m / (1.0 - Self::BETA1.powi(self.t));
                let sh = *s / (1.0 - Self::BETA2.powi(self.t));
                *v -= self.lr * mh / (sh.sqrt() + Self::EPS);
            }
        }
    }
}

/// Dense optimizer state for the network weights.
struct NetState {
    m: NcdmNetGrad,
    s: NcdmNetGrad,
}

impl NetState {
    fn new(net: &NcdmNet) -> Self {
        Self {
            m: NcdmNetGrad::zeros_like(net),
            s: NcdmNetGrad::zeros_like(net),
        }
    }

    fn step(&mut self, net: &mut NcdmNet, grad: &mut NcdmNetGrad, opt: &Step) {
        macro_rules! upd {
            ($f:ident) => {
                for (((v, g), m), s) in net
                    .$f
                    .iter_mut()
                    .zip(grad.$f.iter_mut())
                    .zip(self.m.$f.iter_mut())
                    .zip(self.s.$f.iter_mut())
                {
                    opt.apply(v, *g, m, s);
                    *g = 0.0;
                }
            };
        }
        upd!(w1);
        upd!(b1);
        upd!(w2);
        upd!(b2);
        upd!(w3);
        upd!(b3);
    }
}

struct Model {
    kind: CdmKind,
    dim: usize,
    /// Raw proficiency, `n_examinees * dim`.
    theta: Block,
    /// IRT: difficulty per question. NCDM: raw knowledge difficulty,
    /// `n_questions * dim`.
    item: Block,
    /// NCDM raw discrimination per question.
    disc: Block,
    concepts: Vec<Vec<f64>>,
    net: Option<NcdmNet>,
    net_grad: Option<NcdmNetGrad>,
    net_state: Option<NetState>,
}

impl Model {
    /// Probability for examinee row `e` on question `q`; when `d_loss` is
    /// given, accumulates the gradient of `d_loss * bce` as well.
    fn forward(&mut self, e: usize, q: usize, y: f64, scale: Option<f64>) -> f64 {
        let dim = self.dim;
        match self.kind {
            CdmKind::Irt => {
                let t = sigmoid(self.theta.v[e]);
                let p = sigmoid(t - self.item.v[q]);
                if let Some(scale) = scale {
                    let g = scale * (p - y);
                    self.theta.add(e, g * sigmoid_grad_from_output(t));
                    self.item.add(q, -g);
                }
                p
            }
            CdmKind::Ncdm => {
                let theta: Vec<f64> = self.theta.v[e * dim..(e + 1) * dim]
                    .iter()
                    .map(|&r| sigmoid(r))
                    .collect();
                let hd: Vec<f64> = self.item.v[q * dim..(q + 1) * dim]
                    .iter()
                    .map(|&r| sigmoid(r))
                    .collect();
                let hs = sigmoid(self.disc.v[q]);
                let concepts = &self.concepts[q];
                let x = Array1::from_shape_fn(dim, |k| concepts[k] * (theta[k] - hd[k]) * hs);
                let net = self.net.as_ref().expect("ncdm net");
                let fwd = net.forward(&x);
                if let Some(scale) = scale {
                    let acc = self.net_grad.as_mut().expect("ncdm grad");
                    let dx = net.backward_into(&x, &fwd, scale * (fwd.p - y), acc);
                    let mut d_disc = 0.0;
                    for k in 0..dim {
                        if concepts[k] == 0.0 {
                            continue;
                        }
                        let dxk = dx[k] * concepts[k];
                        self.theta
                            .add(e * dim + k, dxk * hs * sigmoid_grad_from_output(theta[k]));
                        self.item
                            .add(q * dim + k, -dxk * hs * sigmoid_grad_from_output(hd[k]));
                        d_disc += dxk * (theta[k] - hd[k]);
                    }
                    self.disc.add(q, d_disc * sigmoid_grad_from_output(hs));
                }
                fwd.p
            }
        }
    }

    fn step(&mut self, opt: &Step) {
        self.theta.step(opt);
        self.item.step(opt);
        self.disc.step(opt);
        if let (Some(net), Some(grad), Some(state)) = (
            self.net.as_mut(),
            self.net_grad.as_mut(),
            self.net_state.as_mut(),
        ) {
            state.step(net, grad, opt);
            *net = enforce_monotonicity(net.clone());
        }
    }

    fn accuracy(&mut self, data: &[(usize, usize, f64)]) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let hits = data
            .iter()
            .filter(|&&(e, q, y)| {
                let p = self.forward(e, q, y, None);
                (p >= 0.5) == (y == 1.0)
            })
            .count();
        hits as f64 / data.len() as f64
    }

    fn bundle(&self) -> CdmBundle {
        match self.kind {
            CdmKind::Irt => CdmBundle::irt(self.item.v.clone()),
            CdmKind::Ncdm => {
                let dim = self.dim;
                let items = self
                    .concepts
                    .iter()
                    .enumerate()
                    .map(|(q, concepts)| NcdmItem {
                        concepts: concepts.clone(),
                        difficulty: self.item.v[q * dim..(q + 1) * dim]
                            .iter()
                            .map(|&r| sigmoid(r))
                            .collect(),
                        discrimination: sigmoid(self.disc.v[q]),
                    })
                    .collect();
                CdmBundle::ncdm(items, self.net.clone().expect("ncdm net"))
            }
        }
    }
}

/// Fits the diagnosis model on every interaction of `corpus_train`.
pub fn pretrain(
    corpus_train: &Corpus,
    config: &PretrainConfig,
) -> Result<PretrainOutcome, CdmError> {
    if config.batch_size == 0 || config.epochs == 0 || config.lr.is_nan() || config.lr <= 0.0 {
        return Err(CdmError::Config(
            "epochs, batch_size and lr must be positive".into(),
        ));
    }
    if !(0.0..1.0).contains(&config.valid_frac) {
        return Err(CdmError::Config(format!(
            "valid_frac must lie in [0, 1), got {}",
            config.valid_frac
        )));
    }

    let examinees: Vec<u32> = corpus_train.examinee_ids().collect();
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for (row, (id, log)) in corpus_train.logs().enumerate() {
        let n_valid = if log.len() >= 2 {
            ((config.valid_frac * log.len() as f64).round() as usize).min(log.len() - 1)
        } else {
            0
        };
        let mut order: Vec<usize> = (0..log.len()).collect();
        order.shuffle(&mut stream(
            Stream::Pretrain,
            &[config.seed, u64::from(id), 0],
        ));
        for (rank, &i) in order.iter().enumerate() {
            let Interaction { question, .. } = log[i];
            let entry = (row, question as usize, log[i].y());
            if rank < n_valid {
                valid.push(entry);
            } else {
                train.push(entry);
            }
        }
    }
    if train.is_empty() {
        return Err(CdmError::EmptyTraining);
    }
    // shuffling below starts from a canonical order
    train.sort_by_key(|&(e, q, _)| (e, q));

    let n_q = corpus_train.n_questions();
    let dim = match config.kind {
        CdmKind::Irt => 1,
        CdmKind::Ncdm => corpus_train.n_concepts(),
    };
    let mut init_rng = stream(Stream::CdmInit, &[config.seed]);
    let mut model = Model {
        kind: config.kind,
        dim,
        theta: Block::new(vec![0.0; examinees.len() * dim]),
        item: Block::new(vec![
            0.0;
            n_q * if config.kind == CdmKind::Irt { 1 } else { dim }
        ]),
        disc: Block::new(vec![
            0.0;
            if config.kind == CdmKind::Ncdm { n_q } else { 0 }
        ]),
        concepts: Vec::new(),
        net: None,
        net_grad: None,
        net_state: None,
    };
    if config.kind == CdmKind::Ncdm {
        model.concepts = corpus_train
            .questions()
            .iter()
            .map(|q| {
                let mut v = vec![0.0; dim];
                for &c in &q.concepts {
                    v[c as usize] = 1.0;
                }
                v
            })
            .collect();
        let net = NcdmNet::with_dims(dim, config.hidden[0], config.hidden[1], &mut init_rng);
        model.net_grad = Some(NcdmNetGrad::zeros_like(&net));
        model.net_state = Some(NetState::new(&net));
        model.net = Some(net);
    }

    let mut log = Vec::new();
    let mut best: Option<(f64, usize, CdmBundle)> = None;
    let mut stale = 0;
    let mut opt = Step {
        optimizer: config.optimizer,
        lr: config.lr,
        t: 0,
    };
    for epoch in 1..=config.epochs {
        let mut order = train.clone();
        order.shuffle(&mut stream(
            Stream::Pretrain,
            &[config.seed, epoch as u64, 1],
        ));
        let mut loss_sum = 0.0;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &(e, q, y) in batch {
                let p = model.forward(e, q, y, Some(scale));
                batch_loss += bce_loss(y, p);
            }
            if !batch_loss.is_finite() {
                return Err(CdmError::Divergence {
                    epoch,
                    batch: batch_idx,
                });
            }
            loss_sum += batch_loss;
            opt.t += 1;
            model.step(&opt);
        }
        let train_acc = model.accuracy(&train);
        let valid_acc = if valid.is_empty() {
            train_acc
        } else {
            model.accuracy(&valid)
        };
        log.push(PretrainEpoch {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc,
            valid_acc,
        });
        if best.as_ref().is_none_or(|(acc, _, _)| valid_acc > *acc) {
            best = Some((valid_acc, epoch, model.bundle()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let (_, best_epoch, bundle) = best.expect("at least one epoch ran");
    Ok(PretrainOutcome {
        bundle,
        log,
        best_epoch,
    })
}
