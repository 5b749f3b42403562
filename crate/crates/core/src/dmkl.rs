//! Contrastive learning of node weights.
//!
//! Pairs of training videos are labelled `+1` (same class) or `-1`, and the
//! combined kernel is pushed toward `1` on positives and below the margin
//! `m` on negatives:
//!
//! ```text
//! l(k, +1) = (1 - k)^2,   l(k, -1) = max(0, k - m)^2,   E = mean over the batch
//! ```
//!
//! Weights are the softmax of free parameters, so plain gradient steps on
//! the parameters never leave the simplex. In the averaging variant the
//! weights appear twice in every kernel value (once per layer of the
//! two-layer network `sum_p beta_p sum_q beta_q k_pq`); the trainer
//! computes one gradient per copy and averages them, as [`shared_gradient`]
//! describes. [`loss_grad`] returns the exact derivative, which is their
//! sum.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::PooledTree;
use crate::kernels::{CombineVariant, GramMatrix, KernelConfig, KernelError, NodeKernelTable, NodeScope};
use crate::scalar::{dot, ordered_sum, Scalar};
use crate::simplex::{self, SimplexError, SimplexWeights};
use crate::svm::{self, SvmError, SvmModel, TrainConfig};

/// Pairs per parallel work unit; fixed so reductions do not depend on the
/// thread count.
const CHUNK: usize = 128;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum DmklError {
    #[error("pair labels need at least 2 videos, got {0}")]
    TooFewVideos(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss or gradient at iteration {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Simplex(#[from] SimplexError),
    #[error(transparent)]
    Svm(#[from] SvmError),
}

impl DmklError {
    pub fn is_numerical(&self) -> bool {
        match self {
            DmklError::NonFinite(_) => true,
            DmklError::Svm(e) => e.is_numerical(),
            _ => false,
        }
    }
}

/// Video index pairs `(i, j)`, `i < j`, with `y = +1` iff same class.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairBatch {
    pub pairs: Vec<(usize, usize)>,
    pub y: Vec<i8>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.y.iter().filter(|&&y| y > 0).count()
    }
}

fn pair_label(labels: &[usize], i: usize, j: usize) -> i8 {
    if labels[i] == labels[j] {
        1
    } else {
        -1
    }
}

/// Every pair `i < j` in row-major order.
pub fn pair_labels(labels: &[usize]) -> Result<PairBatch, DmklError> {
    let n = labels.len();
    if n < 2 {
        return Err(DmklError::TooFewVideos(n));
    }
    let mut batch = PairBatch::default();
    for i in 0..n {
        for j in i + 1..n {
            batch.pairs.push((i, j));
            batch.y.push(pair_label(labels, i, j));
        }
    }
    Ok(batch)
}

/// Row-major index of pair `(i, j)`, `i < j`, among all pairs of `n` videos.
fn pair_index(i: usize, j: usize, n: usize) -> usize {
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

/// Samples training pairs without replacement inside one batch.
/// Positive pairs, negative pairs and the target positive share.
type Rebalance = (Vec<(usize, usize)>, Vec<(usize, usize)>, f64);

pub struct PairSampler {
    labels: Vec<usize>,
    rng: ChaCha8Rng,
    /// Positive and negative pair lists, present when rebalancing.
    split: Option<Rebalance>,
    all: Vec<(usize, usize)>,
}

impl PairSampler {
    pub fn new(labels: &[usize], seed: u64, positive_fraction: Option<f64>) -> Result<Self, DmklError> {
        let all = pair_labels(labels)?;
        let split = match positive_fraction {
            Some(f) => {
                if !(f > 0.0 && f < 1.0) {
                    return Err(DmklError::Config(format!(
                        "positive fraction must lie in (0, 1), got {f}"
                    )));
                }
                let (pos, neg): (Vec<_>, Vec<_>) = all.pairs.iter().zip(&all.y).partition(|(_, &y)| y > 0);
                let pos: Vec<(usize, usize)> = pos.into_iter().map(|(p, _)| *p).collect();
                let neg: Vec<(usize, usize)> = neg.into_iter().map(|(p, _)| *p).collect();
                if pos.is_empty() || neg.is_empty() {
                    return Err(DmklError::Config(
                        "rebalancing needs both positive and negative pairs".into(),
                    ));
                }
                Some((pos, neg, f))
            }
            None => None,
        };
        Ok(Self {
            labels: labels.to_vec(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            split,
            all: all.pairs,
        })
    }

    pub fn total_pairs(&self) -> usize {
        self.all.len()
    }

    pub fn sample(&mut self, size: usize) -> PairBatch {
        let mut pairs = match &self.split {
            None => pick(&mut self.rng, &self.all, size),
            Some((pos, neg, f)) => {
                let want = size.min(pos.len() + neg.len());
                let n_pos =
                    ((want as f64 * f).round() as usize).clamp(want.saturating_sub(neg.len()), pos.len().min(want));
                let mut p = pick(&mut self.rng, pos, n_pos);
                p.extend(pick(&mut self.rng, neg, want - n_pos));
                p
            }
        };
        pairs.sort_unstable();
        let y = pairs.iter().map(|&(i, j)| pair_label(&self.labels, i, j)).collect();
        PairBatch { pairs, y }
    }
}

fn pick(rng: &mut ChaCha8Rng, from: &[(usize, usize)], size: usize) -> Vec<(usize, usize)> {
    let size = size.min(from.len());
    index::sample(rng, from.len(), size)
        .into_iter()
        .map(|k| from[k])
        .collect()
}

/// Per-pair loss; `y` is `+1` or `-1`.
#[inline]
fn pair_loss<F: Scalar>(k: F, y: i8, margin: F) -> F {
    let r = if y > 0 {
        F::one() - k
    } else {
        (k - margin).max(F::zero())
    };
    r * r
}

/// `d l / d k`.
#[inline]
fn pair_loss_grad<F: Scalar>(k: F, y: i8, margin: F) -> F {
    let two = F::lit(2.0);
    if y > 0 {
        -two * (F::one() - k)
    } else {
        two * (k - margin).max(F::zero())
    }
}

pub fn contrastive_loss<F: Scalar>(k_vals: &[F], y: &[i8], margin: F) -> Result<F, DmklError> {
    if k_vals.len() != y.len() || k_vals.is_empty() {
        return Err(DmklError::ShapeMismatch(format!(
            "{} kernel values for {} pair labels",
            k_vals.len(),
            y.len()
        )));
    }
    Ok(ordered_sum(k_vals.iter().zip(y).map(|(&k, &y)| pair_loss(k, y, margin))) / F::lit(k_vals.len() as f64))
}

/// Loss and the gradient with respect to each copy of the weights.
struct BatchTerms<F> {
    loss: F,
    /// One `dE/dbeta` per layer copy.
    copies: Vec<Vec<F>>,
}

fn batch_terms<F: Scalar>(
    table: &NodeKernelTable<F>,
    batch: &PairBatch,
    beta: &[F],
    variant: CombineVariant,
    margin: F,
) -> Result<BatchTerms<F>, DmklError> {
    check_batch(table, batch, beta, variant)?;
    let nodes = beta.len();
    let copies = match variant {
        CombineVariant::Concatenation => 1,
        CombineVariant::Averaging => 2,
    };
    let parts: Vec<(F, Vec<F>)> = batch
        .pairs
        .par_chunks(CHUNK)
        .zip(batch.y.par_chunks(CHUNK))
        .map(|(pairs, ys)| {
            let mut loss = F::zero();
            let mut acc = vec![F::zero(); copies * nodes];
            let mut row = vec![F::zero(); nodes];
            let mut col = vec![F::zero(); nodes];
            for (&(i, j), &y) in pairs.iter().zip(ys) {
                let block = table.block(i, j);
                let k = match variant {
                    CombineVariant::Concatenation => {
                        node_diagonal(&block, table.scope(), nodes, &mut row);
                        dot(beta, &row)
                    }
                    CombineVariant::Averaging => {
                        // layer copies: row_p = sum_q beta_q k_pq, col_q = sum_p beta_p k_pq
                        col.iter_mut().for_each(|c| *c = F::zero());
                        for (p, r) in row.iter_mut().enumerate() {
                            let kp = &block[p * nodes..(p + 1) * nodes];
                            *r = dot(beta, kp);
                            for (c, &kv) in col.iter_mut().zip(kp) {
                                *c = *c + beta[p] * kv;
                            }
                        }
                        dot(beta, &row)
                    }
                };
                loss = loss + pair_loss(k, y, margin);
                let d = pair_loss_grad(k, y, margin);
                for (a, &r) in acc[..nodes].iter_mut().zip(&row) {
                    *a = *a + d * r;
                }
                if copies == 2 {
                    for (a, &c) in acc[nodes..].iter_mut().zip(&col) {
                        *a = *a + d * c;
                    }
                }
            }
            (loss, acc)
        })
        .collect();
    let scale = F::one() / F::lit(batch.len() as f64);
    let loss = ordered_sum(parts.iter().map(|(l, _)| *l)) * scale;
    let copies = (0..copies)
        .map(|c| {
            (0..nodes)
                .map(|p| ordered_sum(parts.iter().map(|(_, a)| a[c * nodes + p])) * scale)
                .collect()
        })
        .collect();
    Ok(BatchTerms { loss, copies })
}

fn node_diagonal<F: Scalar>(block: &[F], scope: NodeScope, nodes: usize, out: &mut [F]) {
    match scope {
        NodeScope::Aligned => out.copy_from_slice(block),
        NodeScope::Cross => {
            for (p, o) in out.iter_mut().enumerate() {
                *o = block[p * nodes + p];
            }
        }
    }
}

fn check_batch<F: Scalar>(
    table: &NodeKernelTable<F>,
    batch: &PairBatch,
    beta: &[F],
    variant: CombineVariant,
) -> Result<(), DmklError> {
    if batch.is_empty() || batch.pairs.len() != batch.y.len() {
        return Err(DmklError::ShapeMismatch("empty or ragged pair batch".into()));
    }
    if beta.len() != table.node_count() {
        return Err(DmklError::ShapeMismatch(format!(
            "{} weights for {} nodes",
            beta.len(),
            table.node_count()
        )));
    }
    if variant == CombineVariant::Averaging && table.scope() == NodeScope::Aligned {
        return Err(DmklError::ShapeMismatch(
            "averaging needs a cross-node kernel table".into(),
        ));
    }
    let n = table.len();
    if let Some(&(i, j)) = batch.pairs.iter().find(|&&(i, j)| i >= n || j >= n) {
        return Err(DmklError::ShapeMismatch(format!("pair ({i}, {j}) outside {n} videos")));
    }
    Ok(())
}

/// Batch loss at `weights`.
pub fn batch_loss<F: Scalar>(
    table: &NodeKernelTable<F>,
    batch: &PairBatch,
    beta: &[F],
    variant: CombineVariant,
    margin: F,
) -> Result<F, DmklError> {
    check_batch(table, batch, beta, variant)?;
    let k: Vec<F> = batch
        .pairs
        .par_iter()
        .map(|&(i, j)| {
            let block = table.block(i, j);
            match variant {
                CombineVariant::Concatenation => {
                    let mut diag = vec![F::zero(); beta.len()];
                    node_diagonal(&block, table.scope(), beta.len(), &mut diag);
                    dot(beta, &diag)
                }
                CombineVariant::Averaging => {
                    let n = beta.len();
                    ordered_sum((0..n).map(|p| beta[p] * dot(beta, &block[p * n..(p + 1) * n])))
                }
            }
        })
        .collect();
    contrastive_loss(&k, &batch.y, margin)
}

/// Loss and exact `dE/draw` through the softmax reparametrisation.
pub fn loss_grad<F: Scalar>(
    table: &NodeKernelTable<F>,
    batch: &PairBatch,
    weights: &SimplexWeights<F>,
    variant: CombineVariant,
    margin: F,
) -> Result<(F, Vec<F>), DmklError> {
    let terms = batch_terms(table, batch, weights.beta(), variant, margin)?;
    let nodes = weights.len();
    let de_dbeta: Vec<F> = (0..nodes)
        .map(|p| ordered_sum(terms.copies.iter().map(|c| c[p])))
        .collect();
    Ok((
        terms.loss,
        simplex::backprop_through_simplex(&de_dbeta, weights.beta())?,
    ))
}

/// Update direction of the layered network: each copy of the weights is
/// back-propagated through the reparametrisation on its own and the copies
/// are averaged. Equals [`loss_grad`] divided by the number of copies (two
/// for averaging, one for concatenation).
pub fn shared_gradient<F: Scalar>(
    table: &NodeKernelTable<F>,
    batch: &PairBatch,
    weights: &SimplexWeights<F>,
    variant: CombineVariant,
    margin: F,
) -> Result<(F, Vec<F>), DmklError> {
    let terms = batch_terms(table, batch, weights.beta(), variant, margin)?;
    let per_copy = terms
        .copies
        .iter()
        .map(|c| simplex::backprop_through_simplex(c, weights.beta()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((terms.loss, simplex::accumulate_shared(&per_copy)?))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
    /// Plain gradient descent.
    Sgd,
}

impl std::str::FromStr for Optimizer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adam" => Ok(Optimizer::Adam),
            "sgd" | "gd" => Ok(Optimizer::Sgd),
            other => Err(format!("unknown optimizer '{other}' (expected adam or sgd)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub lr: f64,
    /// Pairs per batch.
    pub batch: usize,
    pub iters: usize,
    pub margin: f64,
    pub seed: u64,
    /// Target share of positive pairs per batch; `None` samples pairs
    /// uniformly.
    pub positive_fraction: Option<f64>,
    pub optimizer: Optimizer,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            lr: 0.0005,
            batch: 2048,
            iters: 4000,
            margin: 0.0,
            seed: 0,
            positive_fraction: None,
            optimizer: Optimizer::Adam,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), DmklError> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(DmklError::Config(format!(
                "learning rate must be non-negative, got {}",
                self.lr
            )));
        }
        if self.batch == 0 {
            return Err(DmklError::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(DmklError::Config(format!(
                "margin must lie in [0, 1), got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

/// First and second moment estimates of the adaptive optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentState<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub step: u64,
}

impl<F: Scalar> MomentState<F> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![F::zero(); len],
            v: vec![F::zero(); len],
            step: 0,
        }
    }

    /// Bias-corrected update `-lr m_hat / (sqrt(v_hat) + eps)`.
    pub fn update(&mut self, grad: &[F], lr: F) -> Vec<F> {
        self.step += 1;
        let (b1, b2) = (F::lit(ADAM_BETA1), F::lit(ADAM_BETA2));
        let c1 = F::one() - b1.powi(self.step as i32);
        let c2 = F::one() - b2.powi(self.step as i32);
        let eps = F::lit(ADAM_EPS);
        grad.iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|(&g, (m, v))| {
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                -lr * (*m / c1) / ((*v / c2).sqrt() + eps)
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DmklTrace {
    /// Loss of each training batch, before its update.
    pub batch_loss: Vec<f64>,
    /// Loss on a fixed evaluation batch, initially and after every update.
    pub eval_loss: Vec<f64>,
    /// Weights initially and after every update.
    pub betas: Vec<Vec<f64>>,
    pub entropy: Vec<f64>,
    /// Distinct training pairs seen over the run.
    pub distinct_pairs: usize,
    pub total_pairs: usize,
}

impl DmklTrace {
    pub fn initial_loss(&self) -> f64 {
        self.eval_loss.first().copied().unwrap_or(f64::NAN)
    }

    pub fn final_loss(&self) -> f64 {
        self.eval_loss.last().copied().unwrap_or(f64::NAN)
    }

    fn push<F: Scalar>(&mut self, eval: F, weights: &SimplexWeights<F>) {
        self.eval_loss.push(eval.as_f64());
        self.betas.push(weights.beta().iter().map(|b| b.as_f64()).collect());
        self.entropy.push(weights.entropy().as_f64());
    }
}

#[derive(Clone, Debug)]
pub struct DmklFit<F> {
    pub weights: SimplexWeights<F>,
    pub trace: DmklTrace,
}

pub fn dmkl_fit<F: Scalar>(
    trees: &[PooledTree<F>],
    labels: &[usize],
    variant: CombineVariant,
    kernel: &KernelConfig,
    cfg: &ContrastiveConfig,
) -> Result<DmklFit<F>, DmklError> {
    let table = NodeKernelTable::build(trees, kernel, NodeScope::from(variant))?;
    dmkl_fit_table(&table, labels, variant, cfg)
}

/// [`dmkl_fit`] on a prebuilt kernel table.
pub fn dmkl_fit_table<F: Scalar>(
    table: &NodeKernelTable<F>,
    labels: &[usize],
    variant: CombineVariant,
    cfg: &ContrastiveConfig,
) -> Result<DmklFit<F>, DmklError> {
    cfg.validate()?;
    if labels.len() != table.len() {
        return Err(DmklError::ShapeMismatch(format!(
            "{} labels for {} videos",
            labels.len(),
            table.len()
        )));
    }
    crate::mkl_em::class_count(labels)?;
    let nodes = table.node_count();
    let n = labels.len();
    let margin = F::lit(cfg.margin);
    let lr = F::lit(cfg.lr);

    let mut sampler = PairSampler::new(labels, cfg.seed, cfg.positive_fraction)?;
    let eval = PairSampler::new(labels, cfg.seed ^ 0x9e37_79b9_7f4a_7c15, cfg.positive_fraction)?.sample(cfg.batch);
    let mut seen = vec![false; sampler.total_pairs()];

    let mut weights = SimplexWeights::from_raw(vec![F::zero(); nodes])?;
    let mut moments = MomentState::new(nodes);
    let mut trace = DmklTrace {
        total_pairs: sampler.total_pairs(),
        ..DmklTrace::default()
    };
    trace.push(batch_loss(table, &eval, weights.beta(), variant, margin)?, &weights);
    if nodes == 1 {
        return Ok(DmklFit { weights, trace });
    }

    for iteration in 1..=cfg.iters {
        let batch = sampler.sample(cfg.batch);
        for &(i, j) in &batch.pairs {
            seen[pair_index(i, j, n)] = true;
        }
        let (loss, grad) = shared_gradient(table, &batch, &weights, variant, margin)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(DmklError::NonFinite(iteration));
        }
        let delta = match cfg.optimizer {
            Optimizer::Adam => moments.update(&grad, lr),
            Optimizer::Sgd => grad.iter().map(|&g| -lr * g).collect(),
        };
        let raw: Vec<F> = weights
            .raw()
            .expect("contrastive weights are parametrised")
            .iter()
            .zip(&delta)
            .map(|(&r, &d)| r + d)
            .collect();
        weights.set_raw(raw)?;
        simplex::check_simplex(weights.beta(), simplex::SIMPLEX_TOL)?;
        trace.batch_loss.push(loss.as_f64());
        trace.push(batch_loss(table, &eval, weights.beta(), variant, margin)?, &weights);
    }
    trace.distinct_pairs = seen.iter().filter(|&&s| s).count();
    Ok(DmklFit { weights, trace })
}

#[derive(Clone, Debug)]
pub struct DmklModel<F> {
    pub weights: SimplexWeights<F>,
    pub model: SvmModel<F>,
    pub gram: GramMatrix<F>,
    pub trace: DmklTrace,
}

/// Learns the weights, freezes them and trains one-vs-rest machines on the
/// resulting kernel.
pub fn dmkl_then_svm<F: Scalar>(
    trees: &[PooledTree<F>],
    labels: &[usize],
    variant: CombineVariant,
    kernel: &KernelConfig,
    cfg: &ContrastiveConfig,
    svm_cfg: &TrainConfig,
) -> Result<DmklModel<F>, DmklError> {
    let table = NodeKernelTable::build(trees, kernel, NodeScope::from(variant))?;
    let fit = dmkl_fit_table(&table, labels, variant, cfg)?;
    let gram = table.gram(fit.weights.beta(), variant)?;
    let classes = crate::mkl_em::class_count(labels)?;
    let model = svm::train_one_vs_rest(&gram, labels, classes, svm_cfg)?;
    Ok(DmklModel {
        weights: fit.weights,
        model,
        gram,
        trace: fit.trace,
    })
}
