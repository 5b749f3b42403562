//! Alternating optimisation of node weights and SVM duals.
//!
//! With the weights fixed, every one-vs-rest dual is solved by [`crate::svm`].
//! With the duals fixed, the objective is linear in `beta` for the
//! concatenation variant and quadratic for averaging, and a conditional
//! gradient step over the simplex updates the weights.
//!
//! Two readings of the joint problem are available through [`EmSense`]:
//!
//! * [`EmSense::Margin`] (default) minimises over `beta` the optimal SVM
//!   dual value `J(beta) = max_a sum(a) - 1/2 a'Q_beta a`, summed over
//!   classes. Its gradient is `-c` (concatenation) or `-M beta` (averaging),
//!   the step is a Frank-Wolfe move with backtracking on the re-solved `J`,
//!   and the trace records `J`. Weight moves toward the nodes where the
//!   classes are best separated.
//! * [`EmSense::Joint`] minimises `f(a, beta) = 1/2 a'Q_beta a - sum(a)`
//!   over both blocks: a damped LP vertex step or an exact-line-search
//!   Frank-Wolfe step on `beta`, then a warm-started SVM solve. The trace
//!   records `f`.
//!
//! Either way every recorded objective is no larger than the previous one.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::PooledTree;
use crate::kernels::{CombineVariant, KernelConfig, KernelError, NodeKernelTable, NodeScope};
use crate::linalg;
use crate::scalar::{ordered_sum, Scalar};
use crate::simplex::{self, SimplexError, SimplexWeights};
use crate::svm::{self, SvmError, SvmModel, TrainConfig};

/// Most negative eigenvalue accepted for the averaging coefficient matrix.
pub const PSD_TOL: f64 = -1e-8;

/// Frank-Wolfe gap below which a weight step is skipped.
pub const FW_GAP_TOL: f64 = 1e-10;

/// Sufficient-decrease constant of the backtracking search.
const ARMIJO: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum EmError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite weight coefficient at node {0}")]
    NonFinite(usize),
    #[error("coefficient matrix is not positive semi-definite (min eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("iteration {iteration}: {source}")]
    Svm {
        iteration: usize,
        #[source]
        source: SvmError,
    },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Simplex(#[from] SimplexError),
}

impl EmError {
    pub fn is_numerical(&self) -> bool {
        match self {
            EmError::NotPsd(_) | EmError::NonFinite(_) => true,
            EmError::Svm { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmSense {
    #[default]
    Margin,
    Joint,
}

impl std::str::FromStr for EmSense {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "margin" => Ok(EmSense::Margin),
            "joint" => Ok(EmSense::Joint),
            other => Err(format!("unknown sense '{other}' (expected margin or joint)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iters: usize,
    pub param_tol: f64,
    /// Largest fraction of the way toward the selected vertex per step.
    pub eta: f64,
    #[serde(default)]
    pub sense: EmSense,
    /// Step halvings tried before a margin step is abandoned.
    pub max_backtracks: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            param_tol: 1e-4,
            eta: 0.5,
            sense: EmSense::Margin,
            max_backtracks: 12,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<(), EmError> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(EmError::Config(format!("eta must lie in (0, 1], got {}", self.eta)));
        }
        if !(self.param_tol > 0.0 && self.param_tol.is_finite()) {
            return Err(EmError::Config(format!(
                "param_tol must be positive, got {}",
                self.param_tol
            )));
        }
        Ok(())
    }
}

/// Weight-subproblem coefficients for fixed duals.
#[derive(Clone, Debug, PartialEq)]
pub enum BetaCoefficients<F> {
    /// `c_p = 1/2 sum_c (a y)' K_p (a y)`; the dual is `sum_p beta_p c_p - sum(a)`.
    Linear(Vec<F>),
    /// Row-major `M_pq = sum_c (a y)' K_pq (a y)`; the dual is
    /// `1/2 beta' M beta - sum(a)`.
    Quadratic { nodes: usize, data: Vec<F> },
}

impl<F: Scalar> BetaCoefficients<F> {
    /// Quadratic part of the dual at `beta`.
    pub fn value(&self, beta: &[F]) -> F {
        match self {
            BetaCoefficients::Linear(c) => crate::scalar::dot(c, beta),
            BetaCoefficients::Quadratic { nodes, data } => F::lit(0.5) * quad_form(data, *nodes, beta),
        }
    }

    /// Gradient of [`value`](Self::value) with respect to `beta`.
    pub fn gradient(&self, beta: &[F]) -> Vec<F> {
        match self {
            BetaCoefficients::Linear(c) => c.clone(),
            BetaCoefficients::Quadratic { nodes, data } => mat_vec(data, *nodes, beta),
        }
    }
}

fn mat_vec<F: Scalar>(m: &[F], n: usize, x: &[F]) -> Vec<F> {
    (0..n).map(|p| crate::scalar::dot(&m[p * n..(p + 1) * n], x)).collect()
}

fn quad_form<F: Scalar>(m: &[F], n: usize, x: &[F]) -> F {
    crate::scalar::dot(x, &mat_vec(m, n, x))
}

/// Coefficients of the weight subproblem for the duals in `model`.
pub fn beta_objective_coeffs<F: Scalar>(
    table: &NodeKernelTable<F>,
    model: &SvmModel<F>,
    variant: CombineVariant,
) -> Result<BetaCoefficients<F>, EmError> {
    let n = table.len();
    let nodes = table.node_count();
    if model.machines.iter().any(|m| m.alpha.len() != n || m.y.len() != n) {
        return Err(EmError::ShapeMismatch(format!(
            "duals do not cover the {n} videos of the kernel table"
        )));
    }
    if variant == CombineVariant::Averaging && table.scope() == NodeScope::Aligned {
        return Err(EmError::ShapeMismatch(
            "averaging needs a cross-node kernel table".into(),
        ));
    }
    // signed duals restricted to the support of each machine
    let signed: Vec<Vec<(usize, F)>> = model
        .machines
        .iter()
        .map(|m| m.support().map(|i| (i, m.alpha[i] * m.y[i])).collect())
        .collect();
    let form = |p: usize, q: usize| {
        ordered_sum(signed.iter().map(|v| {
            ordered_sum(
                v.iter()
                    .map(|&(i, vi)| vi * ordered_sum(v.iter().map(|&(j, vj)| vj * table.node_kernel(i, j, p, q)))),
            )
        }))
    };
    Ok(match variant {
        CombineVariant::Concatenation => {
            BetaCoefficients::Linear((0..nodes).map(|p| F::lit(0.5) * form(p, p)).collect())
        }
        CombineVariant::Averaging => {
            let mut data = vec![F::zero(); nodes * nodes];
            for p in 0..nodes {
                for q in p..nodes {
                    let v = form(p, q);
                    data[p * nodes + q] = v;
                    data[q * nodes + p] = v;
                }
            }
            BetaCoefficients::Quadratic { nodes, data }
        }
    })
}

fn argmin_first<F: Scalar>(v: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

fn check_coeffs<F: Scalar>(coeffs: &[F], beta_prev: &[F], eta: f64) -> Result<(), EmError> {
    if coeffs.len() != beta_prev.len() || coeffs.is_empty() {
        return Err(EmError::ShapeMismatch(format!(
            "{} coefficients for {} weights",
            coeffs.len(),
            beta_prev.len()
        )));
    }
    if let Some(p) = coeffs.iter().position(|c| !c.is_finite()) {
        return Err(EmError::NonFinite(p));
    }
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(EmError::Config(format!("eta must lie in (0, 1], got {eta}")));
    }
    simplex::check_simplex(beta_prev, simplex::SIMPLEX_TOL)?;
    Ok(())
}

fn mix_toward<F: Scalar>(beta: &[F], vertex: usize, step: F) -> Vec<F> {
    beta.iter()
        .enumerate()
        .map(|(p, &b)| {
            let e = if p == vertex { F::one() } else { F::zero() };
            (F::one() - step) * b + step * e
        })
        .collect()
}

/// Damped LP step: `(1 - eta) beta_prev + eta e_s` with `s = argmin c`
/// (ties to the smallest index).
pub fn beta_step_concat<F: Scalar>(coeffs: &[F], beta_prev: &[F], eta: f64) -> Result<Vec<F>, EmError> {
    check_coeffs(coeffs, beta_prev, eta)?;
    Ok(mix_toward(beta_prev, argmin_first(coeffs), F::lit(eta)))
}

/// One Frank-Wolfe step on `1/2 beta' M beta` with the exact line search
/// clipped to `[0, eta]`.
pub fn beta_step_averaging<F: Scalar>(m: &[F], beta_prev: &[F], eta: f64) -> Result<Vec<F>, EmError> {
    let n = beta_prev.len();
    if m.len() != n * n {
        return Err(EmError::ShapeMismatch(format!(
            "{} matrix entries for {n} weights",
            m.len()
        )));
    }
    if let Some(p) = m.iter().position(|c| !c.is_finite()) {
        return Err(EmError::NonFinite(p / n.max(1)));
    }
    let min_eig = linalg::min_eigenvalue(m, n);
    if min_eig < PSD_TOL {
        return Err(EmError::NotPsd(min_eig));
    }
    let grad = mat_vec(m, n, beta_prev);
    check_coeffs(&grad, beta_prev, eta)?;
    let s = argmin_first(&grad);
    let gap = crate::scalar::dot(&grad, beta_prev) - grad[s];
    if gap.as_f64() <= FW_GAP_TOL {
        return Ok(beta_prev.to_vec());
    }
    // d = e_s - beta; curvature d'Md
    let d: Vec<F> = beta_prev
        .iter()
        .enumerate()
        .map(|(p, &b)| if p == s { F::one() - b } else { -b })
        .collect();
    let curvature = quad_form(m, n, &d);
    let eta = F::lit(eta);
    let step = if curvature > F::zero() {
        (gap / curvature).min(eta)
    } else {
        eta
    };
    Ok(mix_toward(beta_prev, s, step))
}

/// Per-iteration record of an alternating run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    pub sense: EmSense,
    /// Objective at `(alpha_t, beta_t)`, starting with the initial weights.
    pub objective: Vec<f64>,
    /// Weights after every iteration, starting with the initial weights.
    pub betas: Vec<Vec<f64>>,
    /// Shannon entropy of each entry of `betas`.
    pub entropy: Vec<f64>,
    /// Rejected trial steps of the margin backtracking, summed.
    pub backtracks: usize,
    pub converged: bool,
}

impl EmTrace {
    fn push<F: Scalar>(&mut self, objective: F, weights: &SimplexWeights<F>) {
        self.objective.push(objective.as_f64());
        self.betas.push(weights.beta().iter().map(|b| b.as_f64()).collect());
        self.entropy.push(weights.entropy().as_f64());
    }

    /// Iterations performed.
    pub fn iterations(&self) -> usize {
        self.objective.len().saturating_sub(1)
    }

    /// Largest increase between consecutive objective values (`<= 0` for a
    /// monotone run).
    pub fn max_increase(&self) -> f64 {
        self.objective
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Joint iterate of the alternation.
#[derive(Clone, Debug)]
pub struct EmState<F> {
    pub weights: SimplexWeights<F>,
    pub model: SvmModel<F>,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub struct EmFit<F> {
    pub weights: SimplexWeights<F>,
    pub model: SvmModel<F>,
    pub trace: EmTrace,
}

/// Number of classes for labels in `1..=C`; fails unless at least two
/// classes occur.
pub fn class_count(labels: &[usize]) -> Result<usize, SvmError> {
    let c = labels.iter().copied().max().unwrap_or(0);
    if labels.iter().any(|&l| l != labels[0]) {
        Ok(c)
    } else {
        Err(SvmError::TooFewClasses(usize::from(c > 0)))
    }
}

pub fn em_fit<F: Scalar>(
    trees: &[PooledTree<F>],
    labels: &[usize],
    variant: CombineVariant,
    kernel: &KernelConfig,
    em: &EmConfig,
    svm_cfg: &TrainConfig,
) -> Result<EmFit<F>, EmError> {
    let table = NodeKernelTable::build(trees, kernel, NodeScope::from(variant))?;
    em_fit_table(&table, labels, variant, em, svm_cfg)
}

/// [`em_fit`] on a prebuilt kernel table.
pub fn em_fit_table<F: Scalar>(
    table: &NodeKernelTable<F>,
    labels: &[usize],
    variant: CombineVariant,
    em: &EmConfig,
    svm_cfg: &TrainConfig,
) -> Result<EmFit<F>, EmError> {
    em.validate()?;
    svm_cfg
        .validate()
        .map_err(|source| EmError::Svm { iteration: 0, source })?;
    if labels.len() != table.len() {
        return Err(EmError::ShapeMismatch(format!(
            "{} labels for {} videos",
            labels.len(),
            table.len()
        )));
    }
    let classes = class_count(labels).map_err(|source| EmError::Svm { iteration: 0, source })?;
    let nodes = table.node_count();
    let solver = Solver {
        table,
        labels,
        classes,
        variant,
        sense: em.sense,
        svm_cfg,
    };

    let weights = SimplexWeights::<F>::uniform(nodes);
    let model = solver.solve(weights.beta(), None, 0)?;
    let mut state = EmState {
        weights,
        model,
        iterations: 0,
    };
    let mut trace = EmTrace {
        sense: em.sense,
        ..EmTrace::default()
    };
    trace.push(solver.objective(&state.model), &state.weights);
    if nodes == 1 {
        trace.converged = true;
        return Ok(EmFit {
            weights: state.weights,
            model: state.model,
            trace,
        });
    }

    while state.iterations < em.max_iters {
        let iteration = state.iterations + 1;
        let coeffs = beta_objective_coeffs(table, &state.model, variant)?;
        let next = match em.sense {
            EmSense::Margin => margin_step(&solver, &state, &coeffs, em, &mut trace, iteration)?,
            EmSense::Joint => {
                let beta = match &coeffs {
                    BetaCoefficients::Linear(c) => beta_step_concat(c, state.weights.beta(), em.eta)?,
                    BetaCoefficients::Quadratic { data, .. } => {
                        beta_step_averaging(data, state.weights.beta(), em.eta)?
                    }
                };
                let model = solver.solve(&beta, Some(&state.model), iteration)?;
                Some((beta, model))
            }
        };
        let Some((beta, model)) = next else {
            trace.converged = true;
            break;
        };
        let weights = SimplexWeights::from_beta(beta)?;
        let d_beta = max_abs_diff(weights.beta(), state.weights.beta());
        let d_alpha = state
            .model
            .machines
            .iter()
            .zip(&model.machines)
            .map(|(a, b)| max_abs_diff(&a.alpha, &b.alpha))
            .fold(0.0, f64::max);
        state = EmState {
            weights,
            model,
            iterations: iteration,
        };
        trace.push(solver.objective(&state.model), &state.weights);
        if d_beta < em.param_tol && d_alpha < em.param_tol {
            trace.converged = true;
            break;
        }
    }
    Ok(EmFit {
        weights: state.weights,
        model: state.model,
        trace,
    })
}

struct Solver<'a, F> {
    table: &'a NodeKernelTable<F>,
    labels: &'a [usize],
    classes: usize,
    variant: CombineVariant,
    sense: EmSense,
    svm_cfg: &'a TrainConfig,
}

impl<F: Scalar> Solver<'_, F> {
    fn solve(&self, beta: &[F], warm: Option<&SvmModel<F>>, iteration: usize) -> Result<SvmModel<F>, EmError> {
        let k = self.table.gram(beta, self.variant)?;
        svm::train_one_vs_rest_from(&k, self.labels, self.classes, self.svm_cfg, warm)
            .map_err(|source| EmError::Svm { iteration, source })
    }

    fn objective(&self, model: &SvmModel<F>) -> F {
        match self.sense {
            EmSense::Margin => -model.objective(),
            EmSense::Joint => model.objective(),
        }
    }
}

/// Weights and machines of an accepted margin step.
type Accepted<F> = (Vec<F>, SvmModel<F>);

/// Frank-Wolfe step on `J(beta)` with backtracking; `None` when no step
/// decreases `J`.
fn margin_step<F: Scalar>(
    solver: &Solver<'_, F>,
    state: &EmState<F>,
    coeffs: &BetaCoefficients<F>,
    em: &EmConfig,
    trace: &mut EmTrace,
    iteration: usize,
) -> Result<Option<Accepted<F>>, EmError> {
    let beta = state.weights.beta();
    // Danskin: dJ/dbeta is minus the gradient of the quadratic part
    let grad: Vec<F> = coeffs.gradient(beta).into_iter().map(|g| -g).collect();
    let s = argmin_first(&grad);
    let gap = (crate::scalar::dot(&grad, beta) - grad[s]).as_f64();
    if gap <= FW_GAP_TOL {
        return Ok(None);
    }
    let current = solver.objective(&state.model).as_f64();
    let mut step = em.eta;
    for _ in 0..=em.max_backtracks {
        let candidate = beta_step_concat(&grad, beta, step)?;
        let model = solver.solve(&candidate, Some(&state.model), iteration)?;
        if solver.objective(&model).as_f64() <= current - ARMIJO * step * gap {
            return Ok(Some((candidate, model)));
        }
        trace.backtracks += 1;
        step *= 0.5;
    }
    Ok(None)
}

fn max_abs_diff<F: Scalar>(a: &[F], b: &[F]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs().as_f64())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Stream;
    use crate::svm::BinaryMachine;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_trees(n: usize, depth: usize, dim: usize, seed: u64) -> Vec<PooledTree<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes = (1 << depth) - 1;
        (0..n)
            .map(|i| {
                let v = (0..nodes * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                PooledTree::from_node_vectors(format!("v{i}"), Stream::Appearance, depth, dim, v).unwrap()
            })
            .collect()
    }

    fn random_model(n: usize, classes: usize, seed: u64) -> (SvmModel<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % classes + 1).collect();
        let machines = (1..=classes)
            .map(|c| BinaryMachine {
                class: c,
                alpha: (0..n).map(|_| rng.random_range(0.0..2.0)).collect(),
                y: svm::class_targets(&labels, c),
                b: 0.0,
                objective: 0.0,
                iterations: 0,
            })
            .collect();
        (
            SvmModel {
                train_ids: (0..n).map(|i| format!("v{i}")).collect(),
                machines,
            },
            labels,
        )
    }

    #[test]
    fn zero_duals_give_zero_coefficients() {
        let trees = random_trees(5, 2, 3, 1);
        let table = NodeKernelTable::build(&trees, &KernelConfig::rbf(0.5), NodeScope::Cross).unwrap();
        let (mut model, _) = random_model(5, 2, 2);
        for m in &mut model.machines {
            m.alpha.iter_mut().for_each(|a| *a = 0.0);
        }
        match beta_objective_coeffs(&table, &model, CombineVariant::Concatenation).unwrap() {
            BetaCoefficients::Linear(c) => assert_eq!(c, vec![0.0; 3]),
            other => panic!("{other:?}"),
        }
        match beta_objective_coeffs(&table, &model, CombineVariant::Averaging).unwrap() {
            BetaCoefficients::Quadratic { data, .. } => assert_eq!(data, vec![0.0; 9]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn coefficients_reproduce_the_dual() {
        // sum_c 1/2 (ay)'K_beta(ay) must equal the weight-subproblem value
        let trees = random_trees(8, 3, 2, 3);
        let table = NodeKernelTable::build(&trees, &KernelConfig::rbf(0.7), NodeScope::Cross).unwrap();
        let (model, _) = random_model(8, 3, 4);
        let beta = simplex::to_simplex(&[0.1, -0.4, 0.9, 0.0, 0.3, -1.0, 0.5]).unwrap();
        for variant in [CombineVariant::Concatenation, CombineVariant::Averaging] {
            let k = table.gram(&beta, variant).unwrap();
            let direct: f64 = model
                .machines
                .iter()
                .map(|m| svm::dual_objective(&k, &m.y, &m.alpha) + m.alpha.iter().sum::<f64>())
                .sum();
            let coeffs = beta_objective_coeffs(&table, &model, variant).unwrap();
            assert!((coeffs.value(&beta) - direct).abs() < 1e-10, "{variant:?}");
        }
    }

    #[test]
    fn coefficients_are_psd() {
        let trees = random_trees(10, 3, 4, 5);
        let table = NodeKernelTable::build(&trees, &KernelConfig::rbf(0.3), NodeScope::Cross).unwrap();
        for seed in 0..10 {
            let (model, _) = random_model(10, 3, seed);
            match beta_objective_coeffs(&table, &model, CombineVariant::Concatenation).unwrap() {
                BetaCoefficients::Linear(c) => assert!(c.iter().all(|&v| v >= 0.0)),
                other => panic!("{other:?}"),
            }
            match beta_objective_coeffs(&table, &model, CombineVariant::Averaging).unwrap() {
                BetaCoefficients::Quadratic { nodes, data } => {
                    assert!(linalg::min_eigenvalue(&data, nodes) >= PSD_TOL)
                }
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn concat_step_examples() {
        assert_eq!(
            beta_step_concat(&[3.0, 1.0, 2.0], &[1.0 / 3.0; 3], 1.0).unwrap(),
            vec![0.0, 1.0, 0.0]
        );
        let b = beta_step_concat(&[3.0f64, 1.0, 2.0], &[1.0 / 3.0; 3], 0.5).unwrap();
        for (x, e) in b.iter().zip([1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0]) {
            assert!((x - e).abs() < 1e-15);
        }
        // flat objective: the tie breaks toward the first vertex, value unchanged
        let prev = [0.2f64, 0.5, 0.3];
        let b = beta_step_concat(&[2.0; 3], &prev, 0.5).unwrap();
        assert!((b[0] - 0.6).abs() < 1e-15);
        assert!((crate::scalar::dot(&[2.0; 3], &b) - 2.0).abs() < 1e-15);
        assert!(matches!(
            beta_step_concat(&[f64::NAN, 1.0], &[0.5, 0.5], 1.0),
            Err(EmError::NonFinite(0))
        ));
    }

    #[test]
    fn averaging_step_examples() {
        let b = beta_step_averaging(&[1.0f64, 0.0, 0.0, 1.0], &[1.0, 0.0], 1.0).unwrap();
        assert!((b[0] - 0.5).abs() < 1e-15 && (b[1] - 0.5).abs() < 1e-15);
        let b = beta_step_averaging(&[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0], 0.25).unwrap();
        assert_eq!(b, vec![0.75, 0.25]);
        assert_eq!(
            beta_step_averaging(&[0.0; 4], &[0.3, 0.7], 1.0).unwrap(),
            vec![0.3, 0.7]
        );
        assert!(matches!(
            beta_step_averaging(&[0.0, 1.0, 1.0, 0.0], &[0.5, 0.5], 1.0),
            Err(EmError::NotPsd(_))
        ));
    }

    #[test]
    fn averaging_step_stays_at_the_minimiser() {
        // M = diag(1, 2, 4): minimiser of 1/2 b'Mb on the simplex has b_p ~ 1/M_pp
        let m = [1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 4.0];
        let s = 1.0 + 0.5 + 0.25;
        let opt = [1.0 / s, 0.5 / s, 0.25 / s];
        let b = beta_step_averaging(&m, &opt, 1.0).unwrap();
        assert_eq!(b, opt.to_vec());
    }

    #[test]
    fn averaging_step_descends() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n = 4;
            let a: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    m[i * n + j] = (0..n).map(|k| a[i * n + k] * a[j * n + k]).sum();
                }
            }
            let beta = simplex::to_simplex(&(0..n).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>()).unwrap();
            let next = beta_step_averaging(&m, &beta, 0.5).unwrap();
            assert!(simplex::is_on_simplex(&next));
            assert!(quad_form(&m, n, &next) <= quad_form(&m, n, &beta) + 1e-12);
        }
    }

    fn labelled(n: usize, seed: u64) -> (Vec<PooledTree<f64>>, Vec<usize>) {
        let trees = random_trees(n, 2, 3, seed);
        let labels = (0..n).map(|i| i % 3 + 1).collect();
        (trees, labels)
    }

    #[test]
    fn depth_one_is_plain_svm() {
        let trees = random_trees(12, 1, 3, 6);
        let labels: Vec<usize> = (0..12).map(|i| i % 3 + 1).collect();
        let cfg = KernelConfig::rbf(0.5);
        let fit = em_fit(
            &trees,
            &labels,
            CombineVariant::Averaging,
            &cfg,
            &EmConfig::default(),
            &TrainConfig::default(),
        )
        .unwrap();
        assert_eq!(fit.weights.beta(), &[1.0]);
        let k = crate::kernels::gram_matrix(&trees, &[1.0], CombineVariant::Concatenation, &cfg).unwrap();
        let plain = svm::train_one_vs_rest(&k, &labels, 3, &TrainConfig::default()).unwrap();
        assert_eq!(fit.model, plain);
    }

    #[test]
    fn traces_are_monotone_and_feasible() {
        let (trees, labels) = labelled(18, 7);
        let cfg = KernelConfig::rbf(0.5);
        for sense in [EmSense::Margin, EmSense::Joint] {
            for variant in [CombineVariant::Concatenation, CombineVariant::Averaging] {
                let em = EmConfig {
                    sense,
                    max_iters: 15,
                    ..EmConfig::default()
                };
                let fit = em_fit(&trees, &labels, variant, &cfg, &em, &TrainConfig::default()).unwrap();
                assert!(
                    fit.trace.max_increase() <= 1e-8,
                    "{sense:?} {variant:?}: {:?}",
                    fit.trace.objective
                );
                assert!(fit.trace.betas.iter().all(|b| simplex::is_on_simplex(b)));
                assert_eq!(fit.trace.betas.len(), fit.trace.objective.len());
            }
        }
    }

    #[test]
    fn one_hot_averaging_matches_single_kernel() {
        let (trees, _) = labelled(12, 8);
        let cfg = KernelConfig::rbf(0.5);
        let table = NodeKernelTable::build(&trees, &cfg, NodeScope::Cross).unwrap();
        let beta = [0.0, 1.0, 0.0];
        let k = table.gram(&beta, CombineVariant::Averaging).unwrap();
        let node = table.node_gram(1, 1);
        for i in 0..12 {
            for j in 0..12 {
                assert_eq!(k.get(i, j), node[i * 12 + j]);
            }
        }
    }

    #[test]
    fn deterministic() {
        let (trees, labels) = labelled(15, 9);
        let cfg = KernelConfig::rbf(0.5);
        let run = || {
            em_fit(
                &trees,
                &labels,
                CombineVariant::Averaging,
                &cfg,
                &EmConfig::default(),
                &TrainConfig::default(),
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn rejects_bad_config() {
        let (trees, labels) = labelled(6, 1);
        let cfg = KernelConfig::rbf(0.5);
        let em = EmConfig {
            eta: 0.0,
            ..EmConfig::default()
        };
        assert!(matches!(
            em_fit(
                &trees,
                &labels,
                CombineVariant::Concatenation,
                &cfg,
                &em,
                &TrainConfig::default()
            ),
            Err(EmError::Config(_))
        ));
        assert!(em_fit(
            &trees,
            &[1; 6],
            CombineVariant::Concatenation,
            &cfg,
            &EmConfig::default(),
            &TrainConfig::default()
        )
        .is_err());
    }
}
