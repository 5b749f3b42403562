//! Kernel SVM dual solver and one-vs-rest classification.
//!
//! The dual is solved in minimisation form
//!
//! ```text
//! min_a  f(a) = 1/2 sum_ij a_i a_j y_i y_j K_ij - sum_i a_i
//! s.t.   0 <= a_i <= C,  sum_i y_i a_i = 0
//! ```
//!
//! by two-coordinate updates on the maximal KKT-violating pair. Every
//! update is an exact line search along a feasible direction, so `f`
//! never increases and feasibility is preserved at every iterate.
//! `C = inf` gives the hard-margin problem.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::GramMatrix;
use crate::scalar::{ordered_sum, Scalar};

/// Curvature floor for degenerate working pairs.
const TAU: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SvmError {
    #[error("all training labels belong to one class")]
    SingleClass,
    #[error("one-vs-rest training needs at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("label {value} at position {index} is not +1/-1")]
    InvalidLabel { index: usize, value: f64 },
    #[error("class id {label} at position {index} outside 1..={classes}")]
    InvalidClass { index: usize, label: usize, classes: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("warm start is infeasible: {0}")]
    InfeasibleStart(String),
    #[error("hard-margin dual is unbounded: a pair of opposite labels is indistinguishable under the kernel")]
    Unbounded,
    #[error("solver did not converge after {iterations} iterations (KKT gap {gap:e})")]
    NotConverged {
        iterations: usize,
        gap: f64,
        /// Last iterate, still feasible.
        best: Box<DualSolution<f64>>,
    },
    #[error("class {class}: {source}")]
    Class {
        class: usize,
        #[source]
        source: Box<SvmError>,
    },
}

impl SvmError {
    /// True for solver failures as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            SvmError::NotConverged { .. } | SvmError::Unbounded => true,
            SvmError::Class { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Upper bound on every dual coefficient; `f64::INFINITY` for hard margin.
    #[serde(with = "box_serde")]
    pub c_box: f64,
    /// Stop when the maximal KKT violation falls to this value.
    pub kkt_tol: f64,
    /// Iteration budget, in units of the training-set size.
    pub max_passes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            c_box: 10.0,
            kkt_tol: 1e-6,
            max_passes: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), SvmError> {
        if !(self.c_box > 0.0) {
            return Err(SvmError::InvalidConfig(format!(
                "c_box must be positive, got {}",
                self.c_box
            )));
        }
        if !(self.kkt_tol > 0.0 && self.kkt_tol.is_finite()) {
            return Err(SvmError::InvalidConfig(format!(
                "kkt_tol must be positive, got {}",
                self.kkt_tol
            )));
        }
        if self.max_passes == 0 {
            return Err(SvmError::InvalidConfig("max_passes must be positive".into()));
        }
        Ok(())
    }
}

/// JSON has no infinity; an unbounded box is written as `null`.
mod box_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualSolution<F> {
    pub alpha: Vec<F>,
    pub b: F,
    /// `f(alpha)` in minimisation form.
    pub objective: F,
    pub iterations: usize,
    /// Maximal KKT violation at the returned iterate.
    pub kkt_gap: F,
    /// Objective at the start and after every pass of `n` updates.
    pub objective_trace: Vec<F>,
}

impl<F: Scalar> DualSolution<F> {
    fn widen(&self) -> DualSolution<f64> {
        DualSolution {
            alpha: self.alpha.iter().map(|v| v.as_f64()).collect(),
            b: self.b.as_f64(),
            objective: self.objective.as_f64(),
            iterations: self.iterations,
            kkt_gap: self.kkt_gap.as_f64(),
            objective_trace: self.objective_trace.iter().map(|v| v.as_f64()).collect(),
        }
    }
}

/// `f(alpha)` for an arbitrary feasible point.
pub fn dual_objective<F: Scalar>(k: &GramMatrix<F>, y: &[F], alpha: &[F]) -> F {
    let n = k.n();
    let mut quad = F::zero();
    for i in 0..n {
        if alpha[i] == F::zero() {
            continue;
        }
        let row = k.row(i);
        let inner = ordered_sum((0..n).map(|j| alpha[j] * y[j] * row[j]));
        quad = quad + alpha[i] * y[i] * inner;
    }
    F::lit(0.5) * quad - ordered_sum(alpha.iter().copied())
}

pub fn solve_dual<F: Scalar>(k: &GramMatrix<F>, y: &[F], cfg: &TrainConfig) -> Result<DualSolution<F>, SvmError> {
    solve_dual_from(k, y, cfg, None)
}

/// Solves from a feasible starting point (`None` starts at zero).
pub fn solve_dual_from<F: Scalar>(
    k: &GramMatrix<F>,
    y: &[F],
    cfg: &TrainConfig,
    start: Option<&[F]>,
) -> Result<DualSolution<F>, SvmError> {
    cfg.validate()?;
    let n = k.n();
    if y.len() != n {
        return Err(SvmError::ShapeMismatch(format!(
            "{} labels for a {n}x{n} kernel",
            y.len()
        )));
    }
    for (index, &v) in y.iter().enumerate() {
        if v != F::one() && v != -F::one() {
            return Err(SvmError::InvalidLabel {
                index,
                value: v.as_f64(),
            });
        }
    }
    if y.iter().all(|&v| v == y[0]) {
        return Err(SvmError::SingleClass);
    }
    let c = F::lit(cfg.c_box);
    let mut alpha = match start {
        Some(a) => {
            check_feasible(a, y, c)?;
            a.to_vec()
        }
        None => vec![F::zero(); n],
    };

    // gradient of f: G = Q alpha - 1
    let mut grad = vec![-F::one(); n];
    for j in 0..n {
        if alpha[j] != F::zero() {
            let row = k.row(j);
            for i in 0..n {
                grad[i] = grad[i] + y[i] * y[j] * row[i] * alpha[j];
            }
        }
    }
    let objective =
        |alpha: &[F], grad: &[F]| F::lit(0.5) * ordered_sum(alpha.iter().zip(grad).map(|(&a, &g)| a * (g - F::one())));

    let tol = F::lit(cfg.kkt_tol);
    let max_iter = cfg.max_passes.saturating_mul(n.max(10));
    let mut trace = vec![objective(&alpha, &grad)];
    let mut iterations = 0usize;
    loop {
        let (i, j, gap) = select_pair(&alpha, &grad, y, c);
        let converged = gap <= tol;
        if converged || iterations >= max_iter {
            let obj = objective(&alpha, &grad);
            if trace.last() != Some(&obj) {
                trace.push(obj);
            }
            let sol = DualSolution {
                b: intercept(&alpha, &grad, y, c),
                alpha,
                objective: obj,
                iterations,
                kkt_gap: gap,
                objective_trace: trace,
            };
            if converged {
                return Ok(sol);
            }
            return Err(SvmError::NotConverged {
                iterations,
                gap: gap.as_f64(),
                best: Box::new(sol.widen()),
            });
        }

        let (ki, kj) = (k.row(i), k.row(j));
        let mut curvature = ki[i] + kj[j] - F::lit(2.0) * ki[j];
        let flat = curvature <= F::lit(TAU);
        if flat {
            curvature = F::lit(TAU);
        }
        let room_i = if y[i] > F::zero() { c - alpha[i] } else { alpha[i] };
        let room_j = if y[j] > F::zero() { alpha[j] } else { c - alpha[j] };
        if flat && room_i.is_infinite() && room_j.is_infinite() {
            return Err(SvmError::Unbounded);
        }
        let newton = gap / curvature;
        let step = newton.min(room_i).min(room_j);

        alpha[i] = alpha[i] + y[i] * step;
        alpha[j] = alpha[j] - y[j] * step;
        // land exactly on the bound that limited the step
        if step == room_i {
            alpha[i] = if y[i] > F::zero() { c } else { F::zero() };
        }
        if step == room_j {
            alpha[j] = if y[j] > F::zero() { F::zero() } else { c };
        }
        for t in 0..n {
            grad[t] = grad[t] + y[t] * step * (ki[t] - kj[t]);
        }
        iterations += 1;
        if iterations.is_multiple_of(n.max(1)) {
            trace.push(objective(&alpha, &grad));
        }
    }
}

fn check_feasible<F: Scalar>(alpha: &[F], y: &[F], c: F) -> Result<(), SvmError> {
    if alpha.len() != y.len() {
        return Err(SvmError::ShapeMismatch(format!(
            "{} coefficients for {} labels",
            alpha.len(),
            y.len()
        )));
    }
    if let Some((i, a)) = alpha.iter().enumerate().find(|(_, a)| !(**a >= F::zero() && **a <= c)) {
        return Err(SvmError::InfeasibleStart(format!("alpha[{i}] = {a}")));
    }
    let balance = ordered_sum(alpha.iter().zip(y).map(|(&a, &l)| a * l));
    let scale = ordered_sum(alpha.iter().copied()).max(F::one());
    if balance.abs() > F::lit(1e-8) * scale {
        return Err(SvmError::InfeasibleStart(format!("sum y*alpha = {balance}")));
    }
    Ok(())
}

/// Maximal violating pair `(i, j)` and the violation `m - M`, where
/// `m = max_{I_up} -y G` and `M = min_{I_low} -y G`. Ties go to the
/// smallest index.
fn select_pair<F: Scalar>(alpha: &[F], grad: &[F], y: &[F], c: F) -> (usize, usize, F) {
    let (mut i, mut up) = (usize::MAX, F::neg_infinity());
    let (mut j, mut low) = (usize::MAX, F::infinity());
    for t in 0..alpha.len() {
        let v = -y[t] * grad[t];
        let pos = y[t] > F::zero();
        let in_up = if pos { alpha[t] < c } else { alpha[t] > F::zero() };
        let in_low = if pos { alpha[t] > F::zero() } else { alpha[t] < c };
        if in_up && v > up {
            up = v;
            i = t;
        }
        if in_low && v < low {
            low = v;
            j = t;
        }
    }
    if i == usize::MAX || j == usize::MAX {
        return (0, 0, F::zero());
    }
    (i, j, up - low)
}

/// Shift `b`: mean of `-y_i G_i` over unbounded support vectors, or the
/// midpoint of the feasible interval when every coefficient is at a bound.
fn intercept<F: Scalar>(alpha: &[F], grad: &[F], y: &[F], c: F) -> F {
    let (mut ub, mut lb) = (F::infinity(), F::neg_infinity());
    let (mut sum, mut free) = (F::zero(), 0usize);
    for t in 0..alpha.len() {
        let yg = y[t] * grad[t];
        let pos = y[t] > F::zero();
        if alpha[t] >= c {
            if pos {
                lb = lb.max(yg);
            } else {
                ub = ub.min(yg);
            }
        } else if alpha[t] <= F::zero() {
            if pos {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            sum = sum + yg;
            free += 1;
        }
    }
    let rho = if free > 0 {
        sum / F::lit(free as f64)
    } else if ub.is_finite() && lb.is_finite() {
        F::lit(0.5) * (ub + lb)
    } else if ub.is_finite() {
        ub
    } else {
        lb
    };
    -rho
}

/// Binary machine for one class against the rest.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMachine<F> {
    pub class: usize,
    /// One coefficient per training video (zero for non-support vectors).
    pub alpha: Vec<F>,
    /// `+1` for members of `class`, `-1` otherwise.
    pub y: Vec<F>,
    pub b: F,
    pub objective: F,
    pub iterations: usize,
}

impl<F: Scalar> BinaryMachine<F> {
    pub fn decision(&self, k_col: &[F]) -> F {
        ordered_sum(
            self.alpha
                .iter()
                .zip(&self.y)
                .zip(k_col)
                .map(|((&a, &y), &k)| a * y * k),
        ) + self.b
    }

    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.alpha
            .iter()
            .enumerate()
            .filter(|(_, a)| **a > F::zero())
            .map(|(i, _)| i)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvmModel<F> {
    pub train_ids: Vec<String>,
    /// Machines for classes `1..=C`, in order.
    pub machines: Vec<BinaryMachine<F>>,
}

impl<F: Scalar> SvmModel<F> {
    pub fn num_classes(&self) -> usize {
        self.machines.len()
    }

    /// Sum over classes of the dual objective.
    pub fn objective(&self) -> F {
        ordered_sum(self.machines.iter().map(|m| m.objective))
    }

    pub fn alphas(&self) -> Vec<&[F]> {
        self.machines.iter().map(|m| m.alpha.as_slice()).collect()
    }
}

/// `y_ic`: `+1` when `labels[i] == class`, else `-1`.
pub fn class_targets<F: Scalar>(labels: &[usize], class: usize) -> Vec<F> {
    labels
        .iter()
        .map(|&l| if l == class { F::one() } else { -F::one() })
        .collect()
}

pub fn train_one_vs_rest<F: Scalar>(
    k: &GramMatrix<F>,
    labels: &[usize],
    num_classes: usize,
    cfg: &TrainConfig,
) -> Result<SvmModel<F>, SvmError> {
    train_one_vs_rest_from(k, labels, num_classes, cfg, None)
}

/// One-vs-rest training, optionally warm-started from a previous model
/// trained on the same videos.
pub fn train_one_vs_rest_from<F: Scalar>(
    k: &GramMatrix<F>,
    labels: &[usize],
    num_classes: usize,
    cfg: &TrainConfig,
    warm: Option<&SvmModel<F>>,
) -> Result<SvmModel<F>, SvmError> {
    if num_classes < 2 {
        return Err(SvmError::TooFewClasses(num_classes));
    }
    if labels.len() != k.n() {
        return Err(SvmError::ShapeMismatch(format!(
            "{} labels for {} videos",
            labels.len(),
            k.n()
        )));
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l == 0 || l > num_classes) {
        return Err(SvmError::InvalidClass {
            index,
            label,
            classes: num_classes,
        });
    }
    if let Some(w) = warm {
        if w.machines.len() != num_classes || w.train_ids != k.ids() {
            return Err(SvmError::ShapeMismatch(
                "warm-start model does not match the training set".into(),
            ));
        }
    }
    let machines: Vec<Result<BinaryMachine<F>, SvmError>> = (1..=num_classes)
        .into_par_iter()
        .map(|class| {
            let y = class_targets(labels, class);
            let start = warm.map(|w| w.machines[class - 1].alpha.as_slice());
            let sol = solve_dual_from(k, &y, cfg, start).map_err(|e| SvmError::Class {
                class,
                source: Box::new(e),
            })?;
            Ok(BinaryMachine {
                class,
                alpha: sol.alpha,
                y,
                b: sol.b,
                objective: sol.objective,
                iterations: sol.iterations,
            })
        })
        .collect();
    Ok(SvmModel {
        train_ids: k.ids().to_vec(),
        machines: machines.into_iter().collect::<Result<_, _>>()?,
    })
}

/// `g_c(V) = sum_i alpha_i^c y_ic K(V, V_i) + b_c`.
pub fn decision<F: Scalar>(model: &SvmModel<F>, class: usize, k_col: &[F]) -> Result<F, SvmError> {
    let m = class
        .checked_sub(1)
        .and_then(|c| model.machines.get(c))
        .ok_or_else(|| SvmError::ShapeMismatch(format!("no machine for class {class}")))?;
    if k_col.len() != m.alpha.len() {
        return Err(SvmError::ShapeMismatch(format!(
            "{} kernel values for {} training videos",
            k_col.len(),
            m.alpha.len()
        )));
    }
    Ok(m.decision(k_col))
}

pub fn decision_scores<F: Scalar>(model: &SvmModel<F>, k_col: &[F]) -> Result<Vec<F>, SvmError> {
    (1..=model.num_classes()).map(|c| decision(model, c, k_col)).collect()
}

/// Class with the highest score; ties go to the smallest class id.
pub fn argmax_class<F: Scalar>(scores: &[F]) -> usize {
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = c;
        }
    }
    best + 1
}

pub fn predict<F: Scalar>(model: &SvmModel<F>, k_col: &[F]) -> Result<usize, SvmError> {
    Ok(argmax_class(&decision_scores(model, k_col)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gram(ids: usize, data: Vec<f64>) -> GramMatrix<f64> {
        GramMatrix::from_dense((0..ids).map(|i| format!("v{i}")).collect(), data).unwrap()
    }

    fn linear_gram(xs: &[f64]) -> GramMatrix<f64> {
        let n = xs.len();
        gram(n, (0..n * n).map(|k| xs[k / n] * xs[k % n]).collect())
    }

    fn hard() -> TrainConfig {
        TrainConfig {
            c_box: f64::INFINITY,
            kkt_tol: 1e-12,
            max_passes: 1000,
        }
    }

    #[test]
    fn two_point_analytic() {
        let k = linear_gram(&[1.0, -1.0]);
        let sol = solve_dual(&k, &[1.0, -1.0], &hard()).unwrap();
        assert!((sol.alpha[0] - 0.5).abs() < 1e-12);
        assert!((sol.alpha[1] - 0.5).abs() < 1e-12);
        assert!(sol.b.abs() < 1e-12);
        assert!((sol.objective + 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_class_rejected() {
        let k = linear_gram(&[1.0, 2.0]);
        assert!(matches!(
            solve_dual(&k, &[1.0, 1.0], &hard()),
            Err(SvmError::SingleClass)
        ));
        assert!(matches!(
            solve_dual(&k, &[1.0, 0.5], &hard()),
            Err(SvmError::InvalidLabel { index: 1, .. })
        ));
    }

    #[test]
    fn duplicated_dataset_keeps_decision_function() {
        let xs = [2.0, 1.0, -1.0, -3.0];
        let y = [1.0, 1.0, -1.0, -1.0];
        let single = solve_dual(&linear_gram(&xs), &y, &hard()).unwrap();
        let xs2: Vec<f64> = xs.iter().chain(&xs).copied().collect();
        let y2: Vec<f64> = y.iter().chain(&y).copied().collect();
        let double = solve_dual(&linear_gram(&xs2), &y2, &hard()).unwrap();
        let f = |sol: &DualSolution<f64>, xs: &[f64], ys: &[f64], x: f64| -> f64 {
            sol.alpha
                .iter()
                .zip(xs)
                .zip(ys)
                .map(|((a, xi), yi)| a * yi * xi * x)
                .sum::<f64>()
                + sol.b
        };
        for x in [-4.0, -1.0, 0.0, 0.3, 1.0, 5.0] {
            assert!((f(&single, &xs, &y, x) - f(&double, &xs2, &y2, x)).abs() < 1e-9);
        }
    }

    #[test]
    fn iterates_stay_feasible_and_descend() {
        let xs = [0.3f64, 1.2, -0.7, 2.0, -1.5, 0.1, -0.2];
        let y = [1.0, 1.0, -1.0, 1.0, -1.0, -1.0, 1.0];
        let n = xs.len();
        // rbf on a line: PSD, not separable with the small box
        let k = gram(
            n,
            (0..n * n).map(|t| (-(xs[t / n] - xs[t % n]).powi(2)).exp()).collect(),
        );
        let cfg = TrainConfig {
            c_box: 0.7,
            kkt_tol: 1e-10,
            max_passes: 1000,
        };
        let sol = solve_dual(&k, &y, &cfg).unwrap();
        assert!(sol.alpha.iter().all(|&a| (0.0..=0.7).contains(&a)));
        let balance: f64 = sol.alpha.iter().zip(&y).map(|(a, l)| a * l).sum();
        assert!(balance.abs() < 1e-12);
        for w in sol.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-10);
        }
        assert!((dual_objective(&k, &y, &sol.alpha) - sol.objective).abs() < 1e-10);
    }

    #[test]
    fn warm_start_from_optimum_is_immediate() {
        let k = linear_gram(&[1.0, -1.0]);
        let cfg = hard();
        let sol = solve_dual(&k, &[1.0, -1.0], &cfg).unwrap();
        let again = solve_dual_from(&k, &[1.0, -1.0], &cfg, Some(&sol.alpha)).unwrap();
        assert_eq!(again.iterations, 0);
        assert!(matches!(
            solve_dual_from(&k, &[1.0, -1.0], &cfg, Some(&[1.0, 0.0])),
            Err(SvmError::InfeasibleStart(_))
        ));
    }

    #[test]
    fn indistinguishable_opposite_labels_are_unbounded() {
        let k = gram(2, vec![1.0; 4]);
        assert!(matches!(
            solve_dual(&k, &[1.0, -1.0], &hard()),
            Err(SvmError::Unbounded)
        ));
        // the box makes the same problem well posed
        let boxed = TrainConfig { c_box: 2.0, ..hard() };
        let sol = solve_dual(&k, &[1.0, -1.0], &boxed).unwrap();
        assert_eq!(sol.alpha, vec![2.0, 2.0]);
    }

    #[test]
    fn not_converged_returns_last_iterate() {
        let xs = [0.3f64, 1.2, -0.7, 2.0, -1.5, 0.1, -0.2];
        let y = [1.0, 1.0, -1.0, 1.0, -1.0, -1.0, 1.0];
        let n = xs.len();
        let k = gram(
            n,
            (0..n * n).map(|t| (-(xs[t / n] - xs[t % n]).powi(2)).exp()).collect(),
        );
        let cfg = TrainConfig {
            c_box: 5.0,
            kkt_tol: 1e-300,
            max_passes: 1,
        };
        match solve_dual(&k, &y, &cfg) {
            Err(e @ SvmError::NotConverged { .. }) => {
                assert!(e.is_numerical());
                if let SvmError::NotConverged { best, iterations, .. } = e {
                    assert_eq!(iterations, 10);
                    assert_eq!(best.alpha.len(), n);
                }
            }
            other => panic!("expected NotConverged, got {other:?}"),
        }
    }

    #[test]
    fn scaling_kernel_rescales_hard_margin_alphas() {
        let xs = [2.0, 1.0, -1.0, -3.0];
        let y = [1.0, 1.0, -1.0, -1.0];
        let k = linear_gram(&xs);
        let base = solve_dual(&k, &y, &hard()).unwrap();
        for c in [0.5, 3.0] {
            let scaled = solve_dual(&k.scaled(c), &y, &hard()).unwrap();
            for (a, s) in base.alpha.iter().zip(&scaled.alpha) {
                assert!((a / c - s).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn one_vs_rest_two_classes_are_complements() {
        let k = linear_gram(&[2.0, 1.0, -1.0, -3.0]);
        let model = train_one_vs_rest(&k, &[1, 1, 2, 2], 2, &hard()).unwrap();
        assert_eq!(model.machines.len(), 2);
        for (a, b) in model.machines[0].y.iter().zip(&model.machines[1].y) {
            assert_eq!(*a, -*b);
        }
        assert!(matches!(
            train_one_vs_rest(&k, &[1, 1, 1, 1], 1, &hard()),
            Err(SvmError::TooFewClasses(1))
        ));
        match train_one_vs_rest(&k, &[1, 1, 1, 1], 2, &hard()) {
            Err(SvmError::Class { class, source }) => {
                assert_eq!(class, 1);
                assert!(matches!(*source, SvmError::SingleClass));
            }
            other => panic!("expected a class-annotated error, got {other:?}"),
        }
    }

    #[test]
    fn decision_and_prediction_rules() {
        let m = BinaryMachine {
            class: 1,
            alpha: vec![0.0, 0.0],
            y: vec![1.0, -1.0],
            b: 0.25,
            objective: 0.0,
            iterations: 0,
        };
        assert_eq!(m.decision(&[0.7, 0.1]), 0.25);
        assert_eq!(m.decision(&[0.0, 0.0]), 0.25);
        assert_eq!(argmax_class(&[0.2, 0.9, -1.0]), 2);
        assert_eq!(argmax_class(&[0.5, 0.5]), 1);
        let model = SvmModel {
            train_ids: vec!["a".into(), "b".into()],
            machines: vec![m],
        };
        assert!(decision(&model, 1, &[1.0]).is_err());
        assert!(decision(&model, 2, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn hundred_and_one_classes() {
        let n = 202;
        let labels: Vec<usize> = (0..n).map(|i| i / 2 + 1).collect();
        let k = gram(n, (0..n * n).map(|t| if t / n == t % n { 1.0 } else { 0.0 }).collect());
        let model = train_one_vs_rest(&k, &labels, 101, &TrainConfig::default()).unwrap();
        assert_eq!(model.num_classes(), 101);
        let col: Vec<f64> = (0..n).map(|j| if j == 57 { 1.0 } else { 0.0 }).collect();
        assert_eq!(predict(&model, &col).unwrap(), labels[57]);
    }

    #[test]
    fn box_serialization_uses_null_for_hard_margin() {
        let json = serde_json::to_string(&hard()).unwrap();
        assert!(json.contains("\"c_box\":null"));
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert!(back.c_box.is_infinite());
    }
}
