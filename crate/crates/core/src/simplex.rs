//! Node weights on the probability simplex and the softmax
//! reparametrisation used to optimise them without constraints.
//!
//! Free parameters `raw` map to weights `beta_k = exp(raw_k) / sum_j exp(raw_j)`.
//! The Jacobian of that map is `d beta_p / d raw_k = beta_k (delta_pk - beta_p)`,
//! so any update of `raw` keeps `beta` feasible.

use thiserror::Error;

use crate::scalar::{ordered_sum, Scalar};

/// Tolerance on `|sum(beta) - 1|`.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum SimplexError {
    #[error("non-finite parameter at position {0}")]
    NonFinite(usize),
    #[error("weights are not on the simplex: {0}")]
    NotOnSimplex(String),
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("no gradients to accumulate")]
    Empty,
}

/// `beta = exp(raw) / sum(exp(raw))`, with max-subtraction.
pub fn to_simplex<F: Scalar>(raw: &[F]) -> Result<Vec<F>, SimplexError> {
    if let Some(pos) = raw.iter().position(|v| !v.is_finite()) {
        return Err(SimplexError::NonFinite(pos));
    }
    if raw.is_empty() {
        return Err(SimplexError::NotOnSimplex("empty weight vector".into()));
    }
    let max = raw.iter().copied().fold(F::neg_infinity(), F::max);
    let e: Vec<F> = raw.iter().map(|&r| (r - max).exp()).collect();
    let total = ordered_sum(e.iter().copied());
    Ok(e.into_iter().map(|v| v / total).collect())
}

/// Checks `beta in [0, 1]^n` and `|sum(beta) - 1| <= tol`.
pub fn check_simplex<F: Scalar>(beta: &[F], tol: f64) -> Result<(), SimplexError> {
    if beta.is_empty() {
        return Err(SimplexError::NotOnSimplex("empty weight vector".into()));
    }
    if let Some((i, b)) = beta
        .iter()
        .enumerate()
        .find(|(_, b)| !(**b >= F::zero() && **b <= F::one()))
    {
        return Err(SimplexError::NotOnSimplex(format!("beta[{i}] = {b}")));
    }
    let sum = ordered_sum(beta.iter().copied()).as_f64();
    if (sum - 1.0).abs() > tol {
        return Err(SimplexError::NotOnSimplex(format!("sum = {sum}")));
    }
    Ok(())
}

pub fn is_on_simplex<F: Scalar>(beta: &[F]) -> bool {
    check_simplex(beta, SIMPLEX_TOL).is_ok()
}

/// Row-major `n x n` Jacobian; entry `(p, k)` is `d beta_p / d raw_k`.
pub fn jacobian<F: Scalar>(beta: &[F]) -> Result<Vec<F>, SimplexError> {
    check_simplex(beta, SIMPLEX_TOL)?;
    let n = beta.len();
    let mut j = vec![F::zero(); n * n];
    for p in 0..n {
        for k in 0..n {
            let delta = if p == k { F::one() } else { F::zero() };
            j[p * n + k] = beta[k] * (delta - beta[p]);
        }
    }
    Ok(j)
}

/// Chain rule through the reparametrisation:
/// `dE/draw_k = sum_p dE/dbeta_p * beta_k (delta_pk - beta_p)
///            = beta_k (dE/dbeta_k - <dE/dbeta, beta>)`.
pub fn backprop_through_simplex<F: Scalar>(de_dbeta: &[F], beta: &[F]) -> Result<Vec<F>, SimplexError> {
    if de_dbeta.len() != beta.len() {
        return Err(SimplexError::ShapeMismatch(de_dbeta.len(), beta.len()));
    }
    let inner = crate::scalar::dot(de_dbeta, beta);
    Ok(beta.iter().zip(de_dbeta).map(|(&b, &g)| b * (g - inner)).collect())
}

/// Elementwise mean of gradients computed for copies of the same
/// parameters (e.g. one copy per layer that reuses them).
pub fn accumulate_shared<F: Scalar>(gradients: &[Vec<F>]) -> Result<Vec<F>, SimplexError> {
    let first = gradients.first().ok_or(SimplexError::Empty)?;
    if let Some(bad) = gradients.iter().find(|g| g.len() != first.len()) {
        return Err(SimplexError::ShapeMismatch(bad.len(), first.len()));
    }
    let count = F::lit(gradients.len() as f64);
    Ok((0..first.len())
        .map(|k| ordered_sum(gradients.iter().map(|g| g[k])) / count)
        .collect())
}

/// Weights over hierarchy nodes, always on the simplex.
///
/// Either reparametrised (`raw` present, `beta = to_simplex(raw)`) or held
/// directly, as for the vertex-seeking steps of the alternating trainer
/// where exact zeros are reachable.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexWeights<F> {
    raw: Option<Vec<F>>,
    beta: Vec<F>,
}

impl<F: Scalar> SimplexWeights<F> {
    pub fn uniform(n: usize) -> Self {
        Self::from_raw(vec![F::zero(); n]).expect("zero parameters are finite")
    }

    pub fn from_raw(raw: Vec<F>) -> Result<Self, SimplexError> {
        let beta = to_simplex(&raw)?;
        Ok(Self { raw: Some(raw), beta })
    }

    pub fn from_beta(beta: Vec<F>) -> Result<Self, SimplexError> {
        check_simplex(&beta, SIMPLEX_TOL)?;
        Ok(Self { raw: None, beta })
    }

    pub fn beta(&self) -> &[F] {
        &self.beta
    }

    pub fn raw(&self) -> Option<&[F]> {
        self.raw.as_deref()
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// Replaces the free parameters and re-derives `beta`.
    pub fn set_raw(&mut self, raw: Vec<F>) -> Result<(), SimplexError> {
        if raw.len() != self.beta.len() {
            return Err(SimplexError::ShapeMismatch(raw.len(), self.beta.len()));
        }
        self.beta = to_simplex(&raw)?;
        self.raw = Some(raw);
        Ok(())
    }

    /// Shannon entropy of `beta` in nats.
    pub fn entropy(&self) -> F {
        -ordered_sum(
            self.beta
                .iter()
                .map(|&b| if b > F::zero() { b * b.ln() } else { F::zero() }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn uniform_from_zero() {
        let b = to_simplex(&[0.0f64, 0.0, 0.0]).unwrap();
        assert!(close(&b, &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn ln3_gives_three_quarters() {
        let b = to_simplex(&[3.0f64.ln(), 0.0]).unwrap();
        assert!(close(&b, &[0.75, 0.25], 1e-15));
    }

    #[test]
    fn large_parameters_do_not_overflow() {
        let b = to_simplex(&[1000.0f64, 999.0]).unwrap();
        assert!(b.iter().all(|v| v.is_finite()));
        assert!(is_on_simplex(&b));
        assert_eq!(to_simplex(&[0.0, f64::NAN]), Err(SimplexError::NonFinite(1)));
    }

    #[test]
    fn jacobian_examples() {
        let j = jacobian(&[0.5f64, 0.5]).unwrap();
        assert!(close(&j, &[0.25, -0.25, -0.25, 0.25], 1e-15));
        assert!(jacobian(&[0.0f64, 1.0, 0.0]).unwrap().iter().all(|&v| v == 0.0));
        assert!(matches!(jacobian(&[0.6f64, 0.6]), Err(SimplexError::NotOnSimplex(_))));
    }

    #[test]
    fn jacobian_at_uniform_point() {
        let n = 5;
        let j = jacobian(&vec![1.0 / n as f64; n]).unwrap();
        for p in 0..n {
            for k in 0..n {
                let delta = if p == k { 1.0 } else { 0.0 };
                let expected = delta / n as f64 - 1.0 / (n * n) as f64;
                assert!((j[p * n + k] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn constant_upstream_gradient_vanishes() {
        let beta = to_simplex(&[0.3f64, -1.2, 0.8, 0.0]).unwrap();
        let g = backprop_through_simplex(&[2.5; 4], &beta).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
        let g = backprop_through_simplex(&[1.0, -3.0, 2.0], &[0.0, 0.0, 1.0]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(backprop_through_simplex(&[1.0], &[0.5, 0.5]).is_err());
    }

    /// E(beta) = sum_p c_p beta_p + 0.5 sum_pq beta_p Q_pq beta_q, composed with
    /// the softmax, checked against central differences of the raw parameters.
    #[test]
    fn backprop_matches_finite_differences_on_quadratic() {
        let c = [0.3, -1.0, 0.7, 0.2];
        let q = [
            [2.0, 0.3, -0.1, 0.0],
            [0.3, 1.0, 0.2, 0.4],
            [-0.1, 0.2, 1.5, -0.3],
            [0.0, 0.4, -0.3, 0.8],
        ];
        let energy = |beta: &[f64]| -> f64 {
            let mut e = 0.0;
            for p in 0..4 {
                e += c[p] * beta[p];
                for r in 0..4 {
                    e += 0.5 * beta[p] * q[p][r] * beta[r];
                }
            }
            e
        };
        let raw = [0.4, -0.2, 1.1, -0.7];
        let beta = to_simplex(&raw).unwrap();
        let de_dbeta: Vec<f64> = (0..4)
            .map(|p| c[p] + (0..4).map(|r| q[p][r] * beta[r]).sum::<f64>())
            .collect();
        let analytic = backprop_through_simplex(&de_dbeta, &beta).unwrap();
        let h = 1e-5;
        for k in 0..4 {
            let mut up = raw;
            let mut dn = raw;
            up[k] += h;
            dn[k] -= h;
            let fd = (energy(&to_simplex(&up).unwrap()) - energy(&to_simplex(&dn).unwrap())) / (2.0 * h);
            assert!(
                (fd - analytic[k]).abs() <= 1e-6 * analytic[k].abs().max(1e-3),
                "{k}: {fd} vs {}",
                analytic[k]
            );
        }
    }

    #[test]
    fn accumulate_examples() {
        let g = vec![1.0f64, -2.0, 0.5];
        assert_eq!(accumulate_shared(std::slice::from_ref(&g)).unwrap(), g);
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        assert!(accumulate_shared(&[g.clone(), neg]).unwrap().iter().all(|&v| v == 0.0));
        assert!(close(
            &accumulate_shared(&[g.clone(), g.clone(), g.clone()]).unwrap(),
            &g,
            1e-15
        ));
        assert_eq!(accumulate_shared::<f64>(&[]), Err(SimplexError::Empty));
    }

    #[test]
    fn weights_track_raw() {
        let mut w = SimplexWeights::<f64>::uniform(3);
        assert!((w.entropy() - 3.0f64.ln()).abs() < 1e-12);
        w.set_raw(vec![3.0f64.ln(), 0.0, f64::NEG_INFINITY.max(-1e300)])
            .unwrap();
        assert!(is_on_simplex(w.beta()));
        assert!(w.set_raw(vec![0.0]).is_err());
        assert!(SimplexWeights::from_beta(vec![0.0f64, 1.0]).unwrap().raw().is_none());
    }

    proptest! {
        #[test]
        fn softmax_lands_on_simplex(raw in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
            let beta = to_simplex(&raw).unwrap();
            prop_assert!(is_on_simplex(&beta));
        }

        #[test]
        fn softmax_is_shift_invariant(raw in proptest::collection::vec(-20.0f64..20.0, 1..20), c in -30.0f64..30.0) {
            let shifted: Vec<f64> = raw.iter().map(|r| r + c).collect();
            let a = to_simplex(&raw).unwrap();
            let b = to_simplex(&shifted).unwrap();
            prop_assert!(close(&a, &b, 1e-12));
        }

        #[test]
        fn jacobian_columns_sum_to_zero(raw in proptest::collection::vec(-5.0f64..5.0, 1..12)) {
            let beta = to_simplex(&raw).unwrap();
            let n = beta.len();
            let j = jacobian(&beta).unwrap();
            for k in 0..n {
                let col: f64 = (0..n).map(|p| j[p * n + k]).sum();
                prop_assert!(col.abs() < 1e-14);
            }
        }

        #[test]
        fn gradient_steps_stay_feasible(
            raw in proptest::collection::vec(-3.0f64..3.0, 2..10),
            lr in 0.0f64..10.0,
            seed in 0u64..1000,
        ) {
            let mut w = SimplexWeights::from_raw(raw).unwrap();
            for step in 0..20u64 {
                let g: Vec<f64> = (0..w.len())
                    .map(|k| (((seed + step) * 31 + k as u64 * 17) % 13) as f64 - 6.0)
                    .collect();
                let d = backprop_through_simplex(&g, w.beta()).unwrap();
                let next: Vec<f64> = w.raw().unwrap().iter().zip(&d).map(|(r, g)| r - lr * g).collect();
                w.set_raw(next).unwrap();
                prop_assert!(is_on_simplex(w.beta()));
            }
        }
    }
}
