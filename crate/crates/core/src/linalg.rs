use nalgebra::{DMatrix, SymmetricEigen};

use crate::scalar::Scalar;

/// Smallest eigenvalue of a symmetric `n x n` row-major matrix.
///
/// The matrix is symmetrised as `(A + A^T) / 2` before decomposition so
/// round-off asymmetry does not leak into the spectrum.
pub fn min_eigenvalue<F: Scalar>(data: &[F], n: usize) -> f64 {
    assert_eq!(data.len(), n * n, "matrix buffer does not match dimension");
    if n == 0 {
        return 0.0;
    }
    let m = DMatrix::from_fn(n, n, |i, j| 0.5 * (data[i * n + j].as_f64() + data[j * n + i].as_f64()));
    SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}
