//! Floating-point abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar used for pooling, kernel sums, solvers and gradients.
///
/// Implemented for `f32` and `f64`. Feature files always store 32-bit
/// values; pick `f64` for training, where finite-difference checks and
/// long kernel sums need the extra precision.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal or config value into `Self`.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Scalar")
    }

    /// Lossless widening used by routines that delegate to `f64` linear algebra.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar always converts to f64")
    }

    /// Widens a stored 32-bit feature value.
    fn from_stored(v: f32) -> Self;
}

impl Scalar for f64 {
    fn from_stored(v: f32) -> Self {
        v as f64
    }
}

impl Scalar for f32 {
    fn from_stored(v: f32) -> Self {
        v
    }
}

/// Sum in index order. Several invariants (bit-identical Gram matrices
/// across worker counts) rely on a fixed accumulation order.
pub(crate) fn ordered_sum<F: Scalar>(values: impl IntoIterator<Item = F>) -> F {
    values.into_iter().fold(F::zero(), |acc, v| acc + v)
}

pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    ordered_sum(a.iter().zip(b).map(|(&x, &y)| x * y))
}
