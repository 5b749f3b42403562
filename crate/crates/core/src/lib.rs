//! Hierarchical temporal pooling with learned node weights.
//!
//! Frame-feature sequences are mean-pooled over a dyadic temporal
//! hierarchy ([`hierarchy`]). Node representations are compared with an
//! elementary kernel and combined with simplex weights ([`kernels`],
//! [`simplex`]). The weights are learned either by alternating SVM and
//! weight updates ([`mkl_em`]) or by contrastive pair alignment through a
//! softmax reparametrisation ([`dmkl`]). Classification uses one-vs-rest
//! kernel machines ([`svm`]).
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the working precision for the common case.

// `!(x > 0.0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataio;
pub mod dmkl;
pub mod hierarchy;
pub mod kernels;
mod linalg;
pub mod mkl_em;
mod scalar;
pub mod simplex;
pub mod svm;
pub mod synth;

pub use linalg::min_eigenvalue;
pub use scalar::Scalar;

/// Working precision for training and evaluation.
pub type Real = f64;
pub type Tree = hierarchy::PooledTree<Real>;
pub type Model = svm::SvmModel<Real>;
