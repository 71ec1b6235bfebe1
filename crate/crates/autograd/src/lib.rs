//! Reverse-mode automatic differentiation over dense real tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles; calling
//! [`Tape::backward`] on a one-element result yields the gradient of every
//! tracked leaf. Kernels are generic over [`Real`] so the same graph can be
//! evaluated in `f32` for training and in `f64` for finite-difference checks.

mod ops;
mod real;
mod tape;
mod tensor;

pub mod check;

pub use ops::{broadcast_shape, concat, sigmoid, softplus, softplus_inv, sum_to_shape, PadMode};
pub use real::{gemm, MatRef, Real};
pub use tape::{BackwardFn, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward needs a one-element root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
