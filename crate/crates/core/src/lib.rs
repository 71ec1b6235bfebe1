//! Scalable deep-unrolled reconstruction of undersampled multi-coil MRI.
//!
//! Complex data is stored as real tensors with an explicit real/imaginary
//! axis: a stack of `N` complex `H x W` images has shape `[N, 2, H, W]`.
//! Every learned component is expressed on an autodiff [`Tape`], and the
//! plain tensor functions evaluate the same graphs without recording
//! gradients.

pub mod augment;
pub mod backbone;
pub mod checkpoint;
pub mod conditioning;
pub mod csme;
pub mod dataset;
pub mod dc;
pub mod error;
pub mod experiments;
pub mod float;
pub mod kspace;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod phantom;
pub mod report;
pub mod train;
pub mod unroll;

pub use error::{Error, Result};
pub use float::Float;
pub use sdum_autograd::{Gradients, PadMode, Tape, Tensor, Var};
