//! Asymmetric convolution (ACM) fusion of different-sized feature maps.
//!
//! The crate provides the fusion operator and the concatenation oracle it is
//! equivalent to, the correlation operators it replaces (XCorr and
//! DW-XCorr), a small tape-based autodiff engine for training and gradient
//! checks, feature-map diagnostics, a synthetic position-conditioned
//! classification task, and a timing harness.
//!
//! Kernels run sequentially by default. With the `parallel` feature (on by
//! default) callers may pass [`Exec::Parallel`] to the `*_with` variants;
//! results are bitwise identical to the sequential path.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autograd;
pub mod bench;
pub mod eqcheck;
pub mod error;
pub mod exec;
pub mod fusion;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod toy;
pub mod tsr;

pub use error::{Error, Result};
pub use exec::Exec;
pub use tensor::Tensor;
