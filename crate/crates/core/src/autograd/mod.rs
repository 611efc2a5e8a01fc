//! Minimal reverse-mode differentiation: a tape of tensor ops rebuilt on
//! every forward pass, cross-entropy loss, SGD and finite-difference checks.

mod blocks;
pub mod gradcheck;
mod graph;
mod loss;
mod optim;

pub use blocks::{acm_block, AcmParams};
pub use gradcheck::{check_gradients, finite_diff_grad, gradcheck_suite, relative_error, GradCheckReport};
pub use graph::{Graph, ParamId, ParamSet, Parameter, Var};
pub use loss::{softmax, softmax_xent};
pub use optim::sgd_step;
