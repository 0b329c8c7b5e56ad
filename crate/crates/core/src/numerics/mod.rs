//! Dense tensors, reverse-mode differentiation, Adam, and finite-difference
//! gradient checking.

mod adam;
mod gradcheck;
mod graph;
pub mod ops;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState, StepStats};
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, REL_ERROR_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Scalar, Tensor};
