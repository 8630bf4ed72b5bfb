//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{analytic_grads, gradcheck, gradcheck_many, numeric_grads, relative_error};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Floor applied inside every `log` in loss code.
pub const LOG_EPS: f64 = 1e-12;
