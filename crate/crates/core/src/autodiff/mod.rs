//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use kernels::{box3_reflect, Padding};
pub use tape::{FrozenValues, Gradients, Tape, Var};
pub use tensor::Tensor;
