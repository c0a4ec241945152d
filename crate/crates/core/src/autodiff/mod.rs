//! Tape-based reverse-mode automatic differentiation over dense tensors.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, InputCheck, Objective};
pub use graph::{Gradients, Graph, GrlSetting, OpKind, Var};
pub use tensor::{Scalar, Tensor};

#[cfg(test)]
mod tests;
