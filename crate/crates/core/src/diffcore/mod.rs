//! Minimal reverse-mode differentiation over dense `f64` arrays.

pub mod checkpoint;
mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, FD_STEP};
pub use graph::{softmax_channels_inplace, Gradients, Graph, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
