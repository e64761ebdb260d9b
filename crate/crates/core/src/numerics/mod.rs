//! Dense `f64` tensors with a small reverse-mode differentiation tape.
//!
//! Only the operations the encoder and its training objectives need are
//! provided: linear layers, causal dilated convolutions, elementwise
//! activations, dropout, distances and reductions.

mod gemm;
mod gradcheck;
mod graph;
mod rng;
mod tensor;

pub use gradcheck::{finite_difference_check, GradCheck};
pub use graph::{ConvSpec, Graph, Var};
pub use rng::{mix_seed, StreamRng};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("contract violation: {0}")]
    Contract(String),
}
