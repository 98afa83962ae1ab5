//! Dense tensors with reverse-mode differentiation.

pub mod checkpoint;
pub mod grad_check;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod param;
pub mod tape;
pub mod tensor;

use thiserror::Error;

pub use checkpoint::{write_atomic, Checkpoint, CheckpointError};
pub use grad_check::{grad_check, grad_check_module};
pub use param::{Init, Module, Param};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("axis {axis} out of range for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("{op}: empty axis {axis}")]
    EmptyAxis { op: &'static str, axis: usize },
    #[error("{op}: index {index} out of range for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("non-finite value produced by {op} (tape node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}
