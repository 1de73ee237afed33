//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Everything is `f64` and row-major. A [`Graph`] records operations as they
//! execute; [`Graph::backward`] replays them in reverse to accumulate
//! gradients. Parameters live outside any graph in a [`ParamStore`] and are
//! bound into a graph as leaf nodes at the start of each forward pass.

mod attention;
mod graph;
pub mod init;
mod ops;
mod params;
mod tensor;

pub use attention::MultiHeadAttention;
pub use graph::{BackwardOp, Gradients, Graph, NodeId};
pub use params::{bind, bind_frozen, read_f64_blob, write_f64_blob, BoundParams, ParamId, ParamStore};
pub use tensor::Tensor;

pub(crate) use ops::{stable_sigmoid, stable_softplus};

use thiserror::Error;

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch: {lhs:?} vs {rhs:?} in {op}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} values, got {actual}")]
    ValueCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("invalid axis {axis} for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("{op}: {reason}")]
    Config { op: &'static str, reason: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("parameter store i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("parameter index: {0}")]
    Index(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;
