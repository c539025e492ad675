//! Dense real tensors with reverse-mode automatic differentiation.
//!
//! Complex spectra are stored as channel pairs: a `[B, 2C, ...]` tensor holds
//! `C` complex planes, real part at channel `2c` and imaginary part at `2c + 1`.

mod array;
pub mod checkpoint;
mod conv;
mod graph;
mod real;

pub use array::{broadcast_shape, Tensor};
pub use checkpoint::{Checkpoint, CheckpointError};
pub use graph::{Gradients, Graph, LinearMap, NodeId, Var};
pub use real::Real;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} does not hold {len} elements")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward through {op} produced a non-finite gradient")]
    NonFiniteGradient { op: &'static str },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward called on a consumed graph")]
    GraphConsumed,
    #[error("{0}")]
    InvalidArgument(String),
}
