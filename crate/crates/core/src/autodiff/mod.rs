//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records operations as they are evaluated; [`Graph::backward`]
//! walks the tape in reverse and accumulates exact gradients into every node
//! that requires one. Parameters live outside the graph in a [`ParamSet`]
//! and are copied in as leaves with [`ParamSet::bind`].

mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod rng;
mod tensor;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use gradcheck::{gradient_check, relative_error, TensorGradError, RELATIVE_ERROR_FLOOR};
pub use graph::{DropoutKey, Graph, Var, CROSS_ENTROPY_CLAMP, ROW_SUM_TOLERANCE};
pub use params::ParamSet;
pub use rng::counter_uniform;
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("index {index} out of range for size {bound}")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("probability row {row} sums to {sum}, not 1")]
    NotNormalized { row: usize, sum: f64 },
    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("cycle detected at node {0}")]
    CycleDetected(usize),
    #[error("graph builder is non-deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
