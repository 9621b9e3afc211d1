//! Small double-precision neural networks with hand-written backpropagation.

pub mod checkpoint;
pub mod gradcheck;
pub mod mlp;
pub mod optim;
pub mod policy;

pub use checkpoint::{Checkpoint, Tensor};
pub use mlp::{FinalInit, Mlp, MlpSpec};
pub use optim::{Adam, TargetCopy};
pub use policy::{GaussianPolicy, PolicySample};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("backward called before forward")]
    BackwardWithoutForward,
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("bad network spec: {0}")]
    BadSpec(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
