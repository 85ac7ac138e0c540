//! Minimal CPU neural-network engine: valid-padding convolutions, max
//! pooling, dense layers, SGD with per-layer freezing, head replacement and
//! a binary checkpoint format.

pub mod checkpoint;
pub mod layer;
pub mod network;
mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use layer::{conv2d, LayerKind, LayerSpec, Params};
pub use network::{sgd_step, ActivationTrace, Architecture, Gradients, Layer, LossKind, Network};
pub use tensor::Tensor;
pub use train::{accuracy, fit, one_hot, EpochStats, TrainConfig};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape incompatibility in {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("numeric failure at layer {layer} during {phase}")]
    NumericFailure { layer: usize, phase: &'static str },
    #[error("invalid layer: {0}")]
    InvalidLayer(String),
    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
}
