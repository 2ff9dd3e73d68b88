//! Layers, the residual network and checkpointing.

pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod params;

use thiserror::Error;

use crate::error::TensorError;

pub use checkpoint::{load_network, save_network, CheckpointError};
pub use layers::{conv2d, conv2d_naive, BatchNorm, ConvLayerSpec, Mode, ResidualBlock, ResidualBlockSpec};
pub use model::{ArchConfig, ClassifierHead, FeatureExtractor, Network};
pub use params::{Bound, ParamId, ParamKind, ParamStore};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("incompatible input: {0}")]
    IncompatibleInput(String),
    #[error("invalid layer spec: {0}")]
    InvalidSpec(String),
}
