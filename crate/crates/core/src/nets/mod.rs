//! Block-structured classifiers, their quantized twins, and the image
//! transformation networks.

mod layers;
mod model;
mod quantized;
mod train;
mod transform;

use thiserror::Error;

pub use layers::{BatchNorm, BnStats, Conv2d, Linear};
pub use model::{
    build_tiny_model, pool_features, ArchConfig, Block, BlockModel, BlockQuant, DenseBlock, Head, ResBlock, TensorKind,
};
pub use quantized::{QuantConfig, QuantizedModel};
pub use train::{accuracy_of, argmax_rows, cross_entropy, model_accuracy, train_fp_model, TrainConfig, TrainReport};
pub use transform::{AffineTransform, ColorTransform, Transform, TransformNet, UNetConfig};

use crate::quant::QuantError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("block index {index} out of range for {blocks} blocks")]
    BlockIndex { index: usize, blocks: usize },
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, NetError>;
