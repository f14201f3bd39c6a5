//! Block-wise post-training quantization where a learnable transformation
//! network augments the calibration data, trained by bi-level meta-learning.
//!
//! The numerical core ([`tensor`], [`quant`], [`nets`], [`losses`], [`meta`])
//! is generic over the element type through [`Scalar`]; the orchestration and
//! I/O layers ([`pipeline`], [`config`], [`data`], [`checkpoint`],
//! [`metrics`]) work in `f64`, and the aliases below name the concrete types
//! they use.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod hypercheck;
pub mod losses;
pub mod meta;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod pipeline;
pub mod quant;
pub mod runner;
pub mod scalar;
pub mod tensor;

pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
