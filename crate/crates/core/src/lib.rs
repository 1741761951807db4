//! Spatiotemporal CNN engine for recognizing harvester work elements in
//! dashcam video.
//!
//! The numeric core ([`tensor`], [`nn`], [`resnet`]) is generic over the
//! element type through [`Scalar`]; training uses `f32` and gradient
//! verification uses `f64`. The remaining modules cover the data path
//! (clip decoding and preprocessing, manifests, synthetic data), the training
//! loop, and classification metrics.

pub mod dataset;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod resnet;
pub mod scalar;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod video;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};

/// Single-precision tensor used for training and inference.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor used by gradient checks.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Tape64 = tensor::Tape<f64>;
/// The trainable model at training precision.
pub type ResNet3d32 = resnet::ResNet3d<f32>;
pub type ResNet3d64 = resnet::ResNet3d<f64>;
