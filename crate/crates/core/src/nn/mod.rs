//! Layers of the 3D residual network: convolution, batch normalization,
//! ReLU, max and global average pooling, fully connected, and the softmax
//! cross-entropy loss. Each operation is a [`Tape`](crate::Tape) method with
//! its own backward rule.

mod activation;
mod batchnorm;
pub mod conv;
mod layers;
mod linear;
mod loss;
mod pool;

pub use batchnorm::BatchStats;
pub use conv::{conv3d_direct, conv3d_forward, conv3d_output_shape, ConvGeometry};
pub use layers::{BatchNorm3d, Conv3d, ForwardCtx, Linear, Mode};
pub use loss::softmax;
pub use pool::max_pool3d_forward;
