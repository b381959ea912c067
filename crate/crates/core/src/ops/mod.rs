//! Layer primitives as pure functions over tensors.
//!
//! The graph in [`crate::autograd`] records these and calls their backward
//! kernels; the public functions here are the direct (non-recording) forms.

pub mod activation;
pub mod channel;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod pool;

pub use activation::{relu, sigmoid, sigmoid_scalar, softmax, softmax_cross_entropy};
pub use channel::{channel_scale, gdconv};
pub use conv::{conv2d, conv_output_size, Conv2dParams, ConvGeometry};
pub use linear::fully_connected;
pub use norm::{batch_norm, BatchNormConfig, BatchStats, BnMode, RunningStats};
pub use pool::{adaptive_avg_pool, adaptive_bin, global_avg_pool, max_pool, MaxPoolGeometry};
