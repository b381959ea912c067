//! Channel reassessment attention (CRA) for convolutional networks.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`] and [`autograd`]: dense `f32`/`f64` tensors and a tape-based
//!   reverse-mode differentiator.
//! * [`ops`]: convolution, pooling, normalization, activations and the
//!   per-channel kernels used by attention.
//! * [`attention`]: the CRA module (adaptive pooling, global depthwise
//!   convolution, sigmoid, channel rescale) and the squeeze-and-excitation baseline.
//! * [`arch`]: declarative ResNet descriptors in base, SE and CRA variants.
//! * [`model`]: executable models materialized from descriptors, with checkpoints.
//! * [`cost`]: static parameter and FLOP accounting.
//! * [`data`] and [`train`]: datasets, augmentation, SGD and gradient checking.

pub mod arch;
pub mod attention;
pub mod autograd;
pub mod cost;
pub mod data;
pub mod element;
pub mod error;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod train;

pub use element::Element;
pub use error::{Error, Result};
pub use tensor::Tensor;
