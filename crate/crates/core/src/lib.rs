//! Split convolution: a convolution operator that partitions input channels
//! into a representative part (grouped k x k plus pointwise paths, summed)
//! and a redundant part (pointwise only), then recombines the two branch
//! outputs with a parameter-free softmax attention over per-channel
//! statistics.
//!
//! The crate bundles:
//! - [`tensor`]: the dense tensor substrate and convolution kernels,
//! - [`spconv`]: the split convolution operator (forward, backward,
//!   initialization, ablation variants),
//! - [`complexity`]: a closed-form parameter/FLOP analyzer over declarative
//!   architecture descriptions with builtin ResNet/VGG descriptors,
//! - [`train`]: a small, deterministic CPU training harness (SGD with
//!   momentum, batch norm, synthetic and CIFAR-10 data, gradient checking).

pub mod complexity;
pub mod error;
pub mod spconv;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
