//! Tensor-level layer operations with hand-written backward passes.
//!
//! These are plain functions over [`Tensor`](crate::Tensor)s. The
//! differentiable versions that record onto a tape live in
//! [`autodiff`](crate::autodiff).

pub mod conv;
pub mod fft;
pub mod norm;
pub mod pointwise;
pub mod resample;

pub use conv::{conv2d, conv_transpose2d, ConvGeometry};
pub use fft::fft2;
pub use norm::{batch_norm_eval, batch_norm_train, NormMode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use pointwise::{add, concat_channels, leaky_relu, mul, sigmoid, split_channels, sub};
pub use resample::{resize_double, resize_half};
