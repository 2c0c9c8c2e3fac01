//! Multi-scale image deblurring network with frequency-aware blur perception,
//! built on a small CPU tensor library with reverse-mode autodiff.

pub mod autodiff;
pub mod blocks;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod network;
pub mod objectives;
pub mod oracle;
pub mod ops;
pub mod params;
pub mod selftest;
pub mod tensor;
pub mod trainer;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::{Real, Shape, Tensor};
