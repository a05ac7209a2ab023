//! Binary high-resolution pose estimation.
//!
//! The crate covers the full path from bit-packed ±1 arithmetic to a trained
//! keypoint estimator:
//!
//! * [`bitpack`] and [`kernels`]: sign quantization, XOR/popcount convolution,
//!   the real-valued reference and operation counting.
//! * [`autograd`] and [`blocks`]: layers with hand-written backward passes,
//!   the Binary Unit, IR-Bottleneck, MS-Block and cross-resolution fusion.
//! * [`model`]: multi-branch network assembly, cost accounting, model files.
//! * [`losses`], [`train`]: AWing, pixel-level KL, Adam and the
//!   teacher-to-student distillation loop.
//! * [`eval`], [`synthdata`]: heatmap coding, OKS/AP/PCKh and a synthetic
//!   stick-figure dataset.

extern crate self as bipose_core;

pub mod autograd;
pub mod bitpack;
pub mod blocks;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod losses;
pub mod model;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::FloatTensor;
