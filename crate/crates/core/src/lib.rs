//! Attention-in-attention super-resolution network.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] - dense 4-D tensors, kernels and a reverse-mode tape
//! * [`imaging`] - PNG I/O, colour conversion, bicubic degradation, patches
//! * [`model`] - the network, its fusion variants and the probe model
//! * [`training`] - loss, Adam, the training loop and checkpoints
//! * [`metrics`] - Y-channel PSNR and SSIM
//! * [`analysis`] - attention statistics, heatmaps, branch-weight ranking
//!   and ablation runs

pub mod analysis;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
