//! Single-image dehazing toolkit.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense NCHW `f64` tensors, a reverse-mode tape and the
//!   convolution / normalisation kernels everything else is built from.
//! - [`nn`]: the mix structure block (multi-scale parallel large-kernel
//!   module followed by enhanced parallel attention), SK fusion and the
//!   resampling layers.
//! - [`network`]: the five-stage U-net, soft reconstruction head,
//!   parameter/MAC analysis and checkpoints.
//! - [`hazegen`]: atmospheric scattering synthesis of paired data.
//! - [`training`]: L1 + contrastive objective, AdamW, cosine schedule and
//!   the training loop.
//! - [`metrics`]: PSNR and SSIM.

pub mod error;
pub mod hazegen;
pub mod kv;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod selfcheck;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
