//! Receptive-field-block super-resolution GAN toolkit.
//!
//! The crate is a small, self-contained training and inference stack:
//!
//! * [`tensor`], [`ops`], [`autograd`]: NCHW tensors, kernels, and a tape-based
//!   reverse-mode differentiator with a finite-difference oracle.
//! * [`nn`]: dense blocks, RRDB, RFB, RRFDB, upsampling stages, and the
//!   generator, discriminator, and feature extractor built from them.
//! * [`losses`], [`optim`], [`train`]: the loss algebra, Adam with step
//!   schedules, and the two-stage training loop.
//! * [`ensemble`], [`checkpoint`]: parameter averaging and the binary
//!   checkpoint format.
//! * [`data`], [`metrics`]: bicubic degradation, patch sampling, image IO, PSNR
//!   and SSIM.
//! * [`config`], [`infer`], [`gradcheck`]: TOML run configuration,
//!   checkpoint-backed upscaling, and the analytic-vs-numeric gradient suite
//!   behind the `rfbsr` binary.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod train;

pub use autograd::{Eval, Graph, ParamId, ParamStore, Tape, Var};
pub use error::{CheckpointError, Error, Result};
pub use ops::ConvSpec;
pub use tensor::{DType, Scalar, Shape, Tensor};
