//! Mask-conditioned diffusion-transformer video outpainting.
//!
//! Everything in this crate is pure computation over `f64` grids and is
//! `no_std` (with `alloc`). File formats, checkpoints and the command line
//! live in the companion `outdreamer-cli` crate.
//!
//! Module map:
//!
//! - [`tensor`] / [`autodiff`]: dense tensors and a reverse-mode tape.
//! - [`codec`]: exact space-to-depth codec, mask downsampling, masked inputs.
//! - [`diffusion`]: noise schedule, forward noising, `ẑ₀` estimate, guided sampler.
//! - [`dit`]: the transformer denoiser with mask-driven self-attention.
//! - [`control`]: the convolutional control branch and its feature alignment.
//! - [`model`]: backbone + control branch wired together as a [`diffusion::Denoiser`].
//! - [`training`]: losses, masking policy, synthetic data and the optimizer loop.
//! - [`long_video`] / [`refiner`]: clip planning, overlap conditioning and the
//!   cross-clip colour refiner.
//! - [`metrics`] / [`pipeline`]: PSNR/SSIM, evaluation masks, blending and the
//!   end-to-end outpainting drivers.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod codec;
pub mod control;
pub mod diffusion;
pub mod dit;
mod error;
pub mod long_video;
pub(crate) mod math;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod refiner;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
