//! Label-space diffusion for language-driven segmentation.
//!
//! Segmentation masks are treated as the object of generation: a conditional
//! diffusion model denoises mask latents from Gaussian noise, guided by an
//! image latent (channel concatenation) and a noun phrase (cross-attention
//! plus token-level adapter injection). The crate covers the full pipeline:
//! noise schedules and reverse-step math, label/image codecs, the conditional
//! U-Net with analytic gradients, the training loop with conditional dropout,
//! classifier-free-guided sampling, IoU/Average-Recall evaluation, and a
//! deterministic synthetic shapes benchmark.
//!
//! All numeric kernels are generic over the scalar type via [`Scalar`]
//! (`f32` for throughput, `f64` for verification); concrete aliases live at
//! the crate root.

pub mod codec;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod grid;
pub mod model;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod text;
pub mod training;

pub use error::{Error, Result};
pub use grid::LatentGrid;

use std::fmt;

/// Scalar type the numeric core is generic over: `f32` or `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssignOps
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Lossless widening for accumulation and serialization.
    fn to_f64_c(self) -> f64;
    /// Conversion from `f64`, rounding if necessary.
    fn from_f64_c(x: f64) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn to_f64_c(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64_c(x: f64) -> Self {
        x as f32
    }
}

impl Scalar for f64 {
    #[inline]
    fn to_f64_c(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64_c(x: f64) -> Self {
        x
    }
}

/// Shorthand scalar conversion used throughout the numeric kernels.
#[inline]
pub fn fl<T: Scalar>(x: f64) -> T {
    T::from_f64_c(x)
}

/// Single-precision latent grid.
pub type Latent32 = LatentGrid<f32>;
/// Double-precision latent grid.
pub type Latent64 = LatentGrid<f64>;
/// Single-precision noise schedule.
pub type Schedule32 = diffusion::NoiseSchedule<f32>;
/// Double-precision noise schedule.
pub type Schedule64 = diffusion::NoiseSchedule<f64>;
/// Single-precision model bundle (default for training and the CLI).
pub type Model32 = model::LabelDiffusionModel<f32>;
/// Double-precision model bundle (used by gradient verification).
pub type Model64 = model::LabelDiffusionModel<f64>;
