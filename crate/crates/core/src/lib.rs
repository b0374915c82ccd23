//! Diffusion posterior sampling for linear inverse problems `y = A x + n`.
//!
//! The crate pairs three likelihood-score approximators (DPS, DMPS, πGDM)
//! with a closed-form adaptive prior-score scale (SAIP), and validates all of
//! it against an analytic Gaussian-mixture prior whose diffused scores and
//! posteriors are exactly computable.
//!
//! Module map:
//!
//! - [`numerics`]: signals, dense matrices, Cholesky, deterministic RNG.
//! - [`operators`]: identity / mask / circular uniform blur measurement models.
//! - [`diffusion`]: DDPM schedules, forward noising, Tweedie denoising, ancestral steps.
//! - [`gmm`]: Gaussian-mixture prior with exact scores and exact posteriors.
//! - [`guidance`]: likelihood-score estimators behind one interface.
//! - [`saip`]: the adaptive scale `s` and the combined posterior score.
//! - [`sampler`]: the reverse-sampling loop with per-step tracing.
//! - [`metrics`]: PSNR, block SSIM, sliced Wasserstein distance.
//! - [`harness`]: config-driven experiment runner used by the `saip-lab` CLI.

pub mod diffusion;
pub mod error;
pub mod gmm;
pub mod guidance;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod operators;
pub mod saip;
pub mod sampler;

pub use error::{Error, Result};
