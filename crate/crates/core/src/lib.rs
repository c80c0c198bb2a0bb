//! Hyperspectral band repair with a masked-conditional diffusion model.
//!
//! The crate is organised bottom-up:
//!
//! - [`gradcore`]: dense tensors and a reverse-mode tape.
//! - [`specdata`]: synthetic scenes from a closed-form canopy model, patching
//!   and normalization, the `HSC1` cube format.
//! - [`sensorlib`]: spectral response functions, spline resampling and the
//!   two-stage sensor/dropout masking that produces conditioning pairs.
//! - [`physops`]: differentiable spectral indices and physical losses.
//! - [`emulator`]: the frozen MLP surrogate of the canopy model.
//! - [`denoiser`]: the conditional U-Net noise predictor.
//! - [`diffusion`]: schedule, training, guided DDIM sampling, checkpoints.
//! - [`metrics`]: PSNR, SSIM, RMSE, SAM and index consistency.
//! - [`pipeline`]: end-to-end experiment drivers shared by the CLI and tests.

pub mod emulator;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod gradcore;
pub mod metrics;
pub mod physops;
pub mod pipeline;
pub mod sensorlib;
pub mod specdata;

pub use error::{Error, Result};
