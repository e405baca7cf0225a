//! Two-stage latent diffusion for predicting a post-treatment MRI slice from a
//! pre-treatment slice, its tumor mask and a survival class.
//!
//! The crate is organised along the stages of the method:
//!
//! * [`data`]: grid files, the synthetic paired cohort, patient-level splits,
//!   survival classes and flip augmentation.
//! * [`vqvae`]: vector-quantized autoencoders for MRI slices and GTV masks.
//! * [`denoiser`]: the conditional UNet noise predictor.
//! * [`diffusion`]: noise schedule, training step, guidance and DDIM sampling.
//! * [`ldm`]: the trained diffusion bundle, latent scaling and generation.
//! * [`classifier`]: residual survival classifier on the pre-treatment slice.
//! * [`metrics`]: global and GTV-local MSE / PSNR / SSIM.
//! * [`pipeline`]: configuration, stage orchestration, inference and reports.

pub mod checkpoint;
pub mod classifier;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod ldm;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod vqvae;

pub use error::{Error, Result};
