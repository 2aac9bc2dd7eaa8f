//! Patched denoising diffusion models (pDDPM) for unsupervised anomaly
//! detection on slice-wise image volumes.
//!
//! A healthy reference distribution is learned by a time-conditioned Unet
//! that reconstructs a noised patch from its unperturbed surroundings. At
//! test time a sliding patch is noised and denoised at a fixed timestep,
//! the per-patch estimates are stitched back together, and the voxel-wise
//! reconstruction error serves as the anomaly score.
//!
//! Module map:
//! - [`schedules`]: beta schedule and closed-form forward noising
//! - [`noise`]: Gaussian and multi-octave simplex noise fields
//! - [`patching`]: patch grid, masks, partial noising and stitching
//! - [`denoiser`]: the Unet, its losses, Adam and checkpoints
//! - [`pipeline`]: training, sliding-patch inference and post-processing
//! - [`metrics`]: Dice, AUPRC, healthy l1 and the permutation test
//! - [`data`]: phantoms, anomaly injection, volume I/O, preprocessing, splits

pub mod data;
pub mod denoiser;
pub mod error;
pub mod metrics;
pub mod noise;
pub mod patching;
pub mod pipeline;
pub mod schedules;
pub mod tensor;

pub use error::{Error, Result};
