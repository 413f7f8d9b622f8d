//! Step-calibrated diffusion restoration.
//!
//! A degraded image is treated as an intermediate state of a reverse
//! diffusion chain. A step calibrator estimates how many reverse steps remain,
//! the sampler runs that many DDPM steps, and the calibrator is consulted again
//! every `d` steps so the remaining count can be corrected on the fly.
//!
//! Modules, bottom-up:
//!
//! * [`schedule`]: cosine and linear noise schedules.
//! * [`image`]: image containers, region masks, seeded RNG streams, PFT/PNG I/O.
//! * [`diffusion`]: forward corruption, the single reverse step, full generation.
//! * [`nn`]: small dense layers with hand-derived backpropagation and Adam/SGD.
//! * [`denoiser`]: the epsilon-predictor contract, an exact Gaussian-mixture
//!   oracle and a trainable per-pixel network.
//! * [`calibrator`]: neural, nonparametric (PCA) and oracle step calibrators.
//! * [`restore`]: the calibrated sampler with dynamic recalibration, ablations
//!   and baselines.
//! * [`synth`]: synthetic clean corpora and degradations.
//! * [`metrics`]: PSNR, SSIM and kernel MMD.
//! * [`bench`]: experiment orchestration and report writers.
//! * [`config`]: the JSON root configuration shared with the CLI.

pub mod bench;
pub mod calibrator;
pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod restore;
pub mod schedule;
pub mod synth;

pub use error::{Error, Result};
