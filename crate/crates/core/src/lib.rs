//! Reconstruction of 3D time-sequence conductivity volumes from boundary
//! voltage measurements with an untrained volumetric network prior,
//! warm-started parameters, frame-to-frame parameter propagation, and
//! spatio-temporal total variation.
//!
//! Module map:
//! - [`geometry`]: voxel grid, electrode belt, measurement protocol
//! - [`forward`]: lead-field sensitivity, forward projection, noise
//! - [`phantom`]: dynamic breathing phantoms and measurement synthesis
//! - [`baselines`]: Tikhonov and spatial-TV reconstructions
//! - [`priornet`]: the volumetric residual U-Net and its autodiff engine
//! - [`regularizers`]: spatial, temporal and combined total variation
//! - [`d2ip`]: warm-start, per-frame optimization and parameter propagation
//! - [`metrics`]: CC, PSNR, MSSIM, ERR

pub mod baselines;
pub mod d2ip;
pub mod error;
pub mod forward;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod priornet;
pub mod regularizers;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{devectorize, vectorize, Dims3, Volume};
