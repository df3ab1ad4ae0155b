//! Keypoint detection and description directly on raw Bayer (RGGB) images.
//!
//! The library trains and evaluates a small convolutional network that
//! consumes a single-channel color filter array raster instead of a
//! demosaiced RGB image. Two stems with CFA-aware constrained kernels lift
//! the mosaic into feature space, a deformable-convolution encoder builds a
//! multi-scale feature stack, and two heads emit a keypoint score map and a
//! per-pixel unit-norm descriptor map.
//!
//! Module map:
//! - [`tensor`]: minimal reverse-mode autodiff engine (conv, deformable conv,
//!   pooling, bilinear upsampling, normalization, loss primitives).
//! - [`bayer`]: CFA raster type, RGB mosaicing, constrained 4x4 Bayer kernels
//!   and the stride-2 Bayer convolution, 16-bit PGM I/O.
//! - [`network`]: network configuration, parameter store, initialization,
//!   forward pass, checkpoint serialization.
//! - [`geometry`]: homographies, random transform sampling, image warping,
//!   point projection, normalized DLT and RANSAC estimation.
//! - [`train`]: synthetic shape dataset, homographic adaptation, losses,
//!   Adam, the detector and descriptor training loops.
//! - [`evalmatch`]: keypoint extraction, descriptor sampling, brute-force
//!   matching, repeatability and homography-based metrics.
//! - [`config`]: key=value run configuration shared by the CLI commands.

pub mod bayer;
pub mod config;
pub mod evalmatch;
pub mod geometry;
pub mod network;
pub mod tensor;
pub mod train;

use thiserror::Error;

/// Unified error type for the whole pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or axis disagreement between operands of a tensor operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    /// Invalid configuration value or unknown configuration key.
    #[error("config error: {0}")]
    Config(String),
    /// Caller misuse of an API (bad argument combinations, non-scalar
    /// backward roots, ...).
    #[error("usage error: {0}")]
    Usage(String),
    /// Malformed, truncated, or mismatched checkpoint bytes.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    /// Homography estimation could not produce a model.
    #[error("estimation error: {0}")]
    Estimation(String),
    /// Unreadable or malformed input data (images, homography files, ...).
    #[error("data error: {0}")]
    Data(String),
    /// A loss or intermediate value left the finite range during training.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
