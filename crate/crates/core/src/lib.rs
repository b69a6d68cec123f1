//! Unsupervised multivariate time-series anomaly detection built around a
//! tri-branch patch-wise encoder, an optional frozen transformer backbone,
//! and a shared patch-wise reconstruction decoder, plus a threshold-free
//! evaluation harness and a channel-independence memory benchmark.
//!
//! The crate is organized as:
//!
//! - [`tensor`]: dense tensors and a minimal reverse-mode autodiff tape
//! - [`data`]: CSV ingestion, normalization, windowing, synthetic series
//! - [`model`]: the encoder branches, gate fusion, backbone, decoder, and
//!   the full training/scoring pipeline with checkpointing
//! - [`eval`]: proximity-weighted and classical detection metrics
//! - [`bench`]: token/activation accounting and peak-allocation measurement
//! - [`config`]: the flat `section.key = value` run-configuration format

#![allow(clippy::needless_range_loop)] // index loops keep the kernels' symmetry explicit

pub mod alloc_track;
pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};

/// On-disk format version for checkpoints; bumped on breaking layout changes.
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Code version embedded in run manifests and checkpoints.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
