//! Multimodal training laboratory.
//!
//! Implements two-modality classification models over a minimal,
//! deterministic dense-network core, with per-modality balancing of encoder
//! learning rates (multi-loss balanced coefficients alongside baseline
//! schemes), synthetic datasets engineered to exhibit modality competition,
//! and an experiment runner with calibration and agreement metrics.

pub mod error;
pub mod gradcheck;
pub mod matrix;
pub mod model;
pub mod param;
pub mod rng;

pub use error::{Error, Result};
pub use matrix::Matrix;
