//! Open-world image stream classification with a learned unit-sphere metric.
//!
//! The pipeline trains a small convolutional embedding jointly with
//! one-vs-rest sigmoid heads, rejects low-confidence instances via adaptive
//! per-class thresholds, purifies the rejected buffer with density
//! clustering plus one label query per cluster, and retrains itself as
//! novel classes accumulate.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dscu;
pub mod error;
pub mod gradcheck;
pub mod metric;
pub mod ncp;
pub mod network;
pub mod owc;
pub mod stats;
pub mod stream;
pub mod tensor;

pub use error::{Error, Result};
