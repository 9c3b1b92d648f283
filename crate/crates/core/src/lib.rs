//! Multi-scale 1-D ResNet pipeline for out-of-distribution 12-lead ECG
//! classification: record ingestion, preprocessing, a small reverse-mode
//! tensor engine, the tapped ResNet-18 model, training and the
//! domain-generalization evaluation harness.
// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dsp;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod record_io;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
