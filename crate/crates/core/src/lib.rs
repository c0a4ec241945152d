//! Few-shot, enrolment-conditioned emotion prediction for vocal bursts.
//!
//! The crate bundles everything needed to train and evaluate the dual-encoder
//! model end to end without external frameworks: a small reverse-mode autodiff
//! engine, log-Mel front end, synthetic corpus tooling, the seven ablation
//! architectures, CCC-based metrics, and the SGD training loop.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod dsp;
pub mod error;
pub mod metrics;
pub mod model;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
