//! Desk-scale attention laboratory.
//!
//! Implements a two-stage attention design -- a softplus-based,
//! length-scaled normalisation stage and a power re-weighting stage -- next
//! to softmax and softmax-free baselines, plus a tiny byte-level transformer
//! and an experiment harness for length-extrapolation studies.

pub mod activations;
pub mod error;
pub mod numcore;

pub use error::{Error, Result};
