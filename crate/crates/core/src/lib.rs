//! Array-geometry-agnostic continuous speech separation.
//!
//! A long multichannel recording from any microphone array is split into
//! sliding windows. In each window a permutation-invariant mask estimator
//! (conformer blocks interleaved with transform-average-concatenate layers)
//! predicts masks for two speakers and two noise classes; the masks drive MVDR
//! beamformers whose outputs are gain-adjusted, aligned with the previous
//! window and stitched into two overlap-free output signals.

pub mod beamform;
pub mod cli;
pub mod error;
pub mod features;
pub mod model;
pub mod pipeline;
pub mod signal;
pub mod simulator;
pub mod training;

pub use error::{Error, Result};
