//! Probabilistic language-guided attention regularization.
//!
//! Frozen stand-in encoders feed probabilistic adapters that emit
//! generalized-Gaussian embedding distributions. Grad-CAM maps computed from
//! sampled image/text embedding pairs are aggregated into a reference
//! attention map, which then regularizes the spatial attention of a small
//! image classifier.

pub mod biasgen;
pub mod checkpoint;
pub mod classifier;
pub mod diffcore;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod ggd;
pub mod mapio;
pub mod nn;
pub mod saliency;
pub mod seed;

pub use error::{Error, Result};
