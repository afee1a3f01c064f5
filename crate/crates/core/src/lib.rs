//! Partial rewriting of a small transformer with explanation-driven sparse
//! latents.
//!
//! The pipeline trains a toy decoder-only language model on a rule-generated
//! corpus, fits a TopK sparse transcoder to one of its MLP blocks (and a TopK
//! sparse autoencoder to the residual stream), explains each latent with a
//! token rule, simulates latent activations from those explanations,
//! calibrates the simulated values with per-latent quantile normalization and
//! finally splices the rewritten layer back into the model to measure the
//! cross-entropy cost.

pub mod calibration;
pub mod coder;
pub mod error;
pub mod explain;
pub mod format;
pub mod lm;
pub mod numerics;
pub mod patch;
pub mod simulator;
pub mod synthetic;

pub use error::{Error, Result};
