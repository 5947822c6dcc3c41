//! Context-encoding variational autoencoder (ceVAE) for unsupervised
//! anomaly detection on 2D slices.
//!
//! The model is trained on healthy slices only. A slice is scored by its
//! approximate negative ELBO (KL term plus L1 reconstruction), and pixels
//! are scored by multiplying the reconstruction error with a smoothed,
//! guided-backpropagated gradient of the KL term.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corruption;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod objectives;
pub mod real;
pub mod rng;
pub mod scoring;
pub mod trainer;

pub use error::{CevaeError, Result};
