//! Variational-autoencoder intrusion detection on NSL-KDD records, with a
//! per-prediction confidence score: the Mahalanobis distance from a sample's
//! latent embedding to its nearest training embedding.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod confidence;
pub mod config;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod ingest;
pub mod numcore;
pub mod report;
pub mod vae;

pub use error::{Error, Result};
