//! CA-TriNet: a desk-scale image-to-report model — co-attention encoder with
//! adaptive double head weighting, a triple-LSTM decoder with a multi-label
//! head, the composite loss, and a caption-metric / head-statistics
//! evaluation pipeline. Everything runs on a self-contained f64 autodiff
//! engine so gradients are checkable by finite differences end to end.

pub mod attention;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod runner;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
