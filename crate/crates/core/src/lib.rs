//! Quantized fine-grained VAE sequence model with separately trained
//! autoregressive prosody priors, plus pitch, cepstral and prosody-diversity
//! evaluation on a synthetic controllable-prosody corpus.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod priors;
pub mod records;
pub mod tape;
pub mod vq;

pub use error::{Error, Result};
