//! Hierarchical discrete transformer for probabilistic multivariate
//! time-series forecasting.
//!
//! Two stages: a pair of vector-quantized tokenizers turns forecast windows
//! (and their moving-average trend) into codebook indices, then a
//! hierarchical autoregressive transformer prior generates trend tokens
//! followed by target tokens conditioned on the history and the trend.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod sampler;
pub mod series;
pub mod tensor;
pub mod transformer;
pub mod vq;

pub use error::{HdtError, Result};
