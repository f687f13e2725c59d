//! Elastic decision transformer: a return-conditioned causal transformer whose
//! action inference searches over history lengths using a learned
//! maximum-return estimate.
//!
//! Module map:
//! - [`numerics`]: tensors, reverse-mode gradients, AdamW, gradient checks
//! - [`envs`]: fork and chain MDPs, behavior policies, exact optimum
//! - [`data`]: trajectories, return scaling and bins, window sampling, JSONL
//! - [`model`]: embeddings, masked causal blocks and the four heads
//! - [`training`]: expectile and combined losses, training loop, checkpoints
//! - [`inference`]: history-length search, expert-return sampling, rollouts

pub mod data;
pub mod envs;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod training;

use thiserror::Error;

pub use numerics::NumericError;

/// Invalid configuration or input, naming the offending field.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid `{field}`: {reason}")]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl ConfigError {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("numeric fault at training step {step}: {source}")]
    TrainingFault { step: usize, source: NumericError },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
