//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("non-finite loss at sigma={sigma}")]
    NonFiniteLoss { sigma: f64 },

    #[error("training diverged at step {step}; last losses: {trace:?}")]
    Diverged { step: usize, trace: Vec<f64> },

    #[error("unlearning diverged at step {step} (run {run}); last losses: {trace:?}")]
    UnlearnDiverged {
        run: String,
        step: usize,
        trace: Vec<f64>,
    },

    #[error("non-finite null loss (random-init seed {seed:?})")]
    NonFiniteNullLoss { seed: String },

    #[error("unknown {kind} '{name}'; known: {known:?}")]
    UnknownName {
        kind: &'static str,
        name: String,
        known: Vec<String>,
    },

    #[error("provenance mismatch: {0}")]
    ProvenanceMismatch(String),

    #[error("removal would exhaust the dataset ({removed} of {total} instances)")]
    RemovalExhaustsDataset { removed: usize, total: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}
