//! Training-data attribution for diffusion models.
//!
//! The toolkit centers on MUCS (mirrored unlearning and noise-consistent
//! skew): given a pretrained denoiser and one of its generations, a second
//! model is fine-tuned with bounded mirrored gradient ascent until the
//! generation reaches null-model performance, and every training instance
//! is then scored by the normalized skew between the two models' losses
//! over a shared set of noise pairs.
//!
//! Crate layout mirrors the pipeline:
//! - [`diffusion`]: denoiser, loss variants, noise draws, schedules,
//!   deterministic sampling, pretraining.
//! - [`data`]: toy dataset construction and leave-k-out removal bookkeeping.
//! - [`nullloss`]: random-performance loss estimation.
//! - [`unlearn`]: bounded mirrored unlearning with the dynamic stop rule.
//! - [`score`]: noise-consistent normalized skew scoring and its ablations.
//! - [`methods`]: attribution strategies behind a common trait, selected
//!   by name at runtime (MUCS, baselines, ablation variants).
//! - [`embed`] / [`simil`]: pluggable embedders and similarity metrics.
//! - [`stats`]: AUC, Mann-Whitney significance, normalized differences.
//! - [`eval`]: leave-k-out counterfactual evaluation harness.
//! - [`analysis`]: top-k overlap statistics and rank ensembling.

pub mod analysis;
pub mod data;
pub mod diffusion;
pub mod embed;
pub mod error;
pub mod eval;
pub mod methods;
pub mod nullloss;
pub mod records;
pub mod rng;
pub mod score;
pub mod simil;
pub mod stats;
pub mod unlearn;

pub use error::CoreError;
pub use rng::RngKey;

/// Convenience result alias used across the crate.
pub type Result<T> = std::result::Result<T, CoreError>;
