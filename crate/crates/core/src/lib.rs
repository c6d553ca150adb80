//! Class-incremental learning with per-task convolutional adapters that are
//! merged by running mean into a single network, followed by balanced
//! fine-tuning of one unified classification head.
//!
//! Module map:
//! - [`numerics`]: tensors, reverse-mode gradients, losses, optimizers.
//! - [`model`]: frozen backbone blocks, bottleneck adapters, heads, checkpoints.
//! - [`merging`]: batch and incremental adapter averaging with freeze semantics.
//! - [`replay`]: fixed-budget class-balanced exemplar buffer.
//! - [`data`]: IDX ingestion, synthetic data, task splitting, preprocessing.
//! - [`metrics`]: accuracies, confusion matrices, static FLOPs analysis.
//! - [`pipeline`]: per-task stage orchestration, baselines and ablations.

pub mod data;
pub(crate) mod kv;
pub mod error;
pub mod metrics;
pub mod merging;
pub mod pipeline;
pub mod model;
pub mod numerics;
pub mod replay;

#[cfg(test)]
pub(crate) mod oracle;

pub use error::{Error, Result};
