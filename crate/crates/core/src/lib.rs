//! Label-noise learning lab.
//!
//! Everything needed to reproduce desk-scale label-noise experiments:
//! transition-matrix noise synthesis, a small MLP classifier with exact
//! backpropagation, risk-consistent objectives (plain CE, forward
//! correction, importance reweighting, joint volume-minimized transition
//! learning), the loss-variance regularizer that plugs into each of them,
//! anchor-point transition estimation, and an SGD trainer with
//! memorization diagnostics.
//!
//! The variance regularizer subtracts `α·Var(ℓ)` from the empirical risk;
//! its gradient is identical to weighting each example's loss gradient by
//! `w = 1 + 2α(mean(ℓ) − ℓ)`, which is how the trainer implements it.

pub mod data;
pub mod estimate;
pub mod mlp;
pub mod noise;
pub mod numerics;
pub mod risk;
pub mod trainer;

use thiserror::Error as ThisError;

/// Crate-wide error type.
#[derive(Debug, ThisError)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("singular matrix")]
    SingularMatrix,
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("bad file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub use data::{Dataset, NoisyDataset, SyntheticSpec};
pub use mlp::{GradientBuffer, Mlp};
pub use noise::{NoiseKind, NoiseSpec, TransitionMatrix};
pub use numerics::{Matrix, RngStream, StreamId};
pub use risk::{LossHead, MeanMode, Method, RiskSpec, TrainableTransition};
pub use trainer::{ExperimentConfig, OptimizerConfig, TrainReport};
