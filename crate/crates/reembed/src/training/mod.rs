//! Hybrid generative + contrastive training.

mod batch;
mod config;
mod loss;
mod trainer;

pub use batch::{TaskAwareSampler, TrainBatch};
pub use config::{CandidateMode, ResponseVariant, TrainConfig};
pub use loss::{loss_contrastive, loss_generative};
pub use trainer::{
    build_joint_loss, candidate_tokens, prepare_row, response_tokens, JointLossFn, LossVars,
    PreparedRow, StepStats, Trainer, CANDIDATE_JITTER_MAX,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("batch construction failed: {0}")]
    BatchSize(String),
    #[error("{side} embedding {index} has norm {norm} (unit norm required)")]
    Normalization {
        side: &'static str,
        index: usize,
        norm: f64,
    },
    #[error("non-finite loss at step {step} (gen {loss_gen}, ret {loss_ret})")]
    NonFinite {
        step: u64,
        loss_gen: f64,
        loss_ret: f64,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error(transparent)]
    Synth(#[from] crate::synth::SynthError),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("metrics write failure: {0}")]
    Csv(#[from] csv::Error),
}
