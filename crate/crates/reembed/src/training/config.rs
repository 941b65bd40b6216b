//! Trainer configuration.

use serde::{Deserialize, Serialize};

use crate::model::{AdapterConfig, PoolingStrategy};
use crate::synth::{default_mix, MixSpec};

/// How candidate sequences are built for the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateMode {
    /// Visual slots, the fixed 4-token prompt, terminator. No text about the
    /// item itself.
    Raw,
    /// Visual slots, the item description, terminator.
    Answer,
    /// Visual slots, the item description padded with 0..=40 filler tokens,
    /// terminator. Emulates stochastic candidate-side generation length.
    FullCot,
}

impl std::fmt::Display for CandidateMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CandidateMode::Raw => "raw",
            CandidateMode::Answer => "answer",
            CandidateMode::FullCot => "full_cot",
        };
        f.write_str(s)
    }
}

/// Which part of the ground-truth response supervises complex samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseVariant {
    /// The whole structured trace.
    Full,
    /// The trace without its final target clause.
    ReasoningOnly,
    /// Only the target description.
    AnswerOnly,
    /// No intermediate tokens; every sample is supervised as direct.
    Direct,
}

impl std::fmt::Display for ResponseVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ResponseVariant::Full => "full",
            ResponseVariant::ReasoningOnly => "reasoning_only",
            ResponseVariant::AnswerOnly => "answer_only",
            ResponseVariant::Direct => "direct",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_gen: f64,
    pub lambda_ret: f64,
    /// Contrastive temperature.
    pub tau_temp: f64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub seed: u64,
    pub adapter: Option<AdapterConfig>,
    pub candidate_mode: CandidateMode,
    pub pooling: PoolingStrategy,
    pub response_variant: ResponseVariant,
    pub mix: MixSpec,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            // 1:1 weighting won the upstream sweep over {0, 0.5, 1.0, 2.0}
            lambda_gen: 1.0,
            lambda_ret: 1.0,
            tau_temp: 0.05,
            batch_size: 64,
            base_lr: 3e-4,
            min_lr: 0.0,
            weight_decay: 0.01,
            total_steps: 900,
            warmup_steps: 30,
            seed: 0,
            adapter: None,
            candidate_mode: CandidateMode::Raw,
            pooling: PoolingStrategy::PreToken,
            response_variant: ResponseVariant::Full,
            mix: default_mix(),
            log_every: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), super::TrainError> {
        if self.lambda_gen < 0.0 || self.lambda_ret < 0.0 {
            return Err(super::TrainError::Config(
                "loss weights must be non-negative".into(),
            ));
        }
        if self.tau_temp <= 0.0 {
            return Err(super::TrainError::Config(
                "contrastive temperature must be positive".into(),
            ));
        }
        if self.batch_size < 2 {
            return Err(super::TrainError::Config(
                "in-batch contrastive loss needs batch_size >= 2".into(),
            ));
        }
        if self.total_steps == 0 {
            return Err(super::TrainError::Config("total_steps must be positive".into()));
        }
        Ok(())
    }
}
