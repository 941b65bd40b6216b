//! Model hyperparameters and adapter settings.

use serde::{Deserialize, Serialize};

use super::vocab::TokenVocab;
use super::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
    pub visual_in_dim: usize,
    pub vocab: TokenVocab,
}

impl ModelConfig {
    /// Laptop-scale default: trains in minutes on a CPU while still showing
    /// routing emergence.
    pub fn toy_default() -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            ffn_mult: 4,
            max_seq_len: 96,
            rope_base: 10000.0,
            visual_in_dim: 10,
            vocab: TokenVocab::core(),
        }
    }

    /// Tiny configuration for tests and gradient checks.
    pub fn micro(d_model: usize, n_layers: usize, n_heads: usize) -> Self {
        Self {
            d_model,
            n_layers,
            n_heads,
            ffn_mult: 2,
            max_seq_len: 96,
            rope_base: 10000.0,
            visual_in_dim: 10,
            vocab: TokenVocab::core(),
        }
    }

    /// Retrieval embedding width; the pooled hidden state is used directly.
    pub fn embed_dim(&self) -> usize {
        self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(ModelError::Config("zero-sized model dimension".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(ModelError::Config(format!(
                "head dim {} must be even for rotary positions",
                self.head_dim()
            )));
        }
        if self.vocab.size() < 6 {
            return Err(ModelError::Config("vocabulary too small".into()));
        }
        Ok(())
    }
}

/// Low-rank adapter settings. Wrapping freezes the base parameters and adds
/// trainable `A (in x r)` / `B (r x out)` pairs per target; the adapted
/// forward is `x@W + (alpha/r) * (x@A)@B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Names of 2-D parameters to wrap.
    pub targets: Vec<String>,
}

impl AdapterConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}
