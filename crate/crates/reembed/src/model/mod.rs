//! The decoder-only causal transformer and everything attached to it.

pub mod checkpoint;
mod config;
mod pooling;
mod state;
mod transformer;
pub mod vocab;

pub use config::{AdapterConfig, ModelConfig};
pub use pooling::{embedding_row, extract_embedding, parse_pooling, pooled_values, PoolingStrategy};
pub use state::{layer_param, ModelState, EMBED_TOKENS, FINAL_NORM, LM_HEAD, PROJ_B, PROJ_W};
pub use transformer::{forward, forward_values, Binding, SeqForward, VisualInput};
pub use vocab::{TokenId, TokenVocab};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence of {len} positions exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("visual feature width {got} does not match projector input {want}")]
    ProjectorWidth { got: usize, want: usize },
    #[error("word '{0}' is not in the vocabulary")]
    OutOfVocabulary(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("numerics failure: {0}")]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}
