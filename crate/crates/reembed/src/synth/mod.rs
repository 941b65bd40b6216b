//! Deterministic compositional retrieval world: items, queries, traces, and
//! the brute-force target oracle.

mod oracle;
mod record;
mod sample;
mod world;

pub use oracle::oracle_target;
pub use record::{
    read_jsonl, tokenize_query, tokenize_sample, write_jsonl, DatasetRecord, TokenizedQuery,
    TokenizedSample,
};
pub use sample::{
    build_dataset, default_mix, gen_edit, gen_simple, instruction_prompt, mix_counts, parse_trace,
    Edit, MixSpec, ParsedTrace, QuerySample, TaskKind, CANDIDATE_PROMPT,
};
pub use world::{all_triples, gen_world, Item, Triple, World, MAX_ITEMS, VISUAL_DIM};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("requested {requested} items but only {max} distinct triples exist")]
    Capacity { requested: usize, max: usize },
    #[error("no valid (reference, edit) pair found for {task} after {retries} retries")]
    GenerationExhausted { task: &'static str, retries: usize },
    #[error("query '{query}' matches {matches} items (exactly one required)")]
    Ambiguity { query: String, matches: usize },
    #[error("trace parse failure: {0}")]
    TraceParse(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Vocab(#[from] crate::model::ModelError),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization failure: {0}")]
    Json(#[from] serde_json::Error),
}
