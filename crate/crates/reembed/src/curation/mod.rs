//! Dataset curation: complexity routing, dual filtering, dedup, assembly.

mod pipeline;
mod rules;
mod verify;

pub use pipeline::{
    assemble_dataset, corrupt_trace, curate, dedup, write_verdicts, CurateConfig, CurationOutput,
    CurationStats,
};
pub use rules::{
    normalize, render_raw, rule_filter, ParsedGeneration, RawGeneration, RuleContext, RuleLimits,
    STOPWORDS,
};
pub use verify::{
    verify_consistency, AssessorClient, AssessorReply, EndpointConfig, EndpointRequest,
    VerifierClient, VerifierReply,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Filter stages in their fixed pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Stage {
    Format,
    Length,
    Keyword,
    Dedup,
    Verifier,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Format => "FORMAT",
            Stage::Length => "LENGTH",
            Stage::Keyword => "KEYWORD",
            Stage::Dedup => "DEDUP",
            Stage::Verifier => "VERIFIER",
        };
        f.write_str(s)
    }
}

/// One stage's decision for one record. Confidence is present exactly for
/// the verifier stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub sample_id: u64,
    pub stage: Stage,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    pub reason: String,
}

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("endpoint failure: {0}")]
    Endpoint(String),
    #[error("assembly failure: {0}")]
    Assembly(String),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization failure: {0}")]
    Json(#[from] serde_json::Error),
}
