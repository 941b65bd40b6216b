//! Embedding extraction: where in the sequence the retrieval vector lives.

use serde::{Deserialize, Serialize};

use crate::numerics::{Element, Tape, Var};

use super::transformer::SeqForward;
use super::vocab::{TokenId, EMB, TAG_CLOSE};
use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingStrategy {
    /// Hidden state at the position immediately before the terminator: the
    /// state responsible for predicting it.
    PreToken,
    /// Hidden state at the terminator itself.
    LastToken,
    /// Hidden state at the closing structure tag wrapping the trace.
    TagClose,
}

impl std::fmt::Display for PoolingStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::PreToken => "pre",
            Self::LastToken => "last",
            Self::TagClose => "tag",
        };
        f.write_str(s)
    }
}

/// Index of the exactly-one occurrence of `needle` in `ids`.
fn sole_index(ids: &[TokenId], needle: TokenId, what: &str) -> Result<usize, ModelError> {
    let mut found = None;
    for (i, &id) in ids.iter().enumerate() {
        if id == needle {
            if found.is_some() {
                return Err(ModelError::Protocol(format!(
                    "sequence contains more than one {what} token"
                )));
            }
            found = Some(i);
        }
    }
    found.ok_or_else(|| ModelError::Protocol(format!("sequence contains no {what} token")))
}

/// Hidden-state row the embedding is read from, given the token sequence and
/// its row alignment.
pub fn embedding_row(
    ids: &[TokenId],
    row_of_token: &[usize],
    strategy: PoolingStrategy,
) -> Result<usize, ModelError> {
    let emb_at = sole_index(ids, EMB, "terminator")?;
    match strategy {
        PoolingStrategy::PreToken => {
            let row = row_of_token[emb_at];
            if row == 0 {
                return Err(ModelError::Protocol(
                    "terminator is the first position; no pre-token state exists".into(),
                ));
            }
            Ok(row - 1)
        }
        PoolingStrategy::LastToken => Ok(row_of_token[emb_at]),
        PoolingStrategy::TagClose => {
            let tag_at = sole_index(ids, TAG_CLOSE, "closing tag")?;
            Ok(row_of_token[tag_at])
        }
    }
}

/// Pull the pooled hidden state as a `(1 x d)` unit-norm tape node.
pub fn extract_embedding<E: Element>(
    tape: &mut Tape<E>,
    fwd: &SeqForward,
    ids: &[TokenId],
    strategy: PoolingStrategy,
) -> Result<Var, ModelError> {
    let row = embedding_row(ids, &fwd.row_of_token, strategy)?;
    let sliced = tape.slice_rows(fwd.hidden, row, 1)?;
    Ok(tape.l2_normalize_rows(sliced)?)
}

/// Value-level variant used by inference.
pub fn pooled_values(
    hidden: &crate::numerics::Tensor<f32>,
    ids: &[TokenId],
    row_of_token: &[usize],
    strategy: PoolingStrategy,
) -> Result<Vec<f32>, ModelError> {
    let row = embedding_row(ids, row_of_token, strategy)?;
    let d = hidden.dims2().1;
    let slice = &hidden.data[row * d..(row + 1) * d];
    let norm: f32 = slice.iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm <= 0.0 {
        return Err(ModelError::Protocol("pooled state has zero norm".into()));
    }
    Ok(slice.iter().map(|v| v / norm).collect())
}

/// Parsing helper shared by the pooling CLI flags.
pub fn parse_pooling(s: &str) -> Result<PoolingStrategy, ModelError> {
    match s {
        "pre" | "pre_token" => Ok(PoolingStrategy::PreToken),
        "last" | "last_token" => Ok(PoolingStrategy::LastToken),
        "tag" | "tag_close" => Ok(PoolingStrategy::TagClose),
        other => Err(ModelError::Config(format!("unknown pooling '{other}'"))),
    }
}
