//! The dataset JSONL schema and tokenization into model sequences.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::vocab::{TokenId, TokenVocab, EMB};
use crate::model::VisualInput;

use super::sample::{instruction_prompt, QuerySample, TaskKind};
use super::world::World;
use super::SynthError;

/// One line of the dataset file. Field order is part of the contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: u64,
    pub task_kind: TaskKind,
    pub z: u8,
    pub query_text: String,
    pub visual_ref_feature: Option<Vec<f32>>,
    pub trace: String,
    pub answer_text: String,
    pub target_id: u64,
    pub world_seed: u64,
}

impl DatasetRecord {
    pub fn from_sample(world: &World, sample: &QuerySample) -> Result<Self, SynthError> {
        let visual_ref_feature = match sample.visual_ref {
            None => None,
            Some(id) => Some(
                world
                    .item(id)
                    .ok_or_else(|| {
                        SynthError::Invalid(format!("reference item {id} not in world"))
                    })?
                    .visual_feature
                    .clone(),
            ),
        };
        let target = world
            .item(sample.target_id)
            .ok_or_else(|| SynthError::Invalid(format!("target {} not in world", sample.target_id)))?;
        Ok(Self {
            id: sample.id,
            task_kind: sample.task_kind,
            z: sample.z_flag(),
            query_text: sample.text.clone(),
            visual_ref_feature,
            trace: sample.trace.clone(),
            answer_text: target.triple.description(),
            target_id: sample.target_id,
            world_seed: world.seed,
        })
    }

    pub fn is_complex(&self) -> bool {
        self.task_kind.is_complex()
    }
}

pub fn write_jsonl(path: &Path, records: &[DatasetRecord]) -> Result<(), SynthError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<DatasetRecord>, SynthError> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Query-side token ids plus the visual slot.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedQuery {
    /// Instruction prompt followed by the query text.
    pub ids: Vec<TokenId>,
    /// Reference-image feature, spliced in front of the prompt.
    pub visual: Option<VisualInput>,
}

impl TokenizedQuery {
    pub fn n_rows(&self) -> usize {
        self.ids.len() + self.visual.as_ref().map_or(0, |v| v.vectors.len())
    }
}

/// A fully tokenized sample: query side plus the teacher response.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedSample {
    pub query: TokenizedQuery,
    /// Trace tokens followed by the terminator; just the terminator when the
    /// sample is direct.
    pub response: Vec<TokenId>,
}

pub fn tokenize_query(record: &DatasetRecord, vocab: &TokenVocab) -> Result<TokenizedQuery, SynthError> {
    let mut ids = vocab.encode(instruction_prompt(record.task_kind))?;
    ids.extend(vocab.encode(&record.query_text)?);
    let visual = record
        .visual_ref_feature
        .as_ref()
        .map(|f| VisualInput::prepended(vec![f.clone()]));
    Ok(TokenizedQuery { ids, visual })
}

/// Tokenize a record into the query sequence and the response sequence
/// (`trace + <emb>` when complex, bare `<emb>` when direct).
pub fn tokenize_sample(
    record: &DatasetRecord,
    vocab: &TokenVocab,
) -> Result<TokenizedSample, SynthError> {
    let query = tokenize_query(record, vocab)?;
    let mut response = if record.z == 1 {
        vocab.encode(&record.trace)?
    } else {
        Vec::new()
    };
    response.push(EMB);
    Ok(TokenizedSample { query, response })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::sample::{build_dataset, default_mix};
    use crate::synth::world::gen_world;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn records(seed: u64, n: usize) -> Vec<DatasetRecord> {
        let world = gen_world(seed, 32, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        build_dataset(&world, &mut rng, n, &default_mix(), 0)
            .unwrap()
            .iter()
            .map(|s| DatasetRecord::from_sample(&world, s).unwrap())
            .collect()
    }

    #[test]
    fn jsonl_roundtrip_is_byte_identical_across_runs() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        write_jsonl(&a, &records(17, 64)).unwrap();
        write_jsonl(&b, &records(17, 64)).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let loaded = read_jsonl(&a).unwrap();
        assert_eq!(loaded, records(17, 64));
    }

    #[test]
    fn field_order_matches_schema() {
        let r = &records(3, 4)[0];
        let line = serde_json::to_string(r).unwrap();
        let positions: Vec<usize> = [
            "\"id\"",
            "\"task_kind\"",
            "\"z\"",
            "\"query_text\"",
            "\"visual_ref_feature\"",
            "\"trace\"",
            "\"answer_text\"",
            "\"target_id\"",
            "\"world_seed\"",
        ]
        .iter()
        .map(|k| line.find(k).unwrap_or_else(|| panic!("missing {k}")))
        .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{line}");
    }

    #[test]
    fn direct_response_is_sole_terminator() {
        let vocab = TokenVocab::core();
        for r in records(5, 60) {
            let tok = tokenize_sample(&r, &vocab).unwrap();
            if r.z == 0 {
                assert_eq!(tok.response, vec![EMB]);
            } else {
                assert_eq!(*tok.response.last().unwrap(), EMB);
                assert_eq!(
                    tok.response.iter().filter(|&&t| t == EMB).count(),
                    1,
                    "one terminator, at the end"
                );
                // round-trip: detokenizing the trace part restores the string
                let trace_part = &tok.response[..tok.response.len() - 1];
                assert_eq!(vocab.decode(trace_part), r.trace);
            }
        }
    }
}
