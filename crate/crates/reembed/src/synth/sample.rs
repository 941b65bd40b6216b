//! Query generation: simple lookups and single/double attribute edits, each
//! with a ground-truth reasoning trace.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::vocab::{ATTR_NAMES, COLORS, SHAPES, SIZES};

use super::world::{Triple, World, N_COLORS, N_SHAPES, N_SIZES};
use super::SynthError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "SIMPLE_T2I")]
    SimpleT2i,
    #[serde(rename = "EDIT_1")]
    Edit1,
    #[serde(rename = "EDIT_2")]
    Edit2,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::SimpleT2i, TaskKind::Edit1, TaskKind::Edit2];

    pub fn is_complex(self) -> bool {
        !matches!(self, TaskKind::SimpleT2i)
    }

    pub fn label(self) -> &'static str {
        match self {
            TaskKind::SimpleT2i => "SIMPLE_T2I",
            TaskKind::Edit1 => "EDIT_1",
            TaskKind::Edit2 => "EDIT_2",
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Fixed per-task instruction prefix prepended to every query.
pub fn instruction_prompt(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::SimpleT2i => "task simple retrieval :",
        TaskKind::Edit1 => "task single edit :",
        TaskKind::Edit2 => "task double edit :",
    }
}

/// Fixed prompt used when encoding candidates from their visual features.
pub const CANDIDATE_PROMPT: &str = "describe the item :";

/// One attribute edit: which attribute, and the new value index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edit {
    pub attr: usize,
    pub value: usize,
}

impl Edit {
    pub fn value_word(&self) -> &'static str {
        match self.attr {
            0 => COLORS[self.value],
            1 => SHAPES[self.value],
            _ => SIZES[self.value],
        }
    }

    pub fn apply(&self, t: Triple) -> Triple {
        let mut out = t;
        match self.attr {
            0 => out.color = self.value,
            1 => out.shape = self.value,
            _ => out.size = self.value,
        }
        out
    }
}

/// One training or evaluation item.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySample {
    pub id: u64,
    pub task_kind: TaskKind,
    pub text: String,
    pub visual_ref: Option<u64>,
    pub z: bool,
    pub trace: String,
    pub target_id: u64,
    pub instruction_prompt: String,
}

impl QuerySample {
    pub fn z_flag(&self) -> u8 {
        u8::from(self.z)
    }
}

pub fn gen_simple<R: Rng>(world: &World, rng: &mut R) -> Result<QuerySample, SynthError> {
    if world.is_empty() {
        return Err(SynthError::Invalid("empty world".into()));
    }
    let item = &world.items[rng.random_range(0..world.len())];
    Ok(QuerySample {
        id: 0,
        task_kind: TaskKind::SimpleT2i,
        text: format!("find {}", item.triple.phrase()),
        visual_ref: None,
        z: false,
        trace: String::new(),
        target_id: item.id,
        instruction_prompt: instruction_prompt(TaskKind::SimpleT2i).to_string(),
    })
}

const EDIT_RETRIES: usize = 256;

/// An edit query: a reference item plus one or two chained attribute edits
/// whose result is a different item present in the world. Chained edits
/// touch distinct attributes and never restate the current value.
pub fn gen_edit<R: Rng>(world: &World, rng: &mut R, hops: usize) -> Result<QuerySample, SynthError> {
    if !(1..=2).contains(&hops) {
        return Err(SynthError::Invalid(format!("hops must be 1 or 2, got {hops}")));
    }
    for _ in 0..EDIT_RETRIES {
        let reference = &world.items[rng.random_range(0..world.len())];
        let mut attrs = [0usize, 1, 2];
        attrs.shuffle(rng);
        let mut edits = Vec::with_capacity(hops);
        let mut triple = reference.triple;
        for &attr in attrs.iter().take(hops) {
            let cardinality = match attr {
                0 => N_COLORS,
                1 => N_SHAPES,
                _ => N_SIZES,
            };
            let current = match attr {
                0 => triple.color,
                1 => triple.shape,
                _ => triple.size,
            };
            let mut value = rng.random_range(0..cardinality - 1);
            if value >= current {
                value += 1;
            }
            let edit = Edit { attr, value };
            triple = edit.apply(triple);
            edits.push(edit);
        }
        let Some(target) = world.find_triple(triple) else {
            continue;
        };
        if target.id == reference.id {
            continue;
        }
        let kind = if hops == 1 { TaskKind::Edit1 } else { TaskKind::Edit2 };
        return Ok(QuerySample {
            id: 0,
            task_kind: kind,
            text: render_edit_text(&edits),
            visual_ref: Some(reference.id),
            z: true,
            trace: render_trace(reference.triple, &edits, triple),
            target_id: target.id,
            instruction_prompt: instruction_prompt(kind).to_string(),
        });
    }
    Err(SynthError::GenerationExhausted {
        task: if hops == 1 { "EDIT_1" } else { "EDIT_2" },
        retries: EDIT_RETRIES,
    })
}

fn render_edit_text(edits: &[Edit]) -> String {
    edits
        .iter()
        .map(|e| format!("change {} to {}", ATTR_NAMES[e.attr], e.value_word()))
        .collect::<Vec<_>>()
        .join(" then ")
}

/// "src <triple> ; op <attr> <val> [; op <attr> <val>] ; keep <unchanged> ;
/// tgt <triple>"
fn render_trace(src: Triple, edits: &[Edit], tgt: Triple) -> String {
    let mut parts = vec![format!("src {}", src.phrase())];
    for e in edits {
        parts.push(format!("op {} {}", ATTR_NAMES[e.attr], e.value_word()));
    }
    let kept: Vec<&str> = (0..3)
        .filter(|a| edits.iter().all(|e| e.attr != *a))
        .map(|a| ATTR_NAMES[a])
        .collect();
    parts.push(format!("keep {}", kept.join(" ")));
    parts.push(format!("tgt {}", tgt.phrase()));
    parts.join(" ; ")
}

/// Structured view of a trace string.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTrace {
    pub src: Triple,
    pub ops: Vec<Edit>,
    pub keep: Vec<usize>,
    pub tgt: Triple,
}

fn word_index(list: &[&str], w: &str) -> Option<usize> {
    list.iter().position(|x| *x == w)
}

fn parse_triple(words: &[&str]) -> Option<Triple> {
    if words.len() != 3 {
        return None;
    }
    Some(Triple {
        color: word_index(&COLORS, words[0])?,
        shape: word_index(&SHAPES, words[1])?,
        size: word_index(&SIZES, words[2])?,
    })
}

/// Parse the clause structure `{src, ops, keep, tgt}` out of a trace.
pub fn parse_trace(trace: &str) -> Result<ParsedTrace, SynthError> {
    let clauses: Vec<&str> = trace.split(';').map(str::trim).collect();
    let bad = |why: &str| SynthError::TraceParse(format!("{why} in '{trace}'"));
    if clauses.len() < 4 {
        return Err(bad("expected at least 4 clauses"));
    }
    let mut src = None;
    let mut tgt = None;
    let mut ops = Vec::new();
    let mut keep = Vec::new();
    for clause in clauses {
        let words: Vec<&str> = clause.split_whitespace().collect();
        match words.first().copied() {
            Some("src") => src = parse_triple(&words[1..]),
            Some("tgt") => tgt = parse_triple(&words[1..]),
            Some("op") => {
                if words.len() != 3 {
                    return Err(bad("malformed op clause"));
                }
                let attr =
                    word_index(&ATTR_NAMES, words[1]).ok_or_else(|| bad("unknown attribute"))?;
                let list: &[&str] = match attr {
                    0 => &COLORS,
                    1 => &SHAPES,
                    _ => &SIZES,
                };
                let value = word_index(list, words[2]).ok_or_else(|| bad("unknown value"))?;
                ops.push(Edit { attr, value });
            }
            Some("keep") => {
                for w in &words[1..] {
                    keep.push(word_index(&ATTR_NAMES, w).ok_or_else(|| bad("unknown keep"))?);
                }
            }
            _ => return Err(bad("unknown clause")),
        }
    }
    Ok(ParsedTrace {
        src: src.ok_or_else(|| bad("missing src"))?,
        ops,
        keep,
        tgt: tgt.ok_or_else(|| bad("missing tgt"))?,
    })
}

/// Requested fractions per task kind.
pub type MixSpec = BTreeMap<TaskKind, f64>;

/// The 47:53 simple-to-reasoning split, with the reasoning share divided
/// between single and double edits.
pub fn default_mix() -> MixSpec {
    let mut m = MixSpec::new();
    m.insert(TaskKind::SimpleT2i, 0.47);
    m.insert(TaskKind::Edit1, 0.28);
    m.insert(TaskKind::Edit2, 0.25);
    m
}

/// Exact per-kind counts by largest remainder; hits the requested mix within
/// one sample per kind.
pub fn mix_counts(mix: &MixSpec, n: usize) -> Result<Vec<(TaskKind, usize)>, SynthError> {
    let total: f64 = mix.values().sum();
    if mix.is_empty() || total <= 0.0 {
        return Err(SynthError::Invalid("empty or zero mix spec".into()));
    }
    let mut counts: Vec<(TaskKind, usize, f64)> = mix
        .iter()
        .map(|(&k, &f)| {
            let exact = f / total * n as f64;
            (k, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = counts.iter().map(|(_, c, _)| *c).sum();
    let mut remaining = n - assigned;
    // hand out remainders by largest fraction, ties by task order
    counts.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    for entry in counts.iter_mut() {
        if remaining == 0 {
            break;
        }
        entry.1 += 1;
        remaining -= 1;
    }
    counts.sort_by_key(|(k, _, _)| *k);
    Ok(counts.into_iter().map(|(k, c, _)| (k, c)).collect())
}

/// Deterministic dataset: per-kind counts from the mix, sample order shuffled
/// once, ids assigned in output order starting at `base_id`.
pub fn build_dataset<R: Rng>(
    world: &World,
    rng: &mut R,
    n_samples: usize,
    mix: &MixSpec,
    base_id: u64,
) -> Result<Vec<QuerySample>, SynthError> {
    let counts = mix_counts(mix, n_samples)?;
    let mut kinds = Vec::with_capacity(n_samples);
    for (kind, count) in counts {
        kinds.extend(std::iter::repeat_n(kind, count));
    }
    kinds.shuffle(rng);
    let mut samples = Vec::with_capacity(n_samples);
    for (i, kind) in kinds.into_iter().enumerate() {
        let mut s = match kind {
            TaskKind::SimpleT2i => gen_simple(world, rng)?,
            TaskKind::Edit1 => gen_edit(world, rng, 1)?,
            TaskKind::Edit2 => gen_edit(world, rng, 2)?,
        };
        s.id = base_id + i as u64;
        samples.push(s);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::world::gen_world;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn simple_queries_are_direct() {
        let world = gen_world(5, 16, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let s = gen_simple(&world, &mut rng).unwrap();
            assert!(!s.z);
            assert!(s.trace.is_empty());
            assert!(s.text.starts_with("find "));
            let target = world.item(s.target_id).unwrap();
            assert_eq!(s.text, format!("find {}", target.triple.phrase()));
        }
    }

    #[test]
    fn single_item_world_rejected_but_two_items_force_target() {
        assert!(gen_world(9, 1, 0.0).is_err());
        // two items differing in one attribute: the only valid edit maps
        // between them
        let world = gen_world(11, 32, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = gen_edit(&world, &mut rng, 1).unwrap();
        let reference = world.item(s.visual_ref.unwrap()).unwrap();
        let target = world.item(s.target_id).unwrap();
        assert_ne!(reference.id, target.id);
        let parsed = parse_trace(&s.trace).unwrap();
        assert_eq!(parsed.src, reference.triple);
        assert_eq!(parsed.tgt, target.triple);
        assert_eq!(parsed.ops.len(), 1);
        assert_eq!(parsed.keep.len(), 2);
    }

    #[test]
    fn edits_never_noop_and_traces_match_targets() {
        let world = gen_world(21, 32, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..500 {
            let hops = 1 + (i % 2);
            let s = gen_edit(&world, &mut rng, hops).unwrap();
            let reference = world.item(s.visual_ref.unwrap()).unwrap();
            let parsed = parse_trace(&s.trace).unwrap();
            assert_eq!(parsed.ops.len(), hops);
            // no-op edits are never emitted
            let mut triple = reference.triple;
            for op in &parsed.ops {
                let before = triple;
                triple = op.apply(triple);
                assert_ne!(before, triple, "no-op edit in {}", s.trace);
            }
            assert_eq!(triple, parsed.tgt);
            assert_eq!(world.item(s.target_id).unwrap().triple, parsed.tgt);
            assert_ne!(s.target_id, s.visual_ref.unwrap());
            assert!(s.z);
        }
    }

    #[test]
    fn dataset_mix_is_within_one_percent() {
        let world = gen_world(2, 32, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 2000;
        let samples = build_dataset(&world, &mut rng, n, &default_mix(), 0).unwrap();
        assert_eq!(samples.len(), n);
        for (kind, want) in [
            (TaskKind::SimpleT2i, 0.47),
            (TaskKind::Edit1, 0.28),
            (TaskKind::Edit2, 0.25),
        ] {
            let got = samples.iter().filter(|s| s.task_kind == kind).count() as f64 / n as f64;
            assert!((got - want).abs() <= 0.01, "{kind}: {got}");
        }
        // ids dense in output order
        for (i, s) in samples.iter().enumerate() {
            assert_eq!(s.id, i as u64);
        }
    }

    #[test]
    fn two_hop_edits_touch_distinct_attributes() {
        let world = gen_world(8, 32, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let s = gen_edit(&world, &mut rng, 2).unwrap();
            let parsed = parse_trace(&s.trace).unwrap();
            assert_ne!(parsed.ops[0].attr, parsed.ops[1].attr);
            assert_eq!(parsed.keep.len(), 1);
        }
    }
}
