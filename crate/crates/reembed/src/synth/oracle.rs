//! Brute-force target resolution, independent of the generators.
//!
//! The oracle re-derives the target by parsing the instruction text and
//! exhaustively scanning the world. Generator and oracle agreeing on every
//! sample is the core consistency check of the synthetic world.

use crate::model::vocab::{ATTR_NAMES, COLORS, SHAPES, SIZES};

use super::sample::{Edit, QuerySample};
use super::world::{Triple, World};
use super::SynthError;

fn find_word(list: &[&str], w: &str) -> Result<usize, SynthError> {
    list.iter()
        .position(|x| *x == w)
        .ok_or_else(|| SynthError::TraceParse(format!("unknown word '{w}'")))
}

fn scan_unique(world: &World, triple: Triple, text: &str) -> Result<u64, SynthError> {
    let matches: Vec<u64> = world
        .items
        .iter()
        .filter(|it| it.triple == triple)
        .map(|it| it.id)
        .collect();
    match matches.len() {
        1 => Ok(matches[0]),
        n => Err(SynthError::Ambiguity {
            query: text.to_string(),
            matches: n,
        }),
    }
}

/// Recompute the target id for a sample by applying the parsed instruction
/// over every item in the world.
pub fn oracle_target(world: &World, sample: &QuerySample) -> Result<u64, SynthError> {
    let words: Vec<&str> = sample.text.split_whitespace().collect();
    match words.first().copied() {
        Some("find") => {
            if words.len() != 4 {
                return Err(SynthError::TraceParse(format!(
                    "malformed simple query '{}'",
                    sample.text
                )));
            }
            let triple = Triple {
                color: find_word(&COLORS, words[1])?,
                shape: find_word(&SHAPES, words[2])?,
                size: find_word(&SIZES, words[3])?,
            };
            scan_unique(world, triple, &sample.text)
        }
        Some("change") => {
            let ref_id = sample.visual_ref.ok_or_else(|| {
                SynthError::TraceParse("edit query without a reference item".into())
            })?;
            let reference = world
                .item(ref_id)
                .ok_or_else(|| SynthError::TraceParse(format!("unknown reference {ref_id}")))?;
            let mut triple = reference.triple;
            for clause in sample.text.split(" then ") {
                let w: Vec<&str> = clause.split_whitespace().collect();
                if w.len() != 4 || w[0] != "change" || w[2] != "to" {
                    return Err(SynthError::TraceParse(format!(
                        "malformed edit clause '{clause}'"
                    )));
                }
                let attr = find_word(&ATTR_NAMES, w[1])?;
                let list: &[&str] = match attr {
                    0 => &COLORS,
                    1 => &SHAPES,
                    _ => &SIZES,
                };
                let edit = Edit {
                    attr,
                    value: find_word(list, w[3])?,
                };
                triple = edit.apply(triple);
            }
            scan_unique(world, triple, &sample.text)
        }
        _ => Err(SynthError::TraceParse(format!(
            "unrecognized instruction '{}'",
            sample.text
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::sample::{build_dataset, default_mix, gen_simple};
    use crate::synth::world::gen_world;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn oracle_agrees_with_generator_across_seeds() {
        for seed in 0..5 {
            let world = gen_world(seed, 32, 0.05).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let samples = build_dataset(&world, &mut rng, 400, &default_mix(), 0).unwrap();
            for s in &samples {
                assert_eq!(oracle_target(&world, s).unwrap(), s.target_id, "{}", s.text);
            }
        }
    }

    #[test]
    fn missing_triple_is_ambiguity_error() {
        let world = gen_world(1, 8, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = gen_simple(&world, &mut rng).unwrap();
        // name a triple that is (almost surely) absent from an 8-item world
        let absent = crate::synth::world::all_triples()
            .into_iter()
            .find(|t| world.find_triple(*t).is_none())
            .unwrap();
        s.text = format!("find {}", absent.phrase());
        assert!(matches!(
            oracle_target(&world, &s),
            Err(SynthError::Ambiguity { matches: 0, .. })
        ));
    }

    #[test]
    fn two_hop_stepwise_equals_composed() {
        let world = gen_world(2, 32, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let s = crate::synth::sample::gen_edit(&world, &mut rng, 2).unwrap();
            // composed: run the oracle on the full two-clause text
            let composed = oracle_target(&world, &s).unwrap();
            // stepwise: apply clause one, re-anchor, apply clause two
            let clauses: Vec<&str> = s.text.split(" then ").collect();
            let mut step = s.clone();
            step.text = clauses[0].to_string();
            step.task_kind = crate::synth::sample::TaskKind::Edit1;
            let mid = oracle_target(&world, &step);
            // the intermediate triple may be absent from the world; skip then
            let Ok(mid) = mid else { continue };
            let mut step2 = s.clone();
            step2.visual_ref = Some(mid);
            step2.text = clauses[1].to_string();
            let stepwise = oracle_target(&world, &step2).unwrap();
            assert_eq!(composed, stepwise);
        }
    }
}
