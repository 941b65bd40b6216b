//! The compositional candidate world: attribute-tuple items with noisy
//! one-hot visual features.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::model::vocab::{COLORS, SHAPES, SIZES};

use super::SynthError;

pub const N_COLORS: usize = 4;
pub const N_SHAPES: usize = 4;
pub const N_SIZES: usize = 2;
/// Distinct attribute triples available; the hard capacity of one world.
pub const MAX_ITEMS: usize = N_COLORS * N_SHAPES * N_SIZES;
/// One-hot color + shape + size.
pub const VISUAL_DIM: usize = N_COLORS + N_SHAPES + N_SIZES;

/// Attribute triple as indices into the canonical word lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triple {
    pub color: usize,
    pub shape: usize,
    pub size: usize,
}

impl Triple {
    pub fn words(&self) -> (&'static str, &'static str, &'static str) {
        (COLORS[self.color], SHAPES[self.shape], SIZES[self.size])
    }

    /// "red circle small"
    pub fn phrase(&self) -> String {
        let (c, s, z) = self.words();
        format!("{c} {s} {z}")
    }

    /// Candidate-side caption: "a red circle small"
    pub fn description(&self) -> String {
        format!("a {}", self.phrase())
    }

    pub fn one_hot(&self) -> [f32; VISUAL_DIM] {
        let mut v = [0.0; VISUAL_DIM];
        v[self.color] = 1.0;
        v[N_COLORS + self.shape] = 1.0;
        v[N_COLORS + N_SHAPES + self.size] = 1.0;
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: u64,
    pub triple: Triple,
    pub visual_feature: Vec<f32>,
}

/// The candidate pool: every triple distinct, features reproducible from
/// `(seed, id)`.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub seed: u64,
    pub noise_sigma: f64,
    pub items: Vec<Item>,
}

impl World {
    pub fn item(&self, id: u64) -> Option<&Item> {
        self.items.iter().find(|it| it.id == id)
    }

    pub fn find_triple(&self, triple: Triple) -> Option<&Item> {
        self.items.iter().find(|it| it.triple == triple)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

pub fn all_triples() -> Vec<Triple> {
    let mut out = Vec::with_capacity(MAX_ITEMS);
    for color in 0..N_COLORS {
        for shape in 0..N_SHAPES {
            for size in 0..N_SIZES {
                out.push(Triple { color, shape, size });
            }
        }
    }
    out
}

/// Deterministic world generation: triples sampled without replacement,
/// Gaussian feature noise drawn in id order.
pub fn gen_world(seed: u64, n_items: usize, sigma: f64) -> Result<World, SynthError> {
    if n_items > MAX_ITEMS {
        return Err(SynthError::Capacity {
            requested: n_items,
            max: MAX_ITEMS,
        });
    }
    if n_items < 2 {
        return Err(SynthError::Invalid(format!(
            "a world needs at least 2 items, requested {n_items}"
        )));
    }
    if sigma < 0.0 {
        return Err(SynthError::Invalid(format!("negative noise sigma {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x57a7_1c5e_ed00_0003);
    let mut triples = all_triples();
    triples.shuffle(&mut rng);
    triples.truncate(n_items);
    let normal = Normal::new(0.0f64, sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let items = triples
        .into_iter()
        .enumerate()
        .map(|(i, triple)| {
            let mut feat = triple.one_hot().to_vec();
            if sigma > 0.0 {
                for f in feat.iter_mut() {
                    *f += normal.sample(&mut rng) as f32;
                }
            }
            Item {
                id: i as u64,
                triple,
                visual_feature: feat,
            }
        })
        .collect();
    Ok(World {
        seed,
        noise_sigma: sigma,
        items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_world() {
        let a = gen_world(42, 16, 0.05).unwrap();
        let b = gen_world(42, 16, 0.05).unwrap();
        assert_eq!(a, b);
        let c = gen_world(43, 16, 0.05).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_sigma_gives_exact_one_hot() {
        let w = gen_world(7, 8, 0.0).unwrap();
        for item in &w.items {
            assert_eq!(item.visual_feature, item.triple.one_hot().to_vec());
        }
    }

    #[test]
    fn full_world_holds_every_triple_once() {
        let w = gen_world(3, MAX_ITEMS, 0.01).unwrap();
        let mut seen = std::collections::HashSet::new();
        for item in &w.items {
            assert!(seen.insert(item.triple));
        }
        assert_eq!(seen.len(), MAX_ITEMS);
    }

    #[test]
    fn over_capacity_is_an_error() {
        assert!(matches!(
            gen_world(1, MAX_ITEMS + 1, 0.0),
            Err(SynthError::Capacity { .. })
        ));
    }
}
