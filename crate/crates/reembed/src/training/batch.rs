//! Task-aware batch sampling with in-batch target uniqueness.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::synth::{DatasetRecord, MixSpec, TaskKind};

use super::TrainError;

/// Indices into the dataset; query i's target is the batch's positive i.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub rows: Vec<usize>,
}

/// Draws batches whose task composition follows the mix in the long run and
/// whose targets are pairwise distinct. Sampling is stateless per step: the
/// batch for `(seed, step)` never depends on earlier draws, so resumed runs
/// see the identical stream.
#[derive(Debug)]
pub struct TaskAwareSampler {
    by_kind: BTreeMap<TaskKind, Vec<usize>>,
    cumulative: Vec<(TaskKind, f64)>,
    batch_size: usize,
    seed: u64,
}

const UNIQUENESS_RETRIES: usize = 200;

impl TaskAwareSampler {
    pub fn new(
        dataset: &[DatasetRecord],
        mix: &MixSpec,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self, TrainError> {
        if batch_size < 2 {
            return Err(TrainError::BatchSize(
                "batch size must be at least 2".into(),
            ));
        }
        let mut by_kind: BTreeMap<TaskKind, Vec<usize>> = BTreeMap::new();
        for (i, r) in dataset.iter().enumerate() {
            by_kind.entry(r.task_kind).or_default().push(i);
        }
        for (kind, frac) in mix {
            if *frac > 0.0 && !by_kind.contains_key(kind) {
                return Err(TrainError::Config(format!(
                    "mix requests {kind} but the dataset has none"
                )));
            }
        }
        let distinct_targets: HashSet<u64> = dataset.iter().map(|r| r.target_id).collect();
        if distinct_targets.len() < batch_size {
            return Err(TrainError::BatchSize(format!(
                "dataset has {} distinct targets, cannot fill unique batches of {}",
                distinct_targets.len(),
                batch_size
            )));
        }
        let total: f64 = mix.values().filter(|f| **f > 0.0).sum();
        if total <= 0.0 {
            return Err(TrainError::Config("mix has no positive fractions".into()));
        }
        let mut cumulative = Vec::new();
        let mut acc = 0.0;
        for (&kind, &frac) in mix {
            if frac > 0.0 {
                acc += frac / total;
                cumulative.push((kind, acc));
            }
        }
        Ok(Self {
            by_kind,
            cumulative,
            batch_size,
            seed,
        })
    }

    fn pick_kind<R: Rng>(&self, rng: &mut R) -> TaskKind {
        let u: f64 = rng.random();
        for (kind, edge) in &self.cumulative {
            if u <= *edge {
                return *kind;
            }
        }
        self.cumulative.last().expect("non-empty mix").0
    }

    /// The batch for one step, resampling rows whose target already appears.
    pub fn batch_at(
        &self,
        dataset: &[DatasetRecord],
        step: u64,
    ) -> Result<TrainBatch, TrainError> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut rows = Vec::with_capacity(self.batch_size);
        let mut used_targets = HashSet::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let mut placed = false;
            for _ in 0..UNIQUENESS_RETRIES {
                let kind = self.pick_kind(&mut rng);
                let pool = &self.by_kind[&kind];
                let idx = pool[rng.random_range(0..pool.len())];
                if used_targets.insert(dataset[idx].target_id) {
                    rows.push(idx);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(TrainError::BatchSize(format!(
                    "could not fill a batch of {} with distinct targets after {} retries",
                    self.batch_size, UNIQUENESS_RETRIES
                )));
            }
        }
        Ok(TrainBatch { rows })
    }
}
