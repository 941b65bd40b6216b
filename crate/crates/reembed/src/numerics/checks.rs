//! The registered-op gradient-check battery.
//!
//! Each case builds one op on randomized small shapes, scalarizes the output
//! through a fixed random weighting, and compares the reverse pass against
//! central finite differences. The battery is exposed as a library so both
//! unit tests and the acceptance suite run the exact same checks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::gradcheck::{grad_check, AdPrecision, DiffFn};
use super::tape::{Element, Tape, Tensor, Var};
use super::Result;

/// Scalarize `out` as `sum(w . out)` with fixed weights held by the case.
fn weighted_sum<E: Element>(tape: &mut Tape<E>, out: Var, weights: &[f64]) -> Result<Var> {
    let shape = tape.value(out).shape.clone();
    let w = tape.leaf(Tensor::from_f64(shape, weights)?, false);
    let prod = tape.mul(out, w)?;
    tape.sum_all(prod)
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Weights bounded away from zero keep every checked coordinate's true
/// gradient resolvable by finite differences.
fn rand_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.random_range(0.5..1.5)
        })
        .collect()
}

enum OpKind {
    Add,
    AddRow,
    Mul,
    Scale(f64),
    Matmul,
    MatmulNt,
    Silu,
    RmsNorm,
    Rope { n_heads: usize, positions: Vec<usize> },
    GatherRows { ids: Vec<usize> },
    ConcatRows,
    SliceRows { start: usize, len: usize },
    L2NormRows,
    SoftmaxRows { mask: Option<Vec<bool>> },
    CrossEntropy { targets: Vec<usize>, mask: Vec<bool> },
    CausalAttention { n_heads: usize },
}

/// One randomized op case: inputs plus the scalarizing weights.
pub struct OpCase {
    pub name: &'static str,
    kind: OpKind,
    point: Vec<Tensor<f64>>,
    weights: Vec<f64>,
}

impl DiffFn for OpCase {
    fn build<E: Element>(&self, tape: &mut Tape<E>, inputs: &[Var]) -> Result<Var> {
        let out = match &self.kind {
            OpKind::Add => tape.add(inputs[0], inputs[1])?,
            OpKind::AddRow => tape.add_row(inputs[0], inputs[1])?,
            OpKind::Mul => tape.mul(inputs[0], inputs[1])?,
            OpKind::Scale(c) => tape.scale(inputs[0], E::from_f64_lossy(*c))?,
            OpKind::Matmul => tape.matmul(inputs[0], inputs[1])?,
            OpKind::MatmulNt => tape.matmul_nt(inputs[0], inputs[1])?,
            OpKind::Silu => tape.silu(inputs[0])?,
            OpKind::RmsNorm => tape.rms_norm(inputs[0], inputs[1], 1e-6)?,
            OpKind::Rope { n_heads, positions } => {
                tape.rope(inputs[0], *n_heads, positions, 10000.0)?
            }
            OpKind::GatherRows { ids } => tape.gather_rows(inputs[0], ids)?,
            OpKind::ConcatRows => tape.concat_rows(inputs)?,
            OpKind::SliceRows { start, len } => tape.slice_rows(inputs[0], *start, *len)?,
            OpKind::L2NormRows => tape.l2_normalize_rows(inputs[0])?,
            OpKind::SoftmaxRows { mask } => tape.softmax_rows(inputs[0], mask.as_deref())?,
            OpKind::CrossEntropy { targets, mask } => {
                // already scalar; weights are a single multiplier
                let ce = tape.cross_entropy_masked(inputs[0], targets, mask)?;
                return tape.scale(ce, E::from_f64_lossy(self.weights[0]));
            }
            OpKind::CausalAttention { n_heads } => {
                tape.causal_attention(inputs[0], inputs[1], inputs[2], *n_heads)?
            }
        };
        weighted_sum(tape, out, &self.weights)
    }
}

impl OpCase {
    pub fn point(&self) -> &[Tensor<f64>] {
        &self.point
    }
}

/// Build the full battery for one seed.
pub fn registered_op_cases(seed: u64) -> Vec<OpCase> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let t = rng.random_range(2..=5usize);
    let d = 4 * rng.random_range(1..=2usize); // two heads with even head dims
    let mut cases = Vec::new();

    let mat = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
        Tensor::matrix(r, c, randn(rng, r * c)).unwrap()
    };

    cases.push(OpCase {
        name: "add",
        kind: OpKind::Add,
        point: vec![mat(rng, t, d), mat(rng, t, d)],
        weights: rand_weights(rng, t * d),
    });
    cases.push(OpCase {
        name: "add_row",
        kind: OpKind::AddRow,
        point: vec![mat(rng, t, d), mat(rng, 1, d)],
        weights: rand_weights(rng, t * d),
    });
    cases.push(OpCase {
        name: "mul",
        kind: OpKind::Mul,
        point: vec![mat(rng, t, d), mat(rng, t, d)],
        weights: rand_weights(rng, t * d),
    });
    cases.push(OpCase {
        name: "scale",
        kind: OpKind::Scale(rng.random_range(-2.0..2.0)),
        point: vec![mat(rng, t, d)],
        weights: rand_weights(rng, t * d),
    });
    let k = rng.random_range(2..=5usize);
    cases.push(OpCase {
        name: "matmul",
        kind: OpKind::Matmul,
        point: vec![mat(rng, t, k), mat(rng, k, d)],
        weights: rand_weights(rng, t * d),
    });
    cases.push(OpCase {
        name: "matmul_nt",
        kind: OpKind::MatmulNt,
        point: vec![mat(rng, t, k), mat(rng, d, k)],
        weights: rand_weights(rng, t * d),
    });
    cases.push(OpCase {
        name: "silu",
        kind: OpKind::Silu,
        point: vec![mat(rng, t, d)],
        weights: rand_weights(rng, t * d),
    });
    cases.push(OpCase {
        name: "rms_norm",
        kind: OpKind::RmsNorm,
        point: vec![mat(rng, t, d), mat(rng, 1, d)],
        weights: rand_weights(rng, t * d),
    });
    let positions: Vec<usize> = (0..t).map(|_| rng.random_range(0..32)).collect();
    cases.push(OpCase {
        name: "rope",
        kind: OpKind::Rope {
            n_heads: 2,
            positions,
        },
        point: vec![mat(rng, t, d)],
        weights: rand_weights(rng, t * d),
    });
    let rows = rng.random_range(3..=6usize);
    // repeated ids exercise scatter-add
    let ids: Vec<usize> = (0..t + 1).map(|_| rng.random_range(0..rows)).collect();
    let n_ids = ids.len();
    cases.push(OpCase {
        name: "gather_rows",
        kind: OpKind::GatherRows { ids },
        point: vec![mat(rng, rows, d)],
        weights: rand_weights(rng, n_ids * d),
    });
    cases.push(OpCase {
        name: "concat_rows",
        kind: OpKind::ConcatRows,
        point: vec![mat(rng, t, d), mat(rng, 2, d)],
        weights: rand_weights(rng, (t + 2) * d),
    });
    let start = rng.random_range(0..t);
    let len = rng.random_range(1..=t - start);
    cases.push(OpCase {
        name: "slice_rows",
        kind: OpKind::SliceRows { start, len },
        point: vec![mat(rng, t, d)],
        weights: rand_weights(rng, len * d),
    });
    cases.push(OpCase {
        name: "l2_normalize_rows",
        kind: OpKind::L2NormRows,
        point: vec![mat(rng, t, d)],
        weights: rand_weights(rng, t * d),
    });
    cases.push(OpCase {
        name: "softmax_rows",
        kind: OpKind::SoftmaxRows { mask: None },
        point: vec![mat(rng, t, d)],
        weights: rand_weights(rng, t * d),
    });
    let mask: Vec<bool> = (0..t * d)
        .map(|i| i % d == 0 || rng.random_bool(0.7))
        .collect();
    cases.push(OpCase {
        name: "softmax_rows_masked",
        kind: OpKind::SoftmaxRows { mask: Some(mask) },
        point: vec![mat(rng, t, d)],
        weights: rand_weights(rng, t * d),
    });
    let targets: Vec<usize> = (0..t).map(|_| rng.random_range(0..d)).collect();
    let mut ce_mask: Vec<bool> = (0..t).map(|_| rng.random_bool(0.7)).collect();
    ce_mask[0] = true;
    cases.push(OpCase {
        name: "cross_entropy_masked",
        kind: OpKind::CrossEntropy {
            targets,
            mask: ce_mask,
        },
        point: vec![mat(rng, t, d)],
        weights: rand_weights(rng, 1),
    });
    cases.push(OpCase {
        name: "causal_attention",
        kind: OpKind::CausalAttention { n_heads: 2 },
        point: vec![mat(rng, t, d), mat(rng, t, d), mat(rng, t, d)],
        weights: rand_weights(rng, t * d),
    });
    cases
}

/// Run the battery across `seeds`, returning the worst relative error per op
/// name. Fails fast if any case errors out structurally.
pub fn run_registered_op_checks(
    seeds: std::ops::Range<u64>,
    precision: AdPrecision,
    epsilon: f64,
) -> Result<Vec<(&'static str, f64)>> {
    let mut worst: std::collections::BTreeMap<&'static str, f64> = Default::default();
    for seed in seeds {
        for case in registered_op_cases(seed) {
            let err = grad_check(&case, case.point(), epsilon, precision)?;
            let e = worst.entry(case.name).or_insert(0.0);
            if err > *e {
                *e = err;
            }
        }
    }
    Ok(worst.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_registered_op_passes_grad_check_f32() {
        let results = run_registered_op_checks(0..20, AdPrecision::F32, 1e-4).unwrap();
        for (name, err) in results {
            assert!(err < 1e-3, "{name}: f32 rel err {err:e}");
        }
    }

    #[test]
    fn every_registered_op_passes_grad_check_f64() {
        let results = run_registered_op_checks(0..20, AdPrecision::F64, 3e-5).unwrap();
        for (name, err) in results {
            assert!(err < 1e-6, "{name}: f64 rel err {err:e}");
        }
    }
}
