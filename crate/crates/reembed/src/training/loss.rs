//! The two training losses at value level.
//!
//! The trainer builds the same quantities on the tape for gradients; these
//! standalone versions validate inputs and serve as oracles in tests and
//! reports.

use super::TrainError;

/// In-batch InfoNCE over unit-norm query/candidate embeddings: cosine
/// similarity matrix, temperature-scaled row softmax, mean NLL of the
/// diagonal.
pub fn loss_contrastive(e_q: &[Vec<f32>], e_c: &[Vec<f32>], tau: f64) -> Result<f64, TrainError> {
    let b = e_q.len();
    if b < 2 || e_c.len() != b {
        return Err(TrainError::Config(format!(
            "contrastive loss needs matched batches of at least 2, got {} and {}",
            b,
            e_c.len()
        )));
    }
    if tau <= 0.0 {
        return Err(TrainError::Config("temperature must be positive".into()));
    }
    let d = e_q[0].len();
    for (side, vecs) in [("query", e_q), ("candidate", e_c)] {
        for (i, v) in vecs.iter().enumerate() {
            if v.len() != d {
                return Err(TrainError::Config(format!(
                    "{side} embedding {i} has dim {} (expected {d})",
                    v.len()
                )));
            }
            let norm: f64 = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-4 {
                return Err(TrainError::Normalization { side, index: i, norm });
            }
        }
    }
    let mut total = 0.0f64;
    for i in 0..b {
        let row: Vec<f64> = (0..b)
            .map(|j| {
                let dot: f64 = e_q[i]
                    .iter()
                    .zip(e_c[j].iter())
                    .map(|(&a, &c)| (a as f64) * (c as f64))
                    .sum();
                dot / tau
            })
            .collect();
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&s| (s - mx).exp()).sum();
        total += z.ln() - (row[i] - mx);
    }
    Ok(total / b as f64)
}

/// Mean NLL over the masked-in positions of one logits matrix; thin wrapper
/// for value-level use.
pub fn loss_generative(
    logits: &crate::numerics::Tensor<f32>,
    targets: &[usize],
    mask: &[bool],
) -> Result<f64, TrainError> {
    let mut tape = crate::numerics::Tape::<f32>::new();
    let l = tape.leaf(logits.clone(), false);
    let loss = tape.cross_entropy_masked(l, targets, mask)?;
    Ok(tape.value(loss).data[0] as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: Vec<f32>) -> Vec<f32> {
        let n: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn identical_embeddings_give_ln_b() {
        for b in [2usize, 8, 64] {
            let e = unit(vec![0.3, -1.0, 0.7, 0.2]);
            let qs: Vec<Vec<f32>> = (0..b).map(|_| e.clone()).collect();
            let loss = loss_contrastive(&qs, &qs, 0.05).unwrap();
            assert!(
                (loss - (b as f64).ln()).abs() < 1e-5,
                "B={b}: {loss} vs {}",
                (b as f64).ln()
            );
        }
    }

    #[test]
    fn aligned_orthonormal_embeddings_drive_loss_to_zero() {
        // e_q[i] = e_c[i], pairwise orthogonal; small temperature
        let b = 4;
        let mut qs = Vec::new();
        for i in 0..b {
            let mut v = vec![0.0f32; b];
            v[i] = 1.0;
            qs.push(v);
        }
        let loss = loss_contrastive(&qs, &qs, 0.01).unwrap();
        assert!(loss < 1e-8, "{loss}");
    }

    #[test]
    fn random_case_matches_hand_rolled_row_softmax() {
        let qs: Vec<Vec<f32>> = vec![
            unit(vec![0.2, 0.5, -0.3, 0.9]),
            unit(vec![-0.7, 0.1, 0.4, 0.2]),
            unit(vec![0.9, -0.2, 0.1, 0.3]),
            unit(vec![0.05, 0.8, 0.55, -0.2]),
        ];
        let cs: Vec<Vec<f32>> = vec![
            unit(vec![0.1, 0.4, -0.2, 1.0]),
            unit(vec![-0.6, 0.2, 0.5, 0.1]),
            unit(vec![1.0, -0.1, 0.2, 0.4]),
            unit(vec![0.0, 0.9, 0.4, -0.1]),
        ];
        let tau = 0.07;
        let got = loss_contrastive(&qs, &cs, tau).unwrap();
        // independent oracle: explicit row softmax in f64
        let mut want = 0.0;
        for i in 0..4 {
            let sims: Vec<f64> = (0..4)
                .map(|j| {
                    qs[i].iter()
                        .zip(cs[j].iter())
                        .map(|(&a, &b)| a as f64 * b as f64)
                        .sum::<f64>()
                        / tau
                })
                .collect();
            let z: f64 = sims.iter().map(|s| s.exp()).sum();
            want -= (sims[i].exp() / z).ln();
        }
        want /= 4.0;
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn non_unit_input_is_a_normalization_error() {
        let qs = vec![vec![1.0f32, 0.0], vec![0.0, 1.0]];
        let bad = vec![vec![2.0f32, 0.0], vec![0.0, 1.0]];
        assert!(matches!(
            loss_contrastive(&qs, &bad, 0.05),
            Err(TrainError::Normalization { side: "candidate", index: 0, .. })
        ));
    }

    #[test]
    fn batch_swap_leaves_contrastive_loss_unchanged() {
        let qs: Vec<Vec<f32>> = vec![
            unit(vec![0.2, 0.5, -0.3]),
            unit(vec![-0.7, 0.1, 0.4]),
            unit(vec![0.9, -0.2, 0.1]),
        ];
        let cs: Vec<Vec<f32>> = vec![
            unit(vec![0.3, 0.3, -0.1]),
            unit(vec![-0.5, 0.25, 0.6]),
            unit(vec![0.8, 0.0, 0.2]),
        ];
        let a = loss_contrastive(&qs, &cs, 0.05).unwrap();
        let qs2 = vec![qs[2].clone(), qs[0].clone(), qs[1].clone()];
        let cs2 = vec![cs[2].clone(), cs[0].clone(), cs[1].clone()];
        let b = loss_contrastive(&qs2, &cs2, 0.05).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
