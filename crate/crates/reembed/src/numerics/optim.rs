//! AdamW with decoupled weight decay and a warmup + cosine decay schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::param::ParamMap;
use super::{NumericsError, Result};

/// Linear warmup to `base_lr`, then cosine decay to `min_lr` at
/// `total_steps`. Monotone non-increasing after warmup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub min_lr: f64,
}

impl CosineSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay_steps = self.total_steps.saturating_sub(self.warmup_steps);
        if decay_steps == 0 {
            return self.min_lr.min(self.base_lr);
        }
        let t = (step - self.warmup_steps).min(decay_steps) as f64 / decay_steps as f64;
        self.min_lr + (self.base_lr - self.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step_count: u64,
    pub first_moment: BTreeMap<String, Vec<f32>>,
    pub second_moment: BTreeMap<String, Vec<f32>>,
    pub schedule: CosineSchedule,
}

impl OptimizerState {
    pub fn new(schedule: CosineSchedule) -> Self {
        Self {
            step_count: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
            schedule,
        }
    }
}

/// One bias-corrected AdamW update over every parameter present in `grads`.
/// Parameters without a gradient entry (frozen or unused this step) are left
/// untouched. Returns the learning rate that was applied.
///
/// Weight decay is decoupled: parameters are shrunk multiplicatively before
/// the moment update is subtracted.
pub fn adamw_step(
    params: &mut ParamMap,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut OptimizerState,
    hyper: &AdamWHyper,
) -> Result<f64> {
    // validate before mutating anything
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| NumericsError::Invalid(format!("gradient for unknown parameter '{name}'")))?;
        if g.len() != p.numel() {
            return Err(NumericsError::ShapeMismatch {
                op: "adamw_step",
                left: p.shape.clone(),
                right: vec![g.len()],
            });
        }
        if let Some(max_abs) = non_finite_max_abs(g) {
            return Err(NumericsError::NonFiniteGradient {
                name: name.clone(),
                max_abs,
            });
        }
    }

    let lr = state.schedule.lr_at(state.step_count);
    let t = (state.step_count + 1) as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let (b1, b2) = (hyper.beta1 as f32, hyper.beta2 as f32);

    for (name, g) in grads {
        let p = params.get_mut(name).expect("validated above");
        let m = state
            .first_moment
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = state
            .second_moment
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let decay = (1.0 - lr * hyper.weight_decay) as f32;
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mhat = m[i] as f64 / bc1;
            let vhat = v[i] as f64 / bc2;
            let upd = (lr * mhat / (vhat.sqrt() + hyper.eps)) as f32;
            p.data[i] = p.data[i] * decay - upd;
        }
    }
    state.step_count += 1;
    Ok(lr)
}

fn non_finite_max_abs(g: &[f32]) -> Option<f64> {
    if g.iter().all(|x| x.is_finite()) {
        return None;
    }
    let max_abs = g
        .iter()
        .filter(|x| x.is_finite())
        .fold(0.0f32, |a, &b| a.max(b.abs()));
    Some(max_abs as f64)
}
