//! Named parameter storage, shared by the model and the optimizer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// One trainable array. Parameters live outside the tape and are re-bound as
/// leaves each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Parameters keyed by stable names; ordered so iteration, checkpointing and
/// gradient reductions are deterministic.
pub type ParamMap = BTreeMap<String, Param>;
