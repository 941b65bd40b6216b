//! Dense-tensor math with reverse-mode automatic differentiation.
//!
//! The engine is a single append-only tape: every operation pushes a node
//! holding its value and enough cached context to run the backward rule.
//! Nodes are identified by [`Var`] handles, parameters live outside the tape
//! as plain [`Param`] arrays and are re-bound as leaves each step. After
//! `backward` the tape releases op caches in reverse topological order, so a
//! tape can be rebuilt cheaply every training step.

pub mod checks;
mod gradcheck;
mod kernels;
mod optim;
mod param;
mod tape;

pub use gradcheck::{grad_check, grad_check_sampled, AdPrecision, DiffFn};
pub use kernels::{matmul_nn, transpose};
pub use optim::{adamw_step, AdamWHyper, CosineSchedule, OptimizerState};
pub use param::{Param, ParamMap};
pub use tape::{Element, Tape, Tensor, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },
    #[error("loss mask selects no positions")]
    EmptySupervision,
    #[error("target id {id} out of range for vocab size {vocab}")]
    TargetOutOfRange { id: usize, vocab: usize },
    #[error("non-finite gradient for parameter '{name}' (max |g| = {max_abs:e})")]
    NonFiniteGradient { name: String, max_abs: f64 },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;
