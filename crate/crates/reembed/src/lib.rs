//! Reason-then-embed retrieval at desk scale.
//!
//! A small causal transformer learns, from data alone, when a retrieval query
//! deserves an explicit reasoning trace before being compressed into a
//! unit-norm embedding, and when it should be embedded directly. The crate
//! bundles everything needed to study that behavior end to end:
//!
//! - [`numerics`]: dense tensors with tape-based reverse-mode autodiff,
//!   AdamW, a cosine learning-rate schedule, and a finite-difference
//!   gradient-check harness;
//! - [`model`]: the decoder-only transformer with rotary positions, a
//!   trainable visual projector, an embedding-terminator token, optional
//!   low-rank adapters, and three embedding-pooling strategies;
//! - [`synth`]: a deterministic compositional retrieval world with ground
//!   truth traces and a brute-force target oracle;
//! - [`curation`]: the rule-based + verifier-based filtering pipeline that
//!   turns raw tagged generations into a training set;
//! - [`training`]: the hybrid generative + contrastive trainer;
//! - [`inference`]: adaptive-routing query encoding, candidate encoding, and
//!   the decoupled two-stage baseline;
//! - [`eval`]: exact top-k search, Recall@K / MAP@K, throughput measurement,
//!   and routing reports;
//! - [`exp`]: config-driven experiment orchestration and ablation presets.

pub mod curation;
pub mod eval;
pub mod exp;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod synth;
pub mod training;
