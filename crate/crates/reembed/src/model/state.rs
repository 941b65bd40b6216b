//! Model parameters, initialization, freezing, and adapter wrapping.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{Param, ParamMap};

use super::config::{AdapterConfig, ModelConfig};
use super::ModelError;

pub const EMBED_TOKENS: &str = "embed.tokens";
pub const PROJ_W: &str = "proj.w";
pub const PROJ_B: &str = "proj.b";
pub const FINAL_NORM: &str = "final.norm";
pub const LM_HEAD: &str = "lm.head";

pub fn layer_param(layer: usize, name: &str) -> String {
    format!("layer{layer}.{name}")
}

fn lora_a(target: &str) -> String {
    format!("lora.{target}.a")
}

fn lora_b(target: &str) -> String {
    format!("lora.{target}.b")
}

/// All parameter tensors keyed by stable names, plus the freeze set and the
/// optional adapter configuration.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamMap,
    pub frozen: BTreeSet<String>,
    pub adapter: Option<AdapterConfig>,
}

impl ModelState {
    /// Seeded initialization: weights N(0, 0.02), norm gains 1, biases 0.
    /// The token embedding for the terminator is a fresh trainable row like
    /// any other; no weight is shared with the output head.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
        let normal = Normal::new(0.0f64, 0.02).expect("valid stddev");
        let mut draw = |shape: Vec<usize>| -> Param {
            let numel = shape.iter().product();
            Param {
                shape,
                data: (0..numel)
                    .map(|_| normal.sample(&mut rng) as f32)
                    .collect(),
            }
        };

        let d = config.d_model;
        let f = config.ffn_mult * d;
        let v = config.vocab.size();
        let mut params = ParamMap::new();
        params.insert(EMBED_TOKENS.into(), draw(vec![v, d]));
        params.insert(PROJ_W.into(), draw(vec![config.visual_in_dim, d]));
        params.insert(PROJ_B.into(), Param::zeros(vec![1, d]));
        for l in 0..config.n_layers {
            params.insert(layer_param(l, "attn.norm"), ones(vec![1, d]));
            params.insert(layer_param(l, "attn.wq"), draw(vec![d, d]));
            params.insert(layer_param(l, "attn.wk"), draw(vec![d, d]));
            params.insert(layer_param(l, "attn.wv"), draw(vec![d, d]));
            params.insert(layer_param(l, "attn.wo"), draw(vec![d, d]));
            params.insert(layer_param(l, "ffn.norm"), ones(vec![1, d]));
            params.insert(layer_param(l, "ffn.up"), draw(vec![d, f]));
            params.insert(layer_param(l, "ffn.down"), draw(vec![f, d]));
        }
        params.insert(FINAL_NORM.into(), ones(vec![1, d]));
        params.insert(LM_HEAD.into(), draw(vec![d, v]));

        Ok(Self {
            config,
            params,
            frozen: BTreeSet::new(),
            adapter: None,
        })
    }

    /// Default adapter targets: every attention and feed-forward matrix.
    pub fn default_adapter_targets(config: &ModelConfig) -> Vec<String> {
        let mut t = Vec::new();
        for l in 0..config.n_layers {
            for name in ["attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.up", "ffn.down"] {
                t.push(layer_param(l, name));
            }
        }
        t
    }

    /// Wrap the named layers with low-rank adapters. Every pre-existing
    /// parameter is frozen; only the new `A`/`B` pairs remain trainable.
    /// `B` starts at zero so the wrapped forward equals the base forward.
    pub fn lora_wrap(&mut self, cfg: AdapterConfig, seed: u64) -> Result<(), ModelError> {
        if self.adapter.is_some() {
            return Err(ModelError::Config("adapters already wrapped".into()));
        }
        if cfg.rank == 0 {
            return Err(ModelError::Config("adapter rank must be positive".into()));
        }
        for target in &cfg.targets {
            let p = self
                .params
                .get(target)
                .ok_or_else(|| ModelError::Config(format!("unknown adapter target '{target}'")))?;
            if p.shape.len() != 2 {
                return Err(ModelError::Config(format!(
                    "adapter target '{target}' is not 2-D (shape {:?})",
                    p.shape
                )));
            }
        }
        let existing: Vec<String> = self.params.keys().cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x10ad_0002);
        let normal = Normal::new(0.0f64, 0.02).expect("valid stddev");
        for target in &cfg.targets {
            let (rows, cols) = {
                let p = &self.params[target];
                (p.shape[0], p.shape[1])
            };
            let a = Param {
                shape: vec![rows, cfg.rank],
                data: (0..rows * cfg.rank)
                    .map(|_| normal.sample(&mut rng) as f32)
                    .collect(),
            };
            let b = Param::zeros(vec![cfg.rank, cols]);
            self.params.insert(lora_a(target), a);
            self.params.insert(lora_b(target), b);
        }
        self.frozen.extend(existing);
        self.adapter = Some(cfg);
        Ok(())
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    /// Adapter pieces for a wrapped parameter, if any.
    pub fn adapter_for(&self, name: &str) -> Option<(String, String, f64)> {
        let cfg = self.adapter.as_ref()?;
        if cfg.targets.iter().any(|t| t == name) {
            Some((lora_a(name), lora_b(name), cfg.scale()))
        } else {
            None
        }
    }

    pub fn total_param_count(&self) -> usize {
        self.params.values().map(Param::numel).sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| !self.frozen.contains(*n))
            .map(|(_, p)| p.numel())
            .sum()
    }
}

fn ones(shape: Vec<usize>) -> Param {
    let numel = shape.iter().product();
    Param {
        shape,
        data: vec![1.0; numel],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = ModelConfig::micro(16, 2, 2);
        let a = ModelState::init(cfg.clone(), 7).unwrap();
        let b = ModelState::init(cfg, 7).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn lora_wrap_freezes_base_and_counts_adapters() {
        let cfg = ModelConfig::micro(16, 2, 2);
        let rank = 4;
        let base = ModelState::init(cfg.clone(), 3).unwrap();
        let targets = ModelState::default_adapter_targets(&cfg);
        // independent walk of the parameter tree: rank * (in + out) per
        // wrapped layer, which is 2*d*rank for the square ones
        let expected: usize = targets
            .iter()
            .map(|t| rank * (base.params[t].shape[0] + base.params[t].shape[1]))
            .sum();
        let square: usize = 2 * 16 * rank;
        assert_eq!(
            rank * (base.params[&layer_param(0, "attn.wq")].shape[0]
                + base.params[&layer_param(0, "attn.wq")].shape[1]),
            square
        );

        let mut state = base;
        state
            .lora_wrap(
                AdapterConfig {
                    rank,
                    alpha: 8.0,
                    targets,
                },
                3,
            )
            .unwrap();
        assert_eq!(state.trainable_param_count(), expected);
        assert!(state.is_frozen(EMBED_TOKENS));
        assert!(state.is_frozen(&layer_param(0, "attn.wq")));
        assert!(!state.is_frozen(&format!("lora.{}.a", layer_param(0, "attn.wq"))));
    }

    #[test]
    fn lora_unknown_target_is_config_error() {
        let cfg = ModelConfig::micro(16, 2, 2);
        let mut state = ModelState::init(cfg, 3).unwrap();
        let err = state
            .lora_wrap(
                AdapterConfig {
                    rank: 4,
                    alpha: 8.0,
                    targets: vec!["layer9.attn.wq".into()],
                },
                3,
            )
            .unwrap_err();
        assert!(err.to_string().contains("layer9.attn.wq"));
    }
}
