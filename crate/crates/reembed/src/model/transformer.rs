//! Decoder-only forward pass built on the autodiff tape.
//!
//! Pre-norm residual blocks with RMS normalization, rotary positions on
//! queries and keys, strict causal attention, and a SiLU feed-forward.
//! Visual feature vectors pass through the trainable projector and occupy
//! sequence positions as pseudo-tokens; everything downstream treats them
//! like any other row.

use std::collections::BTreeMap;

use crate::numerics::{Element, Tape, Tensor, Var};

use super::state::{layer_param, ModelState, EMBED_TOKENS, FINAL_NORM, LM_HEAD, PROJ_B, PROJ_W};
use super::vocab::TokenId;
use super::ModelError;

const NORM_EPS: f64 = 1e-6;

/// Visual feature vectors and the token index they are spliced in front of.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualInput {
    pub vectors: Vec<Vec<f32>>,
    pub insert_at: usize,
}

impl VisualInput {
    pub fn prepended(vectors: Vec<Vec<f32>>) -> Self {
        Self {
            vectors,
            insert_at: 0,
        }
    }
}

/// Parameter leaves bound onto one tape. Frozen parameters become no-grad
/// leaves, so their gradients are identically zero by construction.
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn bind<E: Element>(tape: &mut Tape<E>, state: &ModelState, trainable: bool) -> Self {
        let mut vars = BTreeMap::new();
        for (name, p) in &state.params {
            let t = Tensor::<E>::from_f64(
                p.shape.clone(),
                &p.data.iter().map(|&x| x as f64).collect::<Vec<_>>(),
            )
            .expect("parameter shapes are consistent");
            let rg = trainable && !state.is_frozen(name);
            vars.insert(name.clone(), tape.leaf(t, rg));
        }
        Self { vars }
    }

    /// Assemble a binding from pre-made leaves (used by the whole-model
    /// gradient check, where inputs are owned by the harness).
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = (&String, Var)> {
        self.vars.iter().map(|(n, &v)| (n, v))
    }
}

/// One sequence's forward outputs plus the token-to-row alignment.
pub struct SeqForward {
    /// `(rows x V)`; row t is trained to predict the element at row t+1.
    pub logits: Var,
    /// `(rows x d_model)`, post final norm.
    pub hidden: Var,
    pub n_rows: usize,
    /// Row index of each entry of the input token sequence.
    pub row_of_token: Vec<usize>,
}

/// Linear layer through the binding, routing through the adapter when the
/// target is wrapped: `x@W + (alpha/r) * (x@A)@B`.
fn linear<E: Element>(
    tape: &mut Tape<E>,
    binding: &Binding,
    state: &ModelState,
    name: &str,
    x: Var,
) -> Result<Var, ModelError> {
    let base = tape.matmul(x, binding.var(name))?;
    match state.adapter_for(name) {
        None => Ok(base),
        Some((a, b, scale)) => {
            let xa = tape.matmul(x, binding.var(&a))?;
            let xab = tape.matmul(xa, binding.var(&b))?;
            let scaled = tape.scale(xab, E::from_f64_lossy(scale))?;
            Ok(tape.add(base, scaled)?)
        }
    }
}

/// Run the model over one sequence of token ids with optional visual
/// pseudo-tokens.
pub fn forward<E: Element>(
    tape: &mut Tape<E>,
    binding: &Binding,
    state: &ModelState,
    ids: &[TokenId],
    visual: Option<&VisualInput>,
) -> Result<SeqForward, ModelError> {
    let cfg = &state.config;
    let n_vis = visual.map_or(0, |v| v.vectors.len());
    let n_rows = ids.len() + n_vis;
    if n_rows == 0 {
        return Err(ModelError::Config("empty input sequence".into()));
    }
    if n_rows > cfg.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: n_rows,
            max: cfg.max_seq_len,
        });
    }
    if let Some(v) = visual {
        if v.insert_at > ids.len() {
            return Err(ModelError::Config(format!(
                "visual insertion at {} beyond sequence of {} tokens",
                v.insert_at,
                ids.len()
            )));
        }
        for vec in &v.vectors {
            if vec.len() != cfg.visual_in_dim {
                return Err(ModelError::ProjectorWidth {
                    got: vec.len(),
                    want: cfg.visual_in_dim,
                });
            }
        }
    }

    // embed tokens, project visual vectors, splice
    let ids_usize: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let (mut x, row_of_token) = match visual {
        None => {
            let tok = tape.gather_rows(binding.var(EMBED_TOKENS), &ids_usize)?;
            (tok, (0..ids.len()).collect())
        }
        Some(v) if v.vectors.is_empty() => {
            let tok = tape.gather_rows(binding.var(EMBED_TOKENS), &ids_usize)?;
            (tok, (0..ids.len()).collect())
        }
        Some(v) => {
            let flat: Vec<f64> = v
                .vectors
                .iter()
                .flat_map(|vec| vec.iter().map(|&x| x as f64))
                .collect();
            let feats = tape.leaf(
                Tensor::from_f64(vec![v.vectors.len(), cfg.visual_in_dim], &flat)?,
                false,
            );
            let projected = tape.matmul(feats, binding.var(PROJ_W))?;
            let projected = tape.add_row(projected, binding.var(PROJ_B))?;
            let p = v.insert_at;
            let mut parts = Vec::new();
            let mut row_of_token = vec![0usize; ids.len()];
            if p > 0 {
                let head = tape.gather_rows(binding.var(EMBED_TOKENS), &ids_usize[..p])?;
                parts.push(head);
            }
            parts.push(projected);
            if p < ids.len() {
                let tail = tape.gather_rows(binding.var(EMBED_TOKENS), &ids_usize[p..])?;
                parts.push(tail);
            }
            for (i, slot) in row_of_token.iter_mut().enumerate() {
                *slot = if i < p { i } else { i + v.vectors.len() };
            }
            (tape.concat_rows(&parts)?, row_of_token)
        }
    };

    let positions: Vec<usize> = (0..n_rows).collect();
    for l in 0..cfg.n_layers {
        let normed = tape.rms_norm(x, binding.var(&layer_param(l, "attn.norm")), NORM_EPS)?;
        let q = linear(tape, binding, state, &layer_param(l, "attn.wq"), normed)?;
        let k = linear(tape, binding, state, &layer_param(l, "attn.wk"), normed)?;
        let v = linear(tape, binding, state, &layer_param(l, "attn.wv"), normed)?;
        let q = tape.rope(q, cfg.n_heads, &positions, cfg.rope_base)?;
        let k = tape.rope(k, cfg.n_heads, &positions, cfg.rope_base)?;
        let att = tape.causal_attention(q, k, v, cfg.n_heads)?;
        let att_out = linear(tape, binding, state, &layer_param(l, "attn.wo"), att)?;
        x = tape.add(x, att_out)?;

        let normed = tape.rms_norm(x, binding.var(&layer_param(l, "ffn.norm")), NORM_EPS)?;
        let up = linear(tape, binding, state, &layer_param(l, "ffn.up"), normed)?;
        let act = tape.silu(up)?;
        let down = linear(tape, binding, state, &layer_param(l, "ffn.down"), act)?;
        x = tape.add(x, down)?;
    }
    let hidden = tape.rms_norm(x, binding.var(FINAL_NORM), NORM_EPS)?;
    let logits = tape.matmul(hidden, binding.var(LM_HEAD))?;

    Ok(SeqForward {
        logits,
        hidden,
        n_rows,
        row_of_token,
    })
}

/// Grad-free forward returning plain values; the workhorse of inference.
pub fn forward_values(
    state: &ModelState,
    ids: &[TokenId],
    visual: Option<&VisualInput>,
) -> Result<(Tensor<f32>, Tensor<f32>, Vec<usize>), ModelError> {
    let mut tape = Tape::<f32>::new();
    let binding = Binding::bind(&mut tape, state, false);
    let fwd = forward(&mut tape, &binding, state, ids, visual)?;
    Ok((
        tape.value(fwd.logits).clone(),
        tape.value(fwd.hidden).clone(),
        fwd.row_of_token,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;
    use crate::model::vocab::EMB;

    fn micro_state(seed: u64) -> ModelState {
        ModelState::init(ModelConfig::micro(16, 2, 2), seed).unwrap()
    }

    #[test]
    fn shapes_contract() {
        let state = micro_state(1);
        let ids = [5, 6, 7, EMB];
        let (logits, hidden, rows) = forward_values(&state, &ids, None).unwrap();
        let v = state.config.vocab.size();
        assert_eq!(logits.shape, vec![4, v]);
        assert_eq!(hidden.shape, vec![4, 16]);
        assert_eq!(rows, vec![0, 1, 2, 3]);
    }

    #[test]
    fn visual_rows_are_spliced_in_front() {
        let state = micro_state(2);
        let vis = VisualInput::prepended(vec![vec![0.5; 10], vec![-0.25; 10]]);
        let ids = [5, 6, EMB];
        let (logits, _, rows) = forward_values(&state, &ids, Some(&vis)).unwrap();
        assert_eq!(logits.shape[0], 5);
        assert_eq!(rows, vec![2, 3, 4]);
    }

    #[test]
    fn causality_prefix_logits_bit_identical() {
        let state = micro_state(3);
        let a = [5, 6, 7, 8, 9];
        let mut b = a;
        b[3] = 11;
        let (la, _, _) = forward_values(&state, &a, None).unwrap();
        let (lb, _, _) = forward_values(&state, &b, None).unwrap();
        let v = state.config.vocab.size();
        assert_eq!(la.data[..3 * v], lb.data[..3 * v]);
        assert_ne!(la.data[3 * v..], lb.data[3 * v..]);
    }

    #[test]
    fn overlong_sequence_is_length_error() {
        let mut cfg = ModelConfig::micro(16, 1, 2);
        cfg.max_seq_len = 4;
        let state = ModelState::init(cfg, 1).unwrap();
        let ids = vec![5; 5];
        assert!(matches!(
            forward_values(&state, &ids, None),
            Err(ModelError::SequenceTooLong { len: 5, max: 4 })
        ));
    }

    #[test]
    fn visual_width_mismatch_is_projector_error() {
        let state = micro_state(4);
        let vis = VisualInput::prepended(vec![vec![0.0; 7]]);
        assert!(matches!(
            forward_values(&state, &[5, EMB], Some(&vis)),
            Err(ModelError::ProjectorWidth { got: 7, want: 10 })
        ));
    }

    #[test]
    fn frozen_parameters_get_zero_gradient() {
        let mut state = micro_state(5);
        state.frozen.insert(EMBED_TOKENS.to_string());
        let mut tape = Tape::<f32>::new();
        let binding = Binding::bind(&mut tape, &state, true);
        let fwd = forward(&mut tape, &binding, &state, &[5, 6, EMB], None).unwrap();
        let loss = tape
            .cross_entropy_masked(fwd.logits, &[6, EMB as usize, 0], &[true, true, false])
            .unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(binding.var(EMBED_TOKENS)).is_none());
        assert!(tape.grad(binding.var(LM_HEAD)).is_some());
    }

    #[test]
    fn wrapped_adapters_with_zero_b_match_base_forward_exactly() {
        let cfg = ModelConfig::micro(16, 2, 2);
        let base = ModelState::init(cfg.clone(), 6).unwrap();
        let mut wrapped = base.clone();
        wrapped
            .lora_wrap(
                crate::model::config::AdapterConfig {
                    rank: 4,
                    alpha: 8.0,
                    targets: ModelState::default_adapter_targets(&cfg),
                },
                6,
            )
            .unwrap();
        let ids = [5, 9, 12, EMB];
        let (lb, _, _) = forward_values(&base, &ids, None).unwrap();
        let (lw, _, _) = forward_values(&wrapped, &ids, None).unwrap();
        assert_eq!(lb.data, lw.data);
    }
}
