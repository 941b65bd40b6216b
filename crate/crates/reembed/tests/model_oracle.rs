//! Reference-forward oracle: a straight-line f64 reimplementation of the
//! architecture, kept deliberately independent of the tape engine, must
//! agree with the production forward pass on a fixed micro-model.

use reembed::model::{
    forward_values, layer_param, ModelConfig, ModelState, VisualInput, EMBED_TOKENS, FINAL_NORM,
    LM_HEAD, PROJ_B, PROJ_W,
};
use reembed::numerics::Param;

fn get<'a>(state: &'a ModelState, name: &str) -> &'a Param {
    state.params.get(name).unwrap_or_else(|| panic!("param {name}"))
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

fn to_f64(p: &Param) -> Vec<f64> {
    p.data.iter().map(|&x| x as f64).collect()
}

fn rms_norm(x: &[f64], gain: &[f64], t: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * d];
    for i in 0..t {
        let row = &x[i * d..(i + 1) * d];
        let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        for j in 0..d {
            out[i * d + j] = row[j] * inv * gain[j];
        }
    }
    out
}

fn rope(x: &mut [f64], t: usize, n_heads: usize, hd: usize, base: f64) {
    let half = hd / 2;
    let d = n_heads * hd;
    for r in 0..t {
        for h in 0..n_heads {
            let off = h * hd;
            for j in 0..half {
                let theta = (r as f64) * base.powf(-2.0 * j as f64 / hd as f64);
                let (s, c) = theta.sin_cos();
                let a = x[r * d + off + j];
                let b = x[r * d + off + j + half];
                x[r * d + off + j] = a * c - b * s;
                x[r * d + off + j + half] = a * s + b * c;
            }
        }
    }
}

fn reference_forward(state: &ModelState, ids: &[u32], visual: Option<&VisualInput>) -> Vec<f64> {
    let cfg = &state.config;
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let v = cfg.vocab.size();

    let embed = to_f64(get(state, EMBED_TOKENS));
    let mut x: Vec<f64> = Vec::new();
    if let Some(vis) = visual {
        assert_eq!(vis.insert_at, 0, "oracle covers prepended visual only");
        let pw = to_f64(get(state, PROJ_W));
        let pb = to_f64(get(state, PROJ_B));
        for vec in &vis.vectors {
            let vin: Vec<f64> = vec.iter().map(|&f| f as f64).collect();
            let row = matmul(&vin, &pw, 1, cfg.visual_in_dim, d);
            for j in 0..d {
                x.push(row[j] + pb[j]);
            }
        }
    }
    for &id in ids {
        x.extend_from_slice(&embed[id as usize * d..(id as usize + 1) * d]);
    }
    let t = x.len() / d;

    for l in 0..cfg.n_layers {
        let normed = rms_norm(&x, &to_f64(get(state, &layer_param(l, "attn.norm"))), t, d);
        let mut q = matmul(&normed, &to_f64(get(state, &layer_param(l, "attn.wq"))), t, d, d);
        let mut k = matmul(&normed, &to_f64(get(state, &layer_param(l, "attn.wk"))), t, d, d);
        let vv = matmul(&normed, &to_f64(get(state, &layer_param(l, "attn.wv"))), t, d, d);
        rope(&mut q, t, cfg.n_heads, hd, cfg.rope_base);
        rope(&mut k, t, cfg.n_heads, hd, cfg.rope_base);
        let mut att = vec![0.0; t * d];
        let scale = 1.0 / (hd as f64).sqrt();
        for h in 0..cfg.n_heads {
            let off = h * hd;
            for i in 0..t {
                let mut weights = vec![0.0; i + 1];
                for j in 0..=i {
                    let mut s = 0.0;
                    for c in 0..hd {
                        s += q[i * d + off + c] * k[j * d + off + c];
                    }
                    weights[j] = s * scale;
                }
                let mx = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for w in weights.iter_mut() {
                    *w = (*w - mx).exp();
                    z += *w;
                }
                for w in weights.iter_mut() {
                    *w /= z;
                }
                for j in 0..=i {
                    for c in 0..hd {
                        att[i * d + off + c] += weights[j] * vv[j * d + off + c];
                    }
                }
            }
        }
        let att_out = matmul(&att, &to_f64(get(state, &layer_param(l, "attn.wo"))), t, d, d);
        for i in 0..t * d {
            x[i] += att_out[i];
        }

        let normed = rms_norm(&x, &to_f64(get(state, &layer_param(l, "ffn.norm"))), t, d);
        let f = cfg.ffn_mult * d;
        let mut up = matmul(&normed, &to_f64(get(state, &layer_param(l, "ffn.up"))), t, d, f);
        for u in up.iter_mut() {
            *u = *u / (1.0 + (-*u).exp());
        }
        let down = matmul(&up, &to_f64(get(state, &layer_param(l, "ffn.down"))), t, f, d);
        for i in 0..t * d {
            x[i] += down[i];
        }
    }
    let hidden = rms_norm(&x, &to_f64(get(state, FINAL_NORM)), t, d);
    matmul(&hidden, &to_f64(get(state, LM_HEAD)), t, d, v)
}

#[test]
fn production_forward_matches_straight_line_reference() {
    let state = ModelState::init(ModelConfig::micro(16, 2, 2), 20260811).unwrap();
    let ids = [5u32, 9, 13, 21, 2];
    let vis = VisualInput::prepended(vec![
        vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        vec![0.0, 0.9, 0.05, 0.0, 0.0, 1.1, 0.0, 0.0, 0.0, 1.0],
    ]);

    for visual in [None, Some(&vis)] {
        let (logits, _, _) = forward_values(&state, &ids, visual).unwrap();
        let reference = reference_forward(&state, &ids, visual);
        assert_eq!(logits.data.len(), reference.len());
        let mut max_abs = 0.0f64;
        for (a, b) in logits.data.iter().zip(reference.iter()) {
            max_abs = max_abs.max((*a as f64 - b).abs());
        }
        assert!(
            max_abs < 1e-5,
            "forward diverges from reference by {max_abs:e}"
        );
    }
}
