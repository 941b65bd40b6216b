//! The autodiff tape: tensors, ops, and the reverse pass.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps};

use super::kernels::{matmul_nn, matmul_tn_acc, transpose};
use super::{NumericsError, Result};

/// Scalar type the engine runs in. Training uses `f32`; gradient checking
/// prefers `f64`.
pub trait Element:
    Float + FromPrimitive + NumAssignOps + Sum + Debug + Display + Send + Sync + 'static
{
    fn from_f64_lossy(x: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Element for f32 {
    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64_lossy(x: f64) -> Self {
        x
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Dense row-major tensor value. Most of the crate works with matrices
/// (`shape = [rows, cols]`) and scalars (`shape = [1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    pub shape: Vec<usize>,
    pub data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::Invalid(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: E) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![E::zero(); numel],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<E>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// (rows, cols) view; a flat vector counts as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            2 => (self.shape[0], self.shape[1]),
            1 => (1, self.shape[0]),
            _ => (1, self.numel()),
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| E::from_f64_lossy(x)).collect())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64_lossy()).collect()
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<E> {
    Leaf,
    Add(Var, Var),
    /// Row-broadcast add: `(T x D) + (D)`.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, E),
    Matmul(Var, Var),
    /// `A @ B^T` with both operands row-major.
    MatmulNt(Var, Var),
    SumAll(Var),
    Silu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<E>,
    },
    Rope {
        x: Var,
        n_heads: usize,
        positions: Vec<usize>,
        base: f64,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    L2NormRows {
        x: Var,
        inv_norm: Vec<E>,
    },
    SoftmaxRows {
        x: Var,
        mask: Option<Vec<bool>>,
    },
    CrossEntropyMasked {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<E>,
        n_masked: usize,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        probs: Vec<E>,
    },
    /// Op cache already dropped by the reverse pass.
    Released,
}

struct Node<E> {
    value: Tensor<E>,
    requires_grad: bool,
    grad: Option<Vec<E>>,
    op: Op<E>,
}

/// Append-only computation tape.
pub struct Tape<E> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node. Handles from before the reset are invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    fn push(&mut self, value: Tensor<E>, requires_grad: bool, op: Op<E>) -> Var {
        #[cfg(debug_assertions)]
        {
            if let Some(bad) = value.data.iter().find(|x| !x.is_finite()) {
                panic!("non-finite value {bad} pushed onto tape (op output)");
            }
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(id)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- ops ------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape != vb.shape {
            return Err(NumericsError::ShapeMismatch {
                op: "add",
                left: va.shape.clone(),
                right: vb.shape.clone(),
            });
        }
        let data = va
            .data
            .iter()
            .zip(vb.data.iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = va.shape.clone();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape, data }, rg, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let (t, d) = va.dims2();
        if vr.numel() != d {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                left: va.shape.clone(),
                right: vr.shape.clone(),
            });
        }
        let mut data = va.data.clone();
        for i in 0..t {
            for j in 0..d {
                data[i * d + j] += vr.data[j];
            }
        }
        let shape = va.shape.clone();
        let rg = self.any_grad(&[a, row]);
        Ok(self.push(Tensor { shape, data }, rg, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape != vb.shape {
            return Err(NumericsError::ShapeMismatch {
                op: "mul",
                left: va.shape.clone(),
                right: vb.shape.clone(),
            });
        }
        let data = va
            .data
            .iter()
            .zip(vb.data.iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = va.shape.clone();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape, data }, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: E) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let data = va.data.iter().map(|&x| x * c).collect();
        let shape = va.shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Tensor { shape, data }, rg, Op::Scale(a, c)))
    }

    /// `(M x K) @ (K x N)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, ka) = va.dims2();
        let (kb, n) = vb.dims2();
        if ka != kb {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: va.shape.clone(),
                right: vb.shape.clone(),
            });
        }
        let data = matmul_nn(&va.data, &vb.data, m, ka, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            rg,
            Op::Matmul(a, b),
        ))
    }

    /// `(M x K) @ (N x K)^T -> (M x N)`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, ka) = va.dims2();
        let (n, kb) = vb.dims2();
        if ka != kb {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul_nt",
                left: va.shape.clone(),
                right: vb.shape.clone(),
            });
        }
        let bt = transpose(&vb.data, n, ka);
        let data = matmul_nn(&va.data, &bt, m, ka, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            rg,
            Op::MatmulNt(a, b),
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let s: E = va.data.iter().copied().sum();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Tensor::scalar(s), rg, Op::SumAll(a)))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let data = va
            .data
            .iter()
            .map(|&x| x * (E::one() / (E::one() + (-x).exp())))
            .collect();
        let shape = va.shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Tensor { shape, data }, rg, Op::Silu(a)))
    }

    /// Row-wise RMS normalization with a learned gain: `y = x / rms(x) * g`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (vx, vg) = (&self.nodes[x.0].value, &self.nodes[gain.0].value);
        let (t, d) = vx.dims2();
        if vg.numel() != d {
            return Err(NumericsError::ShapeMismatch {
                op: "rms_norm",
                left: vx.shape.clone(),
                right: vg.shape.clone(),
            });
        }
        let epse = E::from_f64_lossy(eps);
        let dinv = E::one() / E::from_usize(d).unwrap();
        let mut data = vec![E::zero(); t * d];
        let mut inv_rms = vec![E::zero(); t];
        for i in 0..t {
            let row = &vx.data[i * d..(i + 1) * d];
            let ms: E = row.iter().map(|&v| v * v).sum::<E>() * dinv;
            let inv = E::one() / (ms + epse).sqrt();
            inv_rms[i] = inv;
            for j in 0..d {
                data[i * d + j] = row[j] * inv * vg.data[j];
            }
        }
        let shape = vx.shape.clone();
        let rg = self.any_grad(&[x, gain]);
        Ok(self.push(Tensor { shape, data }, rg, Op::RmsNorm { x, gain, inv_rms }))
    }

    /// Rotary position embedding over per-head column blocks.
    ///
    /// `x` is `(T x n_heads*head_dim)`; `positions[i]` is the absolute
    /// position of row `i`. Pairs `(j, j + head_dim/2)` within each head are
    /// rotated by `pos * base^(-2j/head_dim)`.
    pub fn rope(&mut self, x: Var, n_heads: usize, positions: &[usize], base: f64) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let (t, d) = vx.dims2();
        if d % n_heads != 0 {
            return Err(NumericsError::Invalid(format!(
                "rope: width {d} not divisible by {n_heads} heads"
            )));
        }
        let hd = d / n_heads;
        if hd % 2 != 0 {
            return Err(NumericsError::Invalid(format!(
                "rope: head dim {hd} must be even"
            )));
        }
        if positions.len() != t {
            return Err(NumericsError::Invalid(format!(
                "rope: {} positions for {} rows",
                positions.len(),
                t
            )));
        }
        let positions = positions.to_vec();
        let data = rope_apply(&vx.data, t, n_heads, hd, &positions, base, false);
        let shape = vx.shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            Tensor { shape, data },
            rg,
            Op::Rope {
                x,
                n_heads,
                positions,
                base,
            },
        ))
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = &self.nodes[table.0].value;
        let (rows, d) = vt.dims2();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(NumericsError::TargetOutOfRange { id, vocab: rows });
            }
            data.extend_from_slice(&vt.data[id * d..(id + 1) * d]);
        }
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), d],
                data,
            },
            rg,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumericsError::Invalid("concat_rows of nothing".into()));
        }
        let d = self.nodes[parts[0].0].value.dims2().1;
        let mut total = 0;
        for p in parts {
            let (r, dc) = self.nodes[p.0].value.dims2();
            if dc != d {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![total, d],
                    right: self.nodes[p.0].value.shape.clone(),
                });
            }
            total += r;
        }
        let mut data = Vec::with_capacity(total * d);
        for p in parts {
            data.extend_from_slice(&self.nodes[p.0].value.data);
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor {
                shape: vec![total, d],
                data,
            },
            rg,
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let (t, d) = vx.dims2();
        if start + len > t {
            return Err(NumericsError::Invalid(format!(
                "slice_rows {start}..{} out of {t} rows",
                start + len
            )));
        }
        let data = vx.data[start * d..(start + len) * d].to_vec();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            Tensor {
                shape: vec![len, d],
                data,
            },
            rg,
            Op::SliceRows { x, start },
        ))
    }

    /// Normalize every row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let (t, d) = vx.dims2();
        let mut data = vec![E::zero(); t * d];
        let mut inv_norm = vec![E::zero(); t];
        for i in 0..t {
            let row = &vx.data[i * d..(i + 1) * d];
            let sq: E = row.iter().map(|&v| v * v).sum();
            if sq <= E::zero() {
                return Err(NumericsError::Invalid(format!(
                    "l2_normalize_rows: row {i} has zero norm"
                )));
            }
            let inv = E::one() / sq.sqrt();
            inv_norm[i] = inv;
            for j in 0..d {
                data[i * d + j] = row[j] * inv;
            }
        }
        let shape = vx.shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor { shape, data }, rg, Op::L2NormRows { x, inv_norm }))
    }

    /// Row-wise softmax with optional boolean mask (`false` entries are
    /// excluded and come out exactly zero). Stabilized by row-max
    /// subtraction.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let (t, d) = vx.dims2();
        if let Some(m) = mask {
            if m.len() != t * d {
                return Err(NumericsError::ShapeMismatch {
                    op: "softmax_rows",
                    left: vx.shape.clone(),
                    right: vec![m.len()],
                });
            }
        }
        let mut data = vec![E::zero(); t * d];
        for i in 0..t {
            let row = &vx.data[i * d..(i + 1) * d];
            let mrow = mask.map(|m| &m[i * d..(i + 1) * d]);
            softmax_row_into(row, mrow, &mut data[i * d..(i + 1) * d])
                .map_err(|_| NumericsError::DegenerateRow { row: i })?;
        }
        let shape = vx.shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            Tensor { shape, data },
            rg,
            Op::SoftmaxRows {
                x,
                mask: mask.map(|m| m.to_vec()),
            },
        ))
    }

    /// Mean negative log-likelihood over the masked-in positions of a
    /// `(T x V)` logit matrix.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let vl = &self.nodes[logits.0].value;
        let (t, v) = vl.dims2();
        if targets.len() != t || mask.len() != t {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy_masked",
                left: vec![t, v],
                right: vec![targets.len(), mask.len()],
            });
        }
        let n_masked = mask.iter().filter(|&&b| b).count();
        if n_masked == 0 {
            return Err(NumericsError::EmptySupervision);
        }
        for (i, &tid) in targets.iter().enumerate() {
            if mask[i] && tid >= v {
                return Err(NumericsError::TargetOutOfRange { id: tid, vocab: v });
            }
        }
        let mut probs = vec![E::zero(); t * v];
        let mut loss = E::zero();
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let row = &vl.data[i * v..(i + 1) * v];
            let prow = &mut probs[i * v..(i + 1) * v];
            // log-softmax via max subtraction, then pick the target.
            let mx = row.iter().copied().fold(E::neg_infinity(), E::max);
            let mut z = E::zero();
            for j in 0..v {
                let e = (row[j] - mx).exp();
                prow[j] = e;
                z += e;
            }
            let zinv = E::one() / z;
            for p in prow.iter_mut() {
                *p *= zinv;
            }
            loss += z.ln() - (row[targets[i]] - mx);
        }
        loss = loss / E::from_usize(n_masked).unwrap();
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropyMasked {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                n_masked,
            },
        ))
    }

    /// Multi-head scaled dot-product attention with a strict causal mask
    /// (position `i` attends to positions `<= i`). `q`, `k`, `v` are
    /// `(T x n_heads*head_dim)` with heads in contiguous column blocks.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize) -> Result<Var> {
        let (vq, vk, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        if vq.shape != vk.shape || vq.shape != vv.shape {
            return Err(NumericsError::ShapeMismatch {
                op: "causal_attention",
                left: vq.shape.clone(),
                right: vk.shape.clone(),
            });
        }
        let (t, d) = vq.dims2();
        if d % n_heads != 0 {
            return Err(NumericsError::Invalid(format!(
                "attention: width {d} not divisible by {n_heads} heads"
            )));
        }
        let hd = d / n_heads;
        let scale = E::from_f64_lossy(1.0 / (hd as f64).sqrt());
        let mut out = vec![E::zero(); t * d];
        let mut probs = vec![E::zero(); n_heads * t * t];
        for h in 0..n_heads {
            let off = h * hd;
            let qh = slice_cols(&vq.data, t, d, off, hd);
            let kh = slice_cols(&vk.data, t, d, off, hd);
            let vh = slice_cols(&vv.data, t, d, off, hd);
            let kht = transpose(&kh, t, hd);
            let mut scores = matmul_nn(&qh, &kht, t, hd, t);
            for s in scores.iter_mut() {
                *s *= scale;
            }
            let ph = &mut probs[h * t * t..(h + 1) * t * t];
            for i in 0..t {
                let row = &scores[i * t..(i + 1) * t];
                // causal: row i sees columns 0..=i
                let visible = &row[..=i];
                let mx = visible.iter().copied().fold(E::neg_infinity(), E::max);
                let mut z = E::zero();
                for (j, &s) in visible.iter().enumerate() {
                    let e = (s - mx).exp();
                    ph[i * t + j] = e;
                    z += e;
                }
                let zinv = E::one() / z;
                for j in 0..=i {
                    ph[i * t + j] *= zinv;
                }
            }
            let oh = matmul_nn(ph, &vh, t, t, hd);
            write_cols(&mut out, &oh, t, d, off, hd);
        }
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(
            Tensor {
                shape: vec![t, d],
                data: out,
            },
            rg,
            Op::CausalAttention {
                q,
                k,
                v,
                n_heads,
                probs,
            },
        ))
    }

    // ---- reverse pass ----------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Gradients accumulate into
    /// every reachable node with `requires_grad`; op caches are released as
    /// the sweep passes them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(NumericsError::Invalid(format!(
                "backward requires a scalar, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(NumericsError::Invalid(
                "backward from a node that requires no grad".into(),
            ));
        }
        self.nodes[loss.0].grad = Some(vec![E::one()]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                // release caches of skipped nodes too
                self.nodes[i].op = Op::Released;
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Released);
            self.step_back(i, &op);
        }
        Ok(())
    }

    fn take_grad(&self, i: usize) -> Vec<E> {
        self.nodes[i].grad.clone().expect("grad present")
    }

    fn acc_into(&mut self, v: Var, delta: &[E]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let numel = self.nodes[v.0].value.numel();
        let g = self.nodes[v.0]
            .grad
            .get_or_insert_with(|| vec![E::zero(); numel]);
        for (gi, &di) in g.iter_mut().zip(delta.iter()) {
            *gi += di;
        }
    }

    fn step_back(&mut self, i: usize, op: &Op<E>) {
        match op {
            Op::Leaf | Op::Released => {}
            Op::Add(a, b) => {
                let g = self.take_grad(i);
                self.acc_into(*a, &g);
                self.acc_into(*b, &g);
            }
            Op::AddRow(a, row) => {
                let g = self.take_grad(i);
                self.acc_into(*a, &g);
                let d = self.nodes[row.0].value.numel();
                let t = g.len() / d;
                let mut gr = vec![E::zero(); d];
                for r in 0..t {
                    for j in 0..d {
                        gr[j] += g[r * d + j];
                    }
                }
                self.acc_into(*row, &gr);
            }
            Op::Mul(a, b) => {
                let g = self.take_grad(i);
                let da: Vec<E> = g
                    .iter()
                    .zip(self.nodes[b.0].value.data.iter())
                    .map(|(&gi, &bi)| gi * bi)
                    .collect();
                let db: Vec<E> = g
                    .iter()
                    .zip(self.nodes[a.0].value.data.iter())
                    .map(|(&gi, &ai)| gi * ai)
                    .collect();
                self.acc_into(*a, &da);
                self.acc_into(*b, &db);
            }
            Op::Scale(a, c) => {
                let g = self.take_grad(i);
                let da: Vec<E> = g.iter().map(|&gi| gi * *c).collect();
                self.acc_into(*a, &da);
            }
            Op::Matmul(a, b) => {
                let g = self.take_grad(i);
                let (m, k) = self.nodes[a.0].value.dims2();
                let n = self.nodes[b.0].value.dims2().1;
                if self.nodes[a.0].requires_grad {
                    // dA = G @ B^T
                    let bt = transpose(&self.nodes[b.0].value.data, k, n);
                    let da = matmul_nn(&g, &bt, m, n, k);
                    self.acc_into(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = A^T @ G
                    let mut db = vec![E::zero(); k * n];
                    matmul_tn_acc(&mut db, &self.nodes[a.0].value.data, &g, m, k, n);
                    self.acc_into(*b, &db);
                }
            }
            Op::MatmulNt(a, b) => {
                // Y = A @ B^T: dA = G @ B ; dB = G^T @ A
                let g = self.take_grad(i);
                let (m, k) = self.nodes[a.0].value.dims2();
                let n = self.nodes[b.0].value.dims2().0;
                if self.nodes[a.0].requires_grad {
                    let da = matmul_nn(&g, &self.nodes[b.0].value.data, m, n, k);
                    self.acc_into(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![E::zero(); n * k];
                    matmul_tn_acc(&mut db, &g, &self.nodes[a.0].value.data, m, n, k);
                    self.acc_into(*b, &db);
                }
            }
            Op::SumAll(a) => {
                let g = self.take_grad(i)[0];
                let da = vec![g; self.nodes[a.0].value.numel()];
                self.acc_into(*a, &da);
            }
            Op::Silu(a) => {
                let g = self.take_grad(i);
                let da: Vec<E> = g
                    .iter()
                    .zip(self.nodes[a.0].value.data.iter())
                    .map(|(&gi, &x)| {
                        let s = E::one() / (E::one() + (-x).exp());
                        gi * s * (E::one() + x * (E::one() - s))
                    })
                    .collect();
                self.acc_into(*a, &da);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let g = self.take_grad(i);
                let (t, d) = self.nodes[x.0].value.dims2();
                let dinv = E::one() / E::from_usize(d).unwrap();
                let xv = &self.nodes[x.0].value.data;
                let gv = &self.nodes[gain.0].value.data;
                let mut dx = vec![E::zero(); t * d];
                let mut dgain = vec![E::zero(); d];
                for r in 0..t {
                    let inv = inv_rms[r];
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut dot = E::zero();
                    for j in 0..d {
                        dot += gr[j] * gv[j] * xr[j];
                    }
                    let coef = inv * inv * inv * dinv * dot;
                    for j in 0..d {
                        dx[r * d + j] = gr[j] * gv[j] * inv - xr[j] * coef;
                        dgain[j] += gr[j] * xr[j] * inv;
                    }
                }
                self.acc_into(*x, &dx);
                self.acc_into(*gain, &dgain);
            }
            Op::Rope {
                x,
                n_heads,
                positions,
                base,
            } => {
                let g = self.take_grad(i);
                let (t, d) = self.nodes[x.0].value.dims2();
                let hd = d / n_heads;
                // rotation is orthogonal: transpose = rotate by -angle
                let dx = rope_apply(&g, t, *n_heads, hd, positions, *base, true);
                self.acc_into(*x, &dx);
            }
            Op::GatherRows { table, ids } => {
                let g = self.take_grad(i);
                if self.nodes[table.0].requires_grad {
                    let d = self.nodes[table.0].value.dims2().1;
                    let numel = self.nodes[table.0].value.numel();
                    let gt = self.nodes[table.0]
                        .grad
                        .get_or_insert_with(|| vec![E::zero(); numel]);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let g = self.take_grad(i);
                let d = self.nodes[i].value.dims2().1;
                let mut row = 0;
                for p in parts {
                    let r = self.nodes[p.0].value.dims2().0;
                    let gp = g[row * d..(row + r) * d].to_vec();
                    self.acc_into(*p, &gp);
                    row += r;
                }
            }
            Op::SliceRows { x, start } => {
                let g = self.take_grad(i);
                if self.nodes[x.0].requires_grad {
                    let (_, d) = self.nodes[x.0].value.dims2();
                    let numel = self.nodes[x.0].value.numel();
                    let gx = self.nodes[x.0]
                        .grad
                        .get_or_insert_with(|| vec![E::zero(); numel]);
                    for (off, &gi) in g.iter().enumerate() {
                        gx[start * d + off] += gi;
                    }
                }
            }
            Op::L2NormRows { x, inv_norm } => {
                let g = self.take_grad(i);
                let (t, d) = self.nodes[x.0].value.dims2();
                let yv = &self.nodes[i].value.data;
                let mut dx = vec![E::zero(); t * d];
                for r in 0..t {
                    let inv = inv_norm[r];
                    let yr = &yv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: E = yr.iter().zip(gr.iter()).map(|(&y, &gi)| y * gi).sum();
                    for j in 0..d {
                        dx[r * d + j] = inv * (gr[j] - yr[j] * dot);
                    }
                }
                self.acc_into(*x, &dx);
            }
            Op::SoftmaxRows { x, .. } => {
                let g = self.take_grad(i);
                let (t, d) = self.nodes[x.0].value.dims2();
                let yv = &self.nodes[i].value.data;
                let mut dx = vec![E::zero(); t * d];
                for r in 0..t {
                    let yr = &yv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: E = yr.iter().zip(gr.iter()).map(|(&y, &gi)| y * gi).sum();
                    for j in 0..d {
                        dx[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc_into(*x, &dx);
            }
            Op::CrossEntropyMasked {
                logits,
                targets,
                mask,
                probs,
                n_masked,
            } => {
                let g = self.take_grad(i)[0];
                let (t, v) = self.nodes[logits.0].value.dims2();
                let coef = g / E::from_usize(*n_masked).unwrap();
                let mut dl = vec![E::zero(); t * v];
                for r in 0..t {
                    if !mask[r] {
                        continue;
                    }
                    for j in 0..v {
                        dl[r * v + j] = probs[r * v + j] * coef;
                    }
                    dl[r * v + targets[r]] -= coef;
                }
                self.acc_into(*logits, &dl);
            }
            Op::CausalAttention {
                q,
                k,
                v,
                n_heads,
                probs,
            } => {
                let g = self.take_grad(i);
                let (t, d) = self.nodes[q.0].value.dims2();
                let hd = d / n_heads;
                let scale = E::from_f64_lossy(1.0 / (hd as f64).sqrt());
                let mut dq = vec![E::zero(); t * d];
                let mut dk = vec![E::zero(); t * d];
                let mut dv = vec![E::zero(); t * d];
                for h in 0..*n_heads {
                    let off = h * hd;
                    let ph = &probs[h * t * t..(h + 1) * t * t];
                    let gh = slice_cols(&g, t, d, off, hd);
                    let qh = slice_cols(&self.nodes[q.0].value.data, t, d, off, hd);
                    let kh = slice_cols(&self.nodes[k.0].value.data, t, d, off, hd);
                    let vh = slice_cols(&self.nodes[v.0].value.data, t, d, off, hd);
                    // dV_h = P^T @ G_h
                    let mut dvh = vec![E::zero(); t * hd];
                    matmul_tn_acc(&mut dvh, ph, &gh, t, t, hd);
                    // dP = G_h @ V_h^T
                    let vht = transpose(&vh, t, hd);
                    let dp = matmul_nn(&gh, &vht, t, hd, t);
                    // dS = P o (dP - rowsum(dP o P)); masked entries have P=0
                    let mut ds = vec![E::zero(); t * t];
                    for r in 0..t {
                        let mut dot = E::zero();
                        for c in 0..=r {
                            dot += dp[r * t + c] * ph[r * t + c];
                        }
                        for c in 0..=r {
                            ds[r * t + c] = ph[r * t + c] * (dp[r * t + c] - dot) * scale;
                        }
                    }
                    // dQ_h = dS @ K_h ; dK_h = dS^T @ Q_h
                    let dqh = matmul_nn(&ds, &kh, t, t, hd);
                    let mut dkh = vec![E::zero(); t * hd];
                    matmul_tn_acc(&mut dkh, &ds, &qh, t, t, hd);
                    write_cols(&mut dq, &dqh, t, d, off, hd);
                    write_cols(&mut dk, &dkh, t, d, off, hd);
                    write_cols(&mut dv, &dvh, t, d, off, hd);
                }
                self.acc_into(*q, &dq);
                self.acc_into(*k, &dk);
                self.acc_into(*v, &dv);
            }
        }
    }
}

fn softmax_row_into<E: Element>(
    row: &[E],
    mask: Option<&[bool]>,
    out: &mut [E],
) -> std::result::Result<(), ()> {
    let mut mx = E::neg_infinity();
    let mut any = false;
    for (j, &x) in row.iter().enumerate() {
        if mask.map_or(true, |m| m[j]) {
            any = true;
            if x > mx {
                mx = x;
            }
        }
    }
    if !any {
        return Err(());
    }
    let mut z = E::zero();
    for (j, &x) in row.iter().enumerate() {
        if mask.map_or(true, |m| m[j]) {
            let e = (x - mx).exp();
            out[j] = e;
            z += e;
        } else {
            out[j] = E::zero();
        }
    }
    let zinv = E::one() / z;
    for o in out.iter_mut() {
        *o *= zinv;
    }
    Ok(())
}

fn rope_apply<E: Element>(
    x: &[E],
    t: usize,
    n_heads: usize,
    hd: usize,
    positions: &[usize],
    base: f64,
    inverse: bool,
) -> Vec<E> {
    let half = hd / 2;
    let mut out = vec![E::zero(); x.len()];
    let d = n_heads * hd;
    for r in 0..t {
        let pos = positions[r] as f64;
        for h in 0..n_heads {
            let off = h * hd;
            for j in 0..half {
                let theta = pos * base.powf(-2.0 * (j as f64) / (hd as f64));
                let (sin, cos) = if inverse {
                    ((-theta).sin(), (-theta).cos())
                } else {
                    (theta.sin(), theta.cos())
                };
                let (sin, cos) = (E::from_f64_lossy(sin), E::from_f64_lossy(cos));
                let a = x[r * d + off + j];
                let b = x[r * d + off + j + half];
                out[r * d + off + j] = a * cos - b * sin;
                out[r * d + off + j + half] = a * sin + b * cos;
            }
        }
    }
    out
}

fn slice_cols<E: Element>(x: &[E], t: usize, d: usize, off: usize, w: usize) -> Vec<E> {
    let mut out = vec![E::zero(); t * w];
    for r in 0..t {
        out[r * w..(r + 1) * w].copy_from_slice(&x[r * d + off..r * d + off + w]);
    }
    out
}

fn write_cols<E: Element>(x: &mut [E], block: &[E], t: usize, d: usize, off: usize, w: usize) {
    for r in 0..t {
        x[r * d + off..r * d + off + w].copy_from_slice(&block[r * w..(r + 1) * w]);
    }
}
