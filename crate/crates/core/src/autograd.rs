//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in creation order, so node indices are
//! already a topological order; [`Tape::backward`] walks them once in reverse.
//! Nodes whose inputs carry no gradient are never visited on the way back.

use crate::error::TensorError;
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    CausalSoftmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ScaleRows {
        x: Var,
        gates: Var,
        col: usize,
    },
    TopKGate {
        logits: Var,
        selected: Vec<Vec<usize>>,
    },
    WeightedNll {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub const NORM_EPS: f64 = 1e-6;

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// Ranks `logits` descending with ties broken by the lowest index.
pub fn top_k_indices(logits: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k.min(logits.len()));
    idx
}

/// Sparse gate vector: softmax over the `top_k` largest logits, zeros elsewhere.
pub fn gate(logits: &[f64], top_k: usize) -> Vec<f64> {
    let sel = top_k_indices(logits, top_k.max(1));
    let mut sel_logits: Vec<f64> = sel.iter().map(|&i| logits[i]).collect();
    tensor::softmax_in_place(&mut sel_logits);
    let mut out = vec![0.0; logits.len()];
    for (&i, g) in sel.iter().zip(sel_logits) {
        out[i] = g;
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created after the first `len`, so leaves bound up
    /// front can be reused across forwards.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2();
        let (k2, n) = bv.dims2();
        if k != k2 {
            return Err(mismatch("matmul", av, bv));
        }
        let out = tensor::matmul_raw(av.data(), bv.data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("add", av, bv));
        }
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("mul", av, bv));
        }
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let out = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * c).collect())
            .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = av.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av.data()[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(vec![c, r], out).expect("shape"), Op::Transpose(a), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        if len == 0 || start + len > c {
            return Err(TensorError::IndexOutOfRange {
                what: "column slice",
                index: start + len,
                bound: c,
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv.data()[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![r, len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(mismatch("concat_cols", self.value(parts[0]), pv));
            }
            total += pv.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Row-wise `x / rms(x) * gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var, TensorError> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let (r, c) = xv.dims2();
        if gv.len() != c {
            return Err(mismatch("rms_norm", xv, gv));
        }
        let mut out = vec![0.0; r * c];
        let mut inv_rms = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + NORM_EPS).sqrt();
            inv_rms.push(inv);
            for j in 0..c {
                out[i * c + j] = row[j] * inv * gv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, gain]);
        Ok(self.push(Tensor::new(shape, out)?, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Row-wise `(x - mean) / std * gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (r, c) = xv.dims2();
        if gv.len() != c || bv.len() != c {
            return Err(mismatch("layer_norm", xv, gv));
        }
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(inv);
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv * gv.data()[j] + bv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| tensor::gelu(v)).collect())
            .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Softmax of a 2-D tensor along `axis` (0 = down columns, 1 = along rows).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let mut out = xv.data().to_vec();
        match axis {
            1 => {
                for i in 0..r {
                    tensor::softmax_in_place(&mut out[i * c..(i + 1) * c]);
                }
            }
            0 => {
                for j in 0..c {
                    let mut col: Vec<f64> = (0..r).map(|i| out[i * c + j]).collect();
                    tensor::softmax_in_place(&mut col);
                    for (i, v) in col.into_iter().enumerate() {
                        out[i * c + j] = v;
                    }
                }
            }
            _ => {
                return Err(TensorError::IndexOutOfRange {
                    what: "softmax axis",
                    index: axis,
                    bound: 2,
                })
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Row softmax of a square score matrix restricted to columns `j <= i`.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        if r != c {
            return Err(mismatch("causal_softmax", xv, xv));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &mut out[i * c..i * c + i + 1];
            row.copy_from_slice(&xv.data()[i * c..i * c + i + 1]);
            tensor::softmax_in_place(row);
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::CausalSoftmax(x), rg))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let tv = self.value(table);
        let (v, d) = tv.dims2();
        if ids.is_empty() {
            return Err(TensorError::InvalidShape(vec![0, d]));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    what: "embedding",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// `out[t, :] = gates[t, col] * x[t, :]`.
    pub fn scale_rows(&mut self, x: Var, gates: Var, col: usize) -> Result<Var, TensorError> {
        let (xv, gv) = (self.value(x), self.value(gates));
        let (r, c) = xv.dims2();
        let (gr, gc) = gv.dims2();
        if gr != r || col >= gc {
            return Err(mismatch("scale_rows", xv, gv));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let g = gv.data()[i * gc + col];
            for j in 0..c {
                out[i * c + j] = g * xv.data()[i * c + j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, gates]);
        Ok(self.push(Tensor::new(shape, out)?, Op::ScaleRows { x, gates, col }, rg))
    }

    /// Per-row sparse gating: softmax over the `k` largest logits (ties to the
    /// lowest index), zeros elsewhere.
    pub fn top_k_gate(&mut self, logits: Var, k: usize) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        let (r, e) = lv.dims2();
        if k == 0 || k > e {
            return Err(TensorError::IndexOutOfRange {
                what: "top_k",
                index: k,
                bound: e,
            });
        }
        let mut out = vec![0.0; r * e];
        let mut selected = Vec::with_capacity(r);
        for i in 0..r {
            let row = lv.row(i);
            let sel = top_k_indices(row, k);
            let mut vals: Vec<f64> = sel.iter().map(|&j| row[j]).collect();
            tensor::softmax_in_place(&mut vals);
            for (&j, g) in sel.iter().zip(vals) {
                out[i * e + j] = g;
            }
            selected.push(sel);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::new(vec![r, e], out)?,
            Op::TopKGate { logits, selected },
            rg,
        ))
    }

    /// `sum_t weights[t] * -log softmax(logits[t])[targets[t]]` as a scalar.
    pub fn weighted_nll(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        let (r, v) = lv.dims2();
        if targets.len() != r || weights.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_nll",
                left: lv.shape().to_vec(),
                right: vec![targets.len(), weights.len()],
            });
        }
        let mut loss = 0.0;
        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if t >= v {
                return Err(TensorError::IndexOutOfRange {
                    what: "target",
                    index: t,
                    bound: v,
                });
            }
            if w != 0.0 {
                let row = lv.row(i);
                loss += w * (tensor::log_sum_exp(row) - row[t]);
            }
        }
        if !loss.is_finite() {
            return Err(TensorError::NonFinite("weighted_nll"));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedNll {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Mean next-token NLL over positions whose `ignore` flag is false.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: &[bool],
    ) -> Result<Var, TensorError> {
        if ignore.len() != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: vec![targets.len()],
                right: vec![ignore.len()],
            });
        }
        let n = ignore.iter().filter(|&&m| !m).count();
        if n == 0 {
            return Err(TensorError::EmptyLoss);
        }
        let w = 1.0 / n as f64;
        let weights: Vec<f64> = ignore.iter().map(|&m| if m { 0.0 } else { w }).collect();
        self.weighted_nll(logits, targets, &weights)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(vec![1.0; self.nodes[loss.0].value.len()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match (&node.op, grads[i].as_ref()) {
                (Op::Leaf, _) | (_, None) => continue,
                (_, Some(_)) => grads[i].take().expect("checked"),
            };
            self.propagate(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2();
                let n = bv.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    tensor::matmul_nt_acc(ga, g, bv.data(), m, k, n);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    tensor::matmul_tn_acc(gb, av.data(), g, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x * c);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols();
                let (r, len) = node.value.dims2();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..r {
                        for j in 0..len {
                            gx[i * c + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2();
                let mut offset = 0;
                for p in parts {
                    let pc = self.value(*p).cols();
                    if let Some(gp) = self.acc(grads, *p) {
                        for i in 0..r {
                            for j in 0..pc {
                                gp[i * pc + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (self.value(*x), self.value(*gain).data());
                let (r, c) = xv.dims2();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..r {
                        let row = xv.row(i);
                        let inv = inv_rms[i];
                        let dot: f64 = (0..c).map(|j| g[i * c + j] * gv[j] * row[j]).sum();
                        let coef = inv * inv * inv * dot / c as f64;
                        for j in 0..c {
                            gx[i * c + j] += inv * gv[j] * g[i * c + j] - row[j] * coef;
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gain) {
                    for i in 0..r {
                        let row = xv.row(i);
                        for j in 0..c {
                            gg[j] += g[i * c + j] * row[j] * inv_rms[i];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
            } => {
                let (xv, gv) = (self.value(*x), self.value(*gain).data());
                let (r, c) = xv.dims2();
                let xhat = |i: usize, j: usize| {
                    let row = xv.row(i);
                    let mean = row.iter().sum::<f64>() / c as f64;
                    (row[j] - mean) * inv_std[i]
                };
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..r {
                        let dxhat: Vec<f64> = (0..c).map(|j| g[i * c + j] * gv[j]).collect();
                        let xh: Vec<f64> = (0..c).map(|j| xhat(i, j)).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(&xh).map(|(a, b)| a * b).sum();
                        let n = c as f64;
                        for j in 0..c {
                            gx[i * c + j] += inv_std[i] / n * (n * dxhat[j] - s1 - xh[j] * s2);
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gain) {
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * xhat(i, j);
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, d), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *o += d * tensor::gelu_grad(v);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (r, c) = node.value.dims2();
                if let Some(gx) = self.acc(grads, *x) {
                    if *axis == 1 {
                        for i in 0..r {
                            let s: f64 = (0..c).map(|j| y[i * c + j] * g[i * c + j]).sum();
                            for j in 0..c {
                                gx[i * c + j] += y[i * c + j] * (g[i * c + j] - s);
                            }
                        }
                    } else {
                        for j in 0..c {
                            let s: f64 = (0..r).map(|i| y[i * c + j] * g[i * c + j]).sum();
                            for i in 0..r {
                                gx[i * c + j] += y[i * c + j] * (g[i * c + j] - s);
                            }
                        }
                    }
                }
            }
            Op::CausalSoftmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..c {
                        let s: f64 = (0..=i).map(|j| y[i * c + j] * g[i * c + j]).sum();
                        for j in 0..=i {
                            gx[i * c + j] += y[i * c + j] * (g[i * c + j] - s);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.value.cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (t, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[t * d + j];
                        }
                    }
                }
            }
            Op::ScaleRows { x, gates, col } => {
                let (xv, gv) = (self.value(*x), self.value(*gates));
                let (r, c) = xv.dims2();
                let gc = gv.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..r {
                        let gate = gv.data()[i * gc + col];
                        for j in 0..c {
                            gx[i * c + j] += gate * g[i * c + j];
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gates) {
                    for i in 0..r {
                        let row = xv.row(i);
                        gg[i * gc + col] += (0..c).map(|j| g[i * c + j] * row[j]).sum::<f64>();
                    }
                }
            }
            Op::TopKGate { logits, selected } => {
                let y = node.value.data();
                let e = node.value.cols();
                if let Some(gl) = self.acc(grads, *logits) {
                    for (i, sel) in selected.iter().enumerate() {
                        let s: f64 = sel.iter().map(|&j| y[i * e + j] * g[i * e + j]).sum();
                        for &j in sel {
                            gl[i * e + j] += y[i * e + j] * (g[i * e + j] - s);
                        }
                    }
                }
            }
            Op::WeightedNll {
                logits,
                targets,
                weights,
            } => {
                let lv = self.value(*logits);
                let v = lv.cols();
                let up = g[0];
                if let Some(gl) = self.acc(grads, *logits) {
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let mut p = lv.row(i).to_vec();
                        tensor::softmax_in_place(&mut p);
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[i * v + j] += up * w * (p[j] - onehot);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
        }
    }
}
