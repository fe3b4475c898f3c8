//! Reverse-mode differentiation over a fixed operation set.
//!
//! A [`Graph`] is an append-only tape: every op pushes one node whose parents
//! already exist, so node order is a topological order and the graph is
//! acyclic by construction. [`Graph::backward`] walks the tape in reverse and
//! applies the hand-written gradient rule registered for each op.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYERNORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    ScaleRows(Var, Var),
    SelectCol(Var, usize),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    CausalAttention { q: Var, k: Var, v: Var, geom: AttnGeom, probs: Vec<f64> },
    MaskedCrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    Sum(Var),
}

/// Batch layout for [`Graph::causal_attention`]: rows are `n_seq` blocks of
/// `seq_len` positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnGeom {
    pub n_seq: usize,
    pub seq_len: usize,
    pub n_heads: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `[d]` row vector to every row of an `[n × d]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(row).numel() != d {
            return Err(Error::shape("add_row", self.value(x).shape(), self.value(row).shape()));
        }
        let r = self.value(row).data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] += r[j];
            }
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.rg(&[x, row]);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scale(c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Multiplies `x` by the single value held in `s` (shape `[1]`).
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("scale_by", self.value(x).shape(), self.value(s).shape()));
        }
        let c = self.value(s).data()[0];
        let out = self.value(x).scale(c);
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::ScaleBy(x, s), rg))
    }

    /// Scales row `i` of `x` `[n × d]` by `w[i]` where `w` is `[n × 1]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(w).numel() != n {
            return Err(Error::shape("scale_rows", self.value(x).shape(), self.value(w).shape()));
        }
        let wv = self.value(w).data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..n {
            for v in &mut out[i * d..(i + 1) * d] {
                *v *= wv[i];
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(out, Op::ScaleRows(x, w), rg))
    }

    /// Column `j` of an `[n × d]` matrix as `[n × 1]`.
    pub fn select_col(&mut self, x: Var, j: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if j >= d {
            return Err(Error::contract(format!("select_col {j} out of range for {d} columns")));
        }
        let data = self.value(x).data();
        let out = Tensor::new(vec![n, 1], (0..n).map(|i| data[i * d + j]).collect())?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SelectCol(x, j), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()));
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().expect("non-empty shape");
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Layer normalization over the last axis followed by `gamma ⊙ x̂ + beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().expect("non-empty shape");
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape("layernorm", xv.shape(), self.value(gamma).shape()));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for (r, row) in xv.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// Gathers rows of `table` `[V × d]` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.value(table).dims2()?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::contract(format!("embedding id {id} out of range for {vocab} rows")));
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Multi-head causal self-attention over `[n_seq·seq_len × d]` inputs.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, geom: AttnGeom) -> Result<Var> {
        let (n, d) = self.value(q).dims2()?;
        for other in [k, v] {
            if self.value(other).shape() != [n, d] {
                return Err(Error::shape("causal_attention", &[n, d], self.value(other).shape()));
            }
        }
        let AttnGeom { n_seq, seq_len: t, n_heads: h } = geom;
        if n != n_seq * t || h == 0 || d % h != 0 {
            return Err(Error::contract(format!("attention geometry {geom:?} does not fit [{n} x {d}]")));
        }
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; n_seq * h * t * t];
        let mut out = vec![0.0; n * d];
        for s in 0..n_seq {
            for head in 0..h {
                let off = s * t * d + head * dh;
                let p = &mut probs[(s * h + head) * t * t..(s * h + head + 1) * t * t];
                gemm(t, dh, t, scale, &qd[off..], (d, 1), &kd[off..], (1, d), 0.0, p, (t, 1));
                for i in 0..t {
                    let row = &mut p[i * t..(i + 1) * t];
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].fill(0.0);
                }
                gemm(t, t, dh, 1.0, p, (t, 1), &vd[off..], (d, 1), 0.0, &mut out[off..], (d, 1));
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(out, Op::CausalAttention { q, k, v, geom, probs }, rg))
    }

    /// Mean token cross-entropy over positions whose mask is non-zero.
    ///
    /// Returns a `[1]` scalar. An all-zero mask is a degenerate batch.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[f64]) -> Result<Var> {
        let (n, vocab) = self.value(logits).dims2()?;
        if targets.len() != n || mask.len() != n {
            return Err(Error::shape("masked_cross_entropy", &[n, vocab], &[targets.len(), mask.len()]));
        }
        let denom: f64 = mask.iter().sum();
        if denom <= 0.0 {
            return Err(Error::DegenerateBatch);
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(vocab).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            if mask[i] != 0.0 {
                if targets[i] >= vocab {
                    return Err(Error::contract(format!("target {} out of range", targets[i])));
                }
                loss += mask[i] * (lse - row[targets[i]]);
            }
            for z in row.iter_mut() {
                *z = (*z - lse).exp();
            }
        }
        let weights: Vec<f64> = mask.iter().map(|m| m / denom).collect();
        let out = Tensor::scalar(loss / denom);
        let rg = self.rg(&[logits]);
        Ok(self.push(out, Op::MaskedCrossEntropy { logits, targets: targets.to_vec(), weights, probs }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    /// Accumulates d(loss)/d(leaf) for every leaf that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!("backward needs a scalar loss, got shape {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, g, &mut grads)?;
        }
        // Only leaves keep their gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.matmul_t(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, self.value(*a).t_matmul(&g)?)?;
                }
            }
            Op::MatMulT(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.matmul(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.t_matmul(self.value(*a))?)?;
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g)?;
                }
            }
            Op::AddRow(x, row) => {
                if self.wants(*row) {
                    let (_, d) = g.dims2()?;
                    let mut col = vec![0.0; d];
                    for r in g.data().chunks(d) {
                        for (c, v) in col.iter_mut().zip(r) {
                            *c += v;
                        }
                    }
                    let shape = self.value(*row).shape().to_vec();
                    accumulate(grads, *row, Tensor::new(shape, col)?)?;
                }
                if self.wants(*x) {
                    accumulate(grads, *x, g)?;
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.hadamard(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.hadamard(self.value(*a))?)?;
                }
            }
            Op::Scale(x, c) => accumulate(grads, *x, g.scale(*c))?,
            Op::ScaleBy(x, s) => {
                if self.wants(*s) {
                    let ds = g.dot(self.value(*x))?;
                    accumulate(grads, *s, Tensor::new(self.value(*s).shape().to_vec(), vec![ds])?)?;
                }
                if self.wants(*x) {
                    accumulate(grads, *x, g.scale(self.value(*s).data()[0]))?;
                }
            }
            Op::ScaleRows(x, w) => {
                let (n, d) = g.dims2()?;
                if self.wants(*w) {
                    let xv = self.value(*x).data();
                    let dw: Vec<f64> =
                        (0..n).map(|i| (0..d).fold(0.0, |acc, j| acc + g.data()[i * d + j] * xv[i * d + j])).collect();
                    accumulate(grads, *w, Tensor::new(self.value(*w).shape().to_vec(), dw)?)?;
                }
                if self.wants(*x) {
                    let wv = self.value(*w).data();
                    let mut dx = g.into_data();
                    for i in 0..n {
                        for v in &mut dx[i * d..(i + 1) * d] {
                            *v *= wv[i];
                        }
                    }
                    accumulate(grads, *x, Tensor::new(vec![n, d], dx)?)?;
                }
            }
            Op::SelectCol(x, j) => {
                let (n, d) = self.value(*x).dims2()?;
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    dx[i * d + j] = g.data()[i];
                }
                accumulate(grads, *x, Tensor::new(vec![n, d], dx)?)?;
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let dx = g.zip_map(xv, "relu", |gi, xi| if xi > 0.0 { gi } else { 0.0 })?;
                accumulate(grads, *x, dx)?;
            }
            Op::Gelu(x) => {
                let dx = g.zip_map(self.value(*x), "gelu", |gi, v| {
                    let u = GELU_C * (v + 0.044715 * v * v * v);
                    let th = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                    gi * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)
                })?;
                accumulate(grads, *x, dx)?;
            }
            Op::Softmax(x) => {
                let d = *out.shape().last().expect("shape");
                let mut dx = g.into_data();
                for (grow, yrow) in dx.chunks_mut(d).zip(out.data().chunks(d)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (gi, yi) in grow.iter_mut().zip(yrow) {
                        *gi = yi * (*gi - dot);
                    }
                }
                accumulate(grads, *x, Tensor::new(out.shape().to_vec(), dx)?)?;
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = *out.shape().last().expect("shape");
                let gd = g.data();
                if self.wants(*gamma) {
                    let mut dg = vec![0.0; d];
                    for (gr, hr) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    accumulate(grads, *gamma, Tensor::new(self.value(*gamma).shape().to_vec(), dg)?)?;
                }
                if self.wants(*beta) {
                    let mut db = vec![0.0; d];
                    for gr in gd.chunks(d) {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                    accumulate(grads, *beta, Tensor::new(self.value(*beta).shape().to_vec(), db)?)?;
                }
                if self.wants(*x) {
                    let gamma_v = self.value(*gamma).data();
                    let mut dx = vec![0.0; gd.len()];
                    for (r, (gr, hr)) in gd.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gamma_v[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        let is = inv_std[r];
                        for j in 0..d {
                            let dh = gr[j] * gamma_v[j];
                            dx[r * d + j] = is / d as f64 * (d as f64 * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(out.shape().to_vec(), dx)?)?;
                }
            }
            Op::Embedding { table, ids } => {
                let (vocab, d) = self.value(*table).dims2()?;
                let mut dt = vec![0.0; vocab * d];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g.data()[r * d + j];
                    }
                }
                accumulate(grads, *table, Tensor::new(vec![vocab, d], dt)?)?;
            }
            Op::CausalAttention { q, k, v, geom, probs } => {
                let (n, d) = out.dims2()?;
                let AttnGeom { n_seq, seq_len: t, n_heads: h } = *geom;
                let dh = d / h;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let gd = g.data();
                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; n * d];
                let mut dv = vec![0.0; n * d];
                let mut dp = vec![0.0; t * t];
                for s in 0..n_seq {
                    for head in 0..h {
                        let off = s * t * d + head * dh;
                        let p = &probs[(s * h + head) * t * t..(s * h + head + 1) * t * t];
                        // dV = Pᵀ dO
                        gemm(t, t, dh, 1.0, p, (1, t), &gd[off..], (d, 1), 0.0, &mut dv[off..], (d, 1));
                        // dP = dO Vᵀ
                        gemm(t, dh, t, 1.0, &gd[off..], (d, 1), &vd[off..], (1, d), 0.0, &mut dp, (t, 1));
                        for i in 0..t {
                            let prow = &p[i * t..(i + 1) * t];
                            let drow = &mut dp[i * t..(i + 1) * t];
                            let dot: f64 = prow[..=i].iter().zip(&drow[..=i]).map(|(a, b)| a * b).sum();
                            for j in 0..=i {
                                drow[j] = prow[j] * (drow[j] - dot);
                            }
                            drow[i + 1..].fill(0.0);
                        }
                        gemm(t, t, dh, scale, &dp, (t, 1), &kd[off..], (d, 1), 0.0, &mut dq[off..], (d, 1));
                        gemm(t, t, dh, scale, &dp, (1, t), &qd[off..], (d, 1), 0.0, &mut dk[off..], (d, 1));
                    }
                }
                for (var, grad) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.wants(var) {
                        accumulate(grads, var, Tensor::new(vec![n, d], grad)?)?;
                    }
                }
            }
            Op::MaskedCrossEntropy { logits, targets, weights, probs } => {
                let (_, vocab) = self.value(*logits).dims2()?;
                let scale = g.data()[0];
                let mut dl = probs.clone();
                for (i, row) in dl.chunks_mut(vocab).enumerate() {
                    let w = weights[i] * scale;
                    if w == 0.0 {
                        row.fill(0.0);
                        continue;
                    }
                    for z in row.iter_mut() {
                        *z *= w;
                    }
                    row[targets[i]] -= w;
                }
                accumulate(grads, *logits, Tensor::new(self.value(*logits).shape().to_vec(), dl)?)?;
            }
            Op::Sum(x) => {
                let c = g.data()[0];
                accumulate(grads, *x, Tensor::full(self.value(*x).shape().to_vec(), c))?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for z in row.iter_mut() {
        *z = (*z - max).exp();
        total += *z;
    }
    for z in row.iter_mut() {
        *z /= total;
    }
}
