//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every operation on a [`Tape`] appends a node holding its output value and
//! whatever it needs for the backward pass. Node order is therefore a valid
//! topological order and [`Tape::backward`] walks it once in reverse.
//!
//! Parameters enter through [`Tape::param`]. A parameter used several times on
//! one tape maps to a single node, so gradients from every use (for example the
//! regularized and shadow branches sharing one backbone) accumulate in place.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Tape::custom_unary`]: `(input, output, upstream) -> input gradient`.
pub type BackwardFn = Box<dyn Fn(&Tensor, &Tensor, &[f64]) -> Vec<f64>>;

/// One source index pair with interpolation weights, used by bilinear resize.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64>, kept: usize },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Patchify { x: Var, patch: usize },
    Resize { x: Var, rows: Vec<Tap>, cols: Vec<Tap> },
    Custom { x: Var, backward: BackwardFn },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_vars: HashMap::new(), grad_enabled: true }
    }

    /// A tape that records values only; nothing on it ever requires a gradient.
    pub fn no_grad() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of distinct parameters recorded on this tape.
    pub fn param_count(&self) -> usize {
        self.param_vars.len()
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.param_vars.keys().copied()
    }

    /// A differentiable input (gradient is tracked when the tape allows it).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push_raw(value, rg, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, false, Op::Leaf)
    }

    /// Brings a parameter onto the tape. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let rg = self.grad_enabled && !p.frozen;
        let op = if rg { Op::Param } else { Op::Leaf };
        let v = self.push_raw(p.value.clone(), rg, op);
        self.param_vars.insert(id, v);
        v
    }

    fn push_raw(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let rg = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, rg, op)
    }

    // ----------------------------------------------------------------------
    // Elementwise

    /// `a + b`, where `b`'s shape must equal `a`'s shape or a trailing suffix
    /// of it (broadcast over the leading dimensions of `a`).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(format!("add: cannot broadcast {sb:?} onto {sa:?}")));
        }
        let av = self.value(a);
        let bv = self.value(b).data();
        let n = bv.len();
        let data = av.data().iter().enumerate().map(|(i, x)| x + bv[i % n]).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_values(a, b, |x, y| x - y);
        Ok(self.push(out, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_values(a, b, |x, y| x * y);
        Ok(self.push(out, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.map_value(a, |x| x * k);
        self.push(out, &[a], Op::Scale(a, k))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.map_value(a, gelu);
        self.push(out, &[a], Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map_value(a, |x| x.max(0.0));
        self.push(out, &[a], Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.map_value(a, f64::exp);
        self.push(out, &[a], Op::Exp(a))
    }

    /// Natural logarithm. Non-positive inputs are a numeric error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).data().iter().find(|x| !(**x > 0.0)) {
            return Err(Error::Numeric(format!("log of non-positive value {x}")));
        }
        let out = self.map_value(a, f64::ln);
        Ok(self.push(out, &[a], Op::Log(a)))
    }

    // ----------------------------------------------------------------------
    // Shape manipulation

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape.to_vec())?;
        Ok(self.push(out, &[a], Op::Reshape(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let out = Tensor::new([c, r], transpose_data(self.value(a).data(), r, c))?;
        Ok(self.push(out, &[a], Op::Transpose(a)))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if len == 0 || start + len > c {
            return Err(Error::shape(format!("slice_cols {start}..{} out of range for [{r}, {c}]", start + len)));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let out = Tensor::new([r, len], data)?;
        Ok(self.push(out, &[a], Op::SliceCols { x: a, start }))
    }

    /// Concatenates 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_cols of nothing"))?;
        let (rows, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::shape(format!(
                    "concat_cols: row mismatch {:?} vs {:?}",
                    self.shape(*first),
                    self.shape(p)
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new([rows, total], data)?;
        Ok(self.push(out, parts, Op::ConcatCols(parts.to_vec())))
    }

    /// Rearranges a `[C×H×W]` map into non-overlapping `p×p` patches:
    /// `[(H/p)·(W/p) × C·p·p]`, patches in row-major order, each patch vector
    /// ordered `(channel, dy, dx)`.
    pub fn patchify(&mut self, a: Var, patch: usize) -> Result<Var> {
        let (c, h, w) = self.value(a).dims3()?;
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::shape(format!(
                "patchify: spatial size {h}x{w} must be divisible by patch size {patch}"
            )));
        }
        let (ph, pw) = (h / patch, w / patch);
        let dim = c * patch * patch;
        let src = self.value(a).data();
        let mut data = vec![0.0; ph * pw * dim];
        for (dst, s) in patch_index(c, h, w, patch) {
            data[dst] = src[s];
        }
        let out = Tensor::new([ph * pw, dim], data)?;
        Ok(self.push(out, &[a], Op::Patchify { x: a, patch }))
    }

    /// Bilinear resize of a `[C×H×W]` map with half-pixel centres
    /// (`align_corners = false`).
    pub fn resize_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.value(a).dims3()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("resize_bilinear: zero output size"));
        }
        let rows = resize_taps(h, out_h);
        let cols = resize_taps(w, out_w);
        let src = self.value(a).data();
        let mut data = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for (y, ty) in rows.iter().enumerate() {
                for (x, tx) in cols.iter().enumerate() {
                    let v = ty.w0 * (tx.w0 * plane[ty.i0 * w + tx.i0] + tx.w1 * plane[ty.i0 * w + tx.i1])
                        + ty.w1 * (tx.w0 * plane[ty.i1 * w + tx.i0] + tx.w1 * plane[ty.i1 * w + tx.i1]);
                    data[(ch * out_h + y) * out_w + x] = v;
                }
            }
        }
        let out = Tensor::new([c, out_h, out_w], data)?;
        Ok(self.push(out, &[a], Op::Resize { x: a, rows, cols }))
    }

    // ----------------------------------------------------------------------
    // Linear algebra and reductions

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: [{m}, {k}] x [{k2}, {n}]"
            )));
        }
        let data = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new([m, n], data)?;
        Ok(self.push(out, &[a, b], Op::MatMul(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), &[a], Op::Mean(a))
    }

    /// Softmax over the last dimension, computed with max subtraction.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if !t.is_finite() {
            return Err(Error::Numeric("softmax input contains NaN or infinity".into()));
        }
        let d = *t.shape().last().unwrap_or(&1);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, &[a], Op::Softmax(a)))
    }

    /// Row-wise layer normalisation of `[N×C]` followed by a per-channel affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(format!(
                    "layer_norm {name} shape {:?} does not match channels of {:?}",
                    self.shape(v),
                    self.shape(x)
                )));
            }
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; n * c];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &xs[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mu) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let out = Tensor::new([n, c], out)?;
        Ok(self.push(out, &[x, gamma, beta], Op::LayerNorm { x, gamma, beta, xhat, inv_std }))
    }

    /// Mean cross-entropy of `[N×K]` logits against integer labels, skipping
    /// positions labelled `ignore_index`. With every position ignored the loss
    /// is exactly zero and so is its gradient.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], ignore_index: usize) -> Result<Var> {
        let (n, k) = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(Error::shape(format!(
                "cross_entropy: {} labels for logits of shape {:?}",
                labels.len(),
                self.shape(logits)
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k && l != ignore_index) {
            return Err(Error::Data(format!(
                "label {bad} outside [0, {k}) and not the ignore index {ignore_index}"
            )));
        }
        let src = self.value(logits).data();
        let mut probs = src.to_vec();
        let mut total = 0.0;
        let mut kept = 0usize;
        for (i, row) in probs.chunks_mut(k).enumerate() {
            let lse = log_sum_exp(row);
            if labels[i] != ignore_index {
                total += lse - row[labels[i]];
                kept += 1;
            }
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = if kept == 0 { 0.0 } else { total / kept as f64 };
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs, kept };
        Ok(self.push(Tensor::scalar(loss), &[logits], op))
    }

    /// Escape hatch for elementwise-shaped operations defined outside this
    /// module. `backward` receives the input, the output and the upstream
    /// gradient and must return the input gradient.
    pub fn custom_unary(
        &mut self,
        a: Var,
        forward: impl Fn(&Tensor) -> Tensor,
        backward: BackwardFn,
    ) -> Var {
        let out = forward(self.value(a));
        self.push(out, &[a], Op::Custom { x: a, backward })
    }

    // ----------------------------------------------------------------------
    // Backward

    /// Reverse pass from a scalar `loss`. The returned [`Gradients`] holds
    /// d(loss)/d(node) for every gradient-requiring node reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .param_vars
            .iter()
            .filter(|(_, v)| v.0 <= loss.0 && grads[v.0].is_some())
            .map(|(&id, &v)| (id, v))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&delta) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                if self.nodes[b.0].requires_grad {
                    let n = self.nodes[b.0].value.numel();
                    let mut gb = vec![0.0; n];
                    for (i, x) in g.iter().enumerate() {
                        gb[i % n] += x;
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.accumulate(grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                self.accumulate(grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.iter().map(|x| x * k).collect()),
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().expect("2-D");
                let n = self.nodes[b.0].value.shape()[1];
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, matmul_nt(g, val(*b), m, n, k));
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, matmul_tn(val(*a), g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.nodes[a.0].value.dims2().expect("2-D");
                self.accumulate(grads, *a, transpose_data(g, c, r));
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::Gelu(a) => {
                self.accumulate(grads, *a, val(*a).iter().zip(g).map(|(x, d)| gelu_grad(*x) * d).collect())
            }
            Op::Relu(a) => self.accumulate(
                grads,
                *a,
                val(*a).iter().zip(g).map(|(x, d)| if *x > 0.0 { *d } else { 0.0 }).collect(),
            ),
            Op::Exp(a) => {
                self.accumulate(grads, *a, node.value.data().iter().zip(g).map(|(y, d)| y * d).collect())
            }
            Op::Log(a) => self.accumulate(grads, *a, val(*a).iter().zip(g).map(|(x, d)| d / x).collect()),
            Op::Softmax(a) => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), out) in y.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let c = self.nodes[gamma.0].value.numel();
                let gam = val(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; g.len()];
                for (i, inv) in inv_std.iter().enumerate() {
                    let gr = &g[i * c..(i + 1) * c];
                    let hr = &xhat[i * c..(i + 1) * c];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..c {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * gam[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    let cf = c as f64;
                    for j in 0..c {
                        let dh = gr[j] * gam[j];
                        dx[i * c + j] = inv / cf * (cf * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::CrossEntropy { logits, labels, probs, kept } => {
                let k = self.nodes[logits.0].value.shape()[1];
                let mut dl = vec![0.0; probs.len()];
                if *kept > 0 {
                    let scale = g[0] / *kept as f64;
                    for (i, &label) in labels.iter().enumerate() {
                        if label >= k {
                            continue;
                        }
                        for j in 0..k {
                            let target = if j == label { 1.0 } else { 0.0 };
                            dl[i * k + j] = scale * (probs[i * k + j] - target);
                        }
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.nodes[x.0].value.dims2().expect("2-D");
                let len = node.value.shape()[1];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    if self.nodes[p.0].requires_grad {
                        let mut dp = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            dp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, *p, dp);
                    }
                    offset += w;
                }
            }
            Op::Patchify { x, patch } => {
                let (c, h, w) = self.nodes[x.0].value.dims3().expect("3-D");
                let mut dx = vec![0.0; c * h * w];
                for (dst, s) in patch_index(c, h, w, *patch) {
                    dx[s] = g[dst];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Resize { x, rows, cols } => {
                let (c, h, w) = self.nodes[x.0].value.dims3().expect("3-D");
                let (oh, ow) = (rows.len(), cols.len());
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
                    for (y, ty) in rows.iter().enumerate() {
                        for (xx, tx) in cols.iter().enumerate() {
                            let d = g[(ch * oh + y) * ow + xx];
                            plane[ty.i0 * w + tx.i0] += ty.w0 * tx.w0 * d;
                            plane[ty.i0 * w + tx.i1] += ty.w0 * tx.w1 * d;
                            plane[ty.i1 * w + tx.i0] += ty.w1 * tx.w0 * d;
                            plane[ty.i1 * w + tx.i1] += ty.w1 * tx.w1 * d;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Custom { x, backward } => {
                let dx = backward(&self.nodes[x.0].value, &node.value, g);
                self.accumulate(grads, *x, dx);
            }
        }
    }

    // ----------------------------------------------------------------------

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn map_value(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }
}

/// Gradients produced by one [`Tape::backward`] call.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` is not on a
    /// gradient-carrying path to the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into the store's `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, v) in &self.params {
            if let Some(g) = self.get(v) {
                store.accumulate_grad(id, g);
            }
        }
    }
}

// --------------------------------------------------------------------------
// Kernels

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn transpose_data(src: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}

/// `A[m×k] · B[k×n]`.
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `G[m×n] · Bᵀ` where `B` is `[k×n]`; result `[m×k]`.
fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for t in 0..k {
            let brow = &b[t * n..(t + 1) * n];
            out[i * k + t] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `Aᵀ · G` where `A` is `[m×k]` and `G` is `[m×n]`; result `[k×n]`.
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[t * n..(t + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

/// `(destination, source)` flat index pairs for [`Tape::patchify`].
fn patch_index(c: usize, h: usize, w: usize, p: usize) -> impl Iterator<Item = (usize, usize)> {
    let pw = w / p;
    let dim = c * p * p;
    (0..h).flat_map(move |y| {
        (0..w).flat_map(move |x| {
            (0..c).map(move |ch| {
                let token = (y / p) * pw + x / p;
                let feat = (ch * p + y % p) * p + x % p;
                (token * dim + feat, (ch * h + y) * w + x)
            })
        })
    })
}

fn resize_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let w1 = src - i0 as f64;
            Tap { i0, i1, w0: 1.0 - w1, w1 }
        })
        .collect()
}
