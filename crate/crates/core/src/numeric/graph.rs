//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node in creation order, so the
//! reverse of that order is a valid topological order for the backward sweep.

use std::collections::BTreeMap;

use super::params::ParameterStore;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Relu(Var),
    Tanh(Var),
    Abs(Var),
    Softmax {
        x: Var,
        temperature: f64,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    StraightThrough(Var),
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Result of [`Graph::cross_entropy`].
#[derive(Debug, Clone, Copy)]
pub struct CrossEntropyOut {
    pub loss: Var,
    /// Number of positions that contributed to the mean.
    pub counted: usize,
}

impl CrossEntropyOut {
    /// Set when every position was ignored and the loss was defined as 0.
    pub fn all_ignored(&self) -> bool {
        self.counted == 0
    }
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    track_params: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Graph whose parameter leaves receive gradients.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            track_params: true,
        }
    }

    /// Graph for inference: parameters enter as constants, nothing is
    /// differentiable and `backward` yields no parameter gradients.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            track_params: false,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable free leaf (used by gradient checks).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a named parameter; repeated lookups share one node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.push(t, Op::Leaf, self.track_params);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Copy of `x`'s value with no gradient path (stop-gradient).
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn check_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Shape(format!("{op} expects a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::dim("matmul", va.shape(), vb.shape()));
        }
        let out = va.matmul(vb)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b)?;
        Ok(self.binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b)?;
        Ok(self.binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b)?;
        Ok(self.binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// `a[m×n] + row[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.check_matrix("add_row", a)?;
        if self.value(row).numel() != n {
            return Err(Error::dim("add_row", self.shape(a), self.shape(row)));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..m {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    /// `a[m×n] + col[m]` broadcast over columns.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, _) = self.check_matrix("add_col", a)?;
        if self.value(col).numel() != m {
            return Err(Error::dim("add_col", self.shape(a), self.shape(col)));
        }
        let mut out = self.value(a).clone();
        let c = self.value(col).data().to_vec();
        for (i, b) in c.iter().enumerate() {
            for o in out.row_mut(i) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(col);
        Ok(self.push(out, Op::AddCol(a, col), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * sigmoid(v));
        let ng = self.ng(a);
        self.push(out, Op::Silu(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let ng = self.ng(a);
        self.push(out, Op::Abs(a), ng)
    }

    /// Row-wise softmax of `a / temperature` over the trailing dimension.
    pub fn softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        let out = softmax_rows(self.value(a), temperature)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Softmax { x: a, temperature }, ng))
    }

    /// Layer normalisation over the trailing dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (m, n) = self.check_matrix("layer_norm", x)?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let vx = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = vx.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Cross-correlation of `x[C_in×T]` with `w[C_out×C_in×k]`, zero padding
    /// `pad` on both ends, output `[C_out×T']` with `T' = (T+2·pad−k)/stride+1`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Parameter("conv1d stride must be positive".into()));
        }
        let (cin, t) = self.check_matrix("conv1d", x)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != cin {
            return Err(Error::dim("conv1d", self.shape(x), &ws));
        }
        let (cout, k) = (ws[0], ws[2]);
        let tp = t + 2 * pad;
        if tp < k {
            return Err(Error::dim("conv1d", self.shape(x), &ws));
        }
        let tout = (tp - k) / stride + 1;
        let xv = self.value(x).data();
        let rows = cin * k;
        let mut cols = vec![0.0; rows * tout];
        for c in 0..cin {
            for i in 0..k {
                let r = c * k + i;
                for o in 0..tout {
                    let src = o * stride + i;
                    if src >= pad && src - pad < t {
                        cols[r * tout + o] = xv[c * t + src - pad];
                    }
                }
            }
        }
        let mut out = vec![0.0; cout * tout];
        gemm(
            cout,
            rows,
            tout,
            self.value(w).data(),
            false,
            &cols,
            false,
            &mut out,
            0.0,
        );
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(
            Tensor::from_parts(vec![cout, tout], out),
            Op::Conv1d {
                x,
                w,
                stride,
                pad,
                cols,
            },
            ng,
        ))
    }

    /// Nearest-neighbour upsampling along the trailing (time) dimension.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (c, t) = self.check_matrix("upsample", x)?;
        if factor == 0 {
            return Err(Error::Parameter("upsample factor must be positive".into()));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * t * factor];
        for ci in 0..c {
            for ti in 0..t * factor {
                out[ci * t * factor + ti] = xv[ci * t + ti / factor];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_parts(vec![c, t * factor], out),
            Op::Upsample { x, factor },
            ng,
        ))
    }

    /// Rows of `table[V×D]` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.check_matrix("gather", table)?;
        if ids.is_empty() {
            return Err(Error::Shape("gather needs at least one id".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Shape(format!("gather id {bad} out of range {v}")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let (m, _) = self.check_matrix("concat_cols", first)?;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.check_matrix("concat_cols", p)?;
            if pm != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            total += pn;
        }
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            let pn = pv.cols();
            for i in 0..m {
                out[i * total + off..i * total + off + pn].copy_from_slice(pv.row(i));
            }
            off += pn;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::from_parts(vec![m, total], out),
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let (_, n) = self.check_matrix("concat_rows", first)?;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.check_matrix("concat_rows", p)?;
            if pn != n {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
            m += pm;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.check_matrix("slice_cols", x)?;
        if len == 0 || start + len > n {
            return Err(Error::Shape(format!("slice_cols {start}..{} out of {n}", start + len)));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(vec![m, len], out), Op::SliceCols { x, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(out, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / v.numel() as f64);
        let ng = self.ng(x);
        self.push(out, Op::Mean(x), ng)
    }

    /// Mean negative log-softmax over rows whose target is `Some`. Rows with
    /// `None` targets are ignored; if all are ignored the loss is 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<CrossEntropyOut> {
        let (b, v) = self.check_matrix("cross_entropy", logits)?;
        if targets.len() != b {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::Shape(format!("target {bad} outside {v} classes")));
        }
        let probs = softmax_rows(self.value(logits), 1.0)?.into_data();
        let mut total = 0.0;
        let mut count = 0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                // log p computed from logits directly for accuracy near p=1
                let row = self.value(logits).row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = self.ng(logits) && count > 0;
        let var = self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            ng,
        );
        Ok(CrossEntropyOut {
            loss: var,
            counted: count,
        })
    }

    /// Batched scaled dot-product attention without masking. `q` stacks
    /// `batch` blocks of equal row count, as do `k` and `v`; each query block
    /// attends only to its own key block. Columns are split evenly into `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let (qr, d) = self.check_matrix("attention", q)?;
        let (kr, kd) = self.check_matrix("attention", k)?;
        let (vr, vd) = self.check_matrix("attention", v)?;
        if kd != d || vd != d || vr != kr {
            return Err(Error::dim("attention", self.shape(q), self.shape(k)));
        }
        if batch == 0 || heads == 0 || qr % batch != 0 || kr % batch != 0 || d % heads != 0 {
            return Err(Error::Shape(format!(
                "attention: {qr} query rows, {kr} key rows and width {d} do not split into {batch} blocks of {heads} heads"
            )));
        }
        let (nq, nk, dh) = (qr / batch, kr / batch, d / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; qr * d];
        let mut probs = vec![0.0; batch * heads * nq * nk];
        let mut qb = vec![0.0; nq * dh];
        let mut kb = vec![0.0; nk * dh];
        let mut vb = vec![0.0; nk * dh];
        let mut ob = vec![0.0; nq * dh];
        for b in 0..batch {
            for h in 0..heads {
                extract(qv, d, b * nq, nq, h * dh, dh, &mut qb);
                extract(kv, d, b * nk, nk, h * dh, dh, &mut kb);
                extract(vv, d, b * nk, nk, h * dh, dh, &mut vb);
                let off = (b * heads + h) * nq * nk;
                let p = &mut probs[off..off + nq * nk];
                gemm(nq, dh, nk, &qb, false, &kb, true, p, 0.0);
                for row in p.chunks_mut(nk) {
                    row.iter_mut().for_each(|x| *x *= scale);
                    softmax_in_place(row, 1.0);
                }
                gemm(nq, nk, dh, p, false, &vb, false, &mut ob, 0.0);
                scatter(&mut out, d, b * nq, nq, h * dh, dh, &ob);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            Tensor::from_parts(vec![qr, d], out),
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Forward value `replacement`, backward identity into `x`
    /// (straight-through estimator).
    pub fn straight_through(&mut self, x: Var, replacement: Tensor) -> Result<Var> {
        if replacement.shape() != self.shape(x) {
            return Err(Error::dim("straight_through", self.shape(x), replacement.shape()));
        }
        let ng = self.ng(x);
        Ok(self.push(replacement, Op::StraightThrough(x), ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.ng(*a) {
                    // dA = G · Bᵀ
                    self.acc_with(grads, *a, |da| gemm(m, n, k, gd, false, vb.data(), true, da, 1.0));
                }
                if self.ng(*b) {
                    // dB = Aᵀ · G
                    self.acc_with(grads, *b, |db| gemm(k, m, n, va.data(), true, gd, false, db, 1.0));
                }
            }
            Op::Transpose(a) => {
                self.acc(grads, *a, g.transpose().expect("matrix"));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                if self.ng(*a) {
                    let d = gd.iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
                }
                if self.ng(*b) {
                    let d = gd.iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *b, Tensor::from_parts(g.shape().to_vec(), d));
                }
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                let n = g.cols();
                self.acc_with(grads, *row, |dr| {
                    for chunk in gd.chunks(n) {
                        for (d, x) in dr.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                });
            }
            Op::AddCol(a, col) => {
                self.acc(grads, *a, g.clone());
                let n = g.cols();
                self.acc_with(grads, *col, |dc| {
                    for (d, chunk) in dc.iter_mut().zip(gd.chunks(n)) {
                        *d += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|v| v * s)),
            Op::Silu(a) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| {
                        let s = sigmoid(xv);
                        gv * (s + xv * s * (1.0 - s))
                    })
                    .collect();
                self.acc(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.acc(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect();
                self.acc(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(gv, &xv)| gv * sign(xv)).collect();
                self.acc(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Softmax { x, temperature } => {
                let y = &node.value;
                let n = y.cols();
                let mut d = vec![0.0; y.numel()];
                for (r, (yr, gr)) in y.data().chunks(n).zip(gd.chunks(n)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[r * n + j] = yr[j] * (gr[j] - dot) / temperature;
                    }
                }
                self.acc(grads, *x, Tensor::from_parts(y.shape().to_vec(), d));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = g.cols();
                let m = g.rows();
                let gam = self.value(*gamma).data();
                self.acc_with(grads, *gamma, |dg| {
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += gd[i * n + j] * xhat[i * n + j];
                        }
                    }
                });
                self.acc_with(grads, *beta, |db| {
                    for chunk in gd.chunks(n) {
                        for (d, v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                });
                if self.ng(*x) {
                    let mut dx = vec![0.0; m * n];
                    let nf = n as f64;
                    for i in 0..m {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let dh = gd[i * n + j] * gam[j];
                            s1 += dh;
                            s2 += dh * xhat[i * n + j];
                        }
                        for j in 0..n {
                            let dh = gd[i * n + j] * gam[j];
                            dx[i * n + j] = inv_std[i] / nf * (nf * dh - s1 - xhat[i * n + j] * s2);
                        }
                    }
                    self.acc(grads, *x, Tensor::from_parts(vec![m, n], dx));
                }
            }
            Op::Conv1d {
                x,
                w,
                stride,
                pad,
                cols,
            } => {
                let ws = self.shape(*w);
                let (cout, cin, k) = (ws[0], ws[1], ws[2]);
                let tout = g.cols();
                let rows = cin * k;
                if self.ng(*w) {
                    self.acc_with(grads, *w, |dw| gemm(cout, tout, rows, gd, false, cols, true, dw, 1.0));
                }
                if self.ng(*x) {
                    let mut dcols = vec![0.0; rows * tout];
                    gemm(
                        rows,
                        cout,
                        tout,
                        self.value(*w).data(),
                        true,
                        gd,
                        false,
                        &mut dcols,
                        0.0,
                    );
                    let t = self.shape(*x)[1];
                    let (stride, pad) = (*stride, *pad);
                    self.acc_with(grads, *x, |dx| {
                        for c in 0..cin {
                            for i in 0..k {
                                let r = c * k + i;
                                for o in 0..tout {
                                    let src = o * stride + i;
                                    if src >= pad && src - pad < t {
                                        dx[c * t + src - pad] += dcols[r * tout + o];
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::Upsample { x, factor } => {
                let t = self.shape(*x)[1];
                let tf = g.cols();
                self.acc_with(grads, *x, |dx| {
                    for (ci, chunk) in gd.chunks(tf).enumerate() {
                        for (ti, v) in chunk.iter().enumerate() {
                            dx[ci * t + ti / factor] += v;
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = g.cols();
                self.acc_with(grads, *table, |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += gd[r * d + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let m = g.rows();
                let total = g.cols();
                let mut off = 0;
                for &p in parts {
                    let pn = self.shape(p)[1];
                    self.acc_with(grads, p, |dp| {
                        for i in 0..m {
                            for j in 0..pn {
                                dp[i * pn + j] += gd[i * total + off + j];
                            }
                        }
                    });
                    off += pn;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.acc_with(grads, p, |dp| {
                        for (d, v) in dp.iter_mut().zip(&gd[off..off + len]) {
                            *d += v;
                        }
                    });
                    off += len;
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.shape(*x)[1];
                let len = g.cols();
                let start = *start;
                self.acc_with(grads, *x, |dx| {
                    for (i, chunk) in gd.chunks(len).enumerate() {
                        for (j, v) in chunk.iter().enumerate() {
                            dx[i * n + start + j] += v;
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.acc(grads, *x, Tensor::from_parts(shape, gd.to_vec()));
            }
            Op::Sum(x) => {
                let s = gd[0];
                self.acc_with(grads, *x, |dx| dx.iter_mut().for_each(|d| *d += s));
            }
            Op::Mean(x) => {
                let s = gd[0] / self.value(*x).numel() as f64;
                self.acc_with(grads, *x, |dx| dx.iter_mut().for_each(|d| *d += s));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let v = self.shape(*logits)[1];
                let s = gd[0] / *count as f64;
                self.acc_with(grads, *logits, |dl| {
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for j in 0..v {
                                dl[i * v + j] += s * probs[i * v + j];
                            }
                            dl[i * v + t] -= s;
                        }
                    }
                });
            }
            Op::StraightThrough(x) => self.acc(grads, *x, g.clone()),
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            } => {
                let (batch, heads) = (*batch, *heads);
                let (qr, d) = (self.shape(*q)[0], self.shape(*q)[1]);
                let kr = self.shape(*k)[0];
                let (nq, nk, dh) = (qr / batch, kr / batch, d / heads);
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![0.0; qr * d];
                let mut dk = vec![0.0; kr * d];
                let mut dv = vec![0.0; kr * d];
                let mut qb = vec![0.0; nq * dh];
                let mut kb = vec![0.0; nk * dh];
                let mut vb = vec![0.0; nk * dh];
                let mut gb = vec![0.0; nq * dh];
                let mut dp = vec![0.0; nq * nk];
                let mut tmp_q = vec![0.0; nq * dh];
                let mut tmp_k = vec![0.0; nk * dh];
                for b in 0..batch {
                    for h in 0..heads {
                        extract(qv, d, b * nq, nq, h * dh, dh, &mut qb);
                        extract(kv, d, b * nk, nk, h * dh, dh, &mut kb);
                        extract(vv, d, b * nk, nk, h * dh, dh, &mut vb);
                        extract(gd, d, b * nq, nq, h * dh, dh, &mut gb);
                        let off = (b * heads + h) * nq * nk;
                        let p = &probs[off..off + nq * nk];
                        // dV = Pᵀ·dO
                        gemm(nk, nq, dh, p, true, &gb, false, &mut tmp_k, 0.0);
                        scatter(&mut dv, d, b * nk, nk, h * dh, dh, &tmp_k);
                        // dP = dO·Vᵀ, then softmax backward into dS (stored in dp)
                        gemm(nq, dh, nk, &gb, false, &vb, true, &mut dp, 0.0);
                        for (dr, pr) in dp.chunks_mut(nk).zip(p.chunks(nk)) {
                            let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                            for (x, &pv) in dr.iter_mut().zip(pr) {
                                *x = pv * (*x - dot) * scale;
                            }
                        }
                        gemm(nq, nk, dh, &dp, false, &kb, false, &mut tmp_q, 0.0);
                        scatter(&mut dq, d, b * nq, nq, h * dh, dh, &tmp_q);
                        gemm(nk, nq, dh, &dp, true, &qb, false, &mut tmp_k, 0.0);
                        scatter(&mut dk, d, b * nk, nk, h * dh, dh, &tmp_k);
                    }
                }
                self.acc(grads, *q, Tensor::from_parts(vec![qr, d], dq));
                self.acc(grads, *k, Tensor::from_parts(vec![kr, d], dk));
                self.acc(grads, *v, Tensor::from_parts(vec![kr, d], dv));
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` if `v` is unreachable or constant.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients keyed by parameter name. Parameters that were looked up but
    /// did not influence the loss get zero tensors.
    pub fn params(&self, store: &ParameterStore) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(name).expect("known").shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Copies the `rows×cols` block at (`r0`, `c0`) of a row-major matrix with
/// `ld` columns into `out`.
fn extract(src: &[f64], ld: usize, r0: usize, rows: usize, c0: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let s = (r0 + r) * ld + c0;
        out[r * cols..(r + 1) * cols].copy_from_slice(&src[s..s + cols]);
    }
}

/// Adds `block` into the `rows×cols` block at (`r0`, `c0`) of `dst`.
fn scatter(dst: &mut [f64], ld: usize, r0: usize, rows: usize, c0: usize, cols: usize, block: &[f64]) {
    for r in 0..rows {
        let s = (r0 + r) * ld + c0;
        for (d, b) in dst[s..s + cols].iter_mut().zip(&block[r * cols..(r + 1) * cols]) {
            *d += b;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Row-wise softmax of `logits / temperature` over the trailing dimension.
/// Entries equal to `-inf` receive probability 0.
pub fn softmax_rows(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(Error::Parameter(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    let n = logits.cols();
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(n) {
        softmax_in_place(row, temperature);
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

pub(crate) fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().map(|v| v / temperature).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v / temperature - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
