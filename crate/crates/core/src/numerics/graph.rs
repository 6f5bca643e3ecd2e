//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its variables in
//! creation order. [`Graph::backward`] walks that record in reverse and
//! accumulates gradients into every variable that requires them. All
//! reductions run in ascending index order, so two identical runs produce
//! bitwise-identical gradients.

use super::tensor::{kernels, Tensor, MASKED_LOGIT};
use crate::error::{Error, Result};

const RMS_EPS: f64 = 1e-6;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a packed batch of independent causal sequences.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub num_heads: usize,
    pub num_kv_heads: usize,
    /// `(start_row, len)` for each sequence; segments tile all rows in order.
    pub segments: Vec<(usize, usize)>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    SumLast(Var),
    SumAll(Var),
    MeanRows(Var),
    Softmax(Var),
    LogSoftmax(Var),
    MaskCols(Var, Vec<bool>),
    RmsNorm(Var, Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    Reshape(Var),
    Attention { q: Var, k: Var, v: Var, layout: AttentionLayout, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Operation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape that rejects any NaN/Inf produced by an op (masked logits excepted).
    pub fn with_finite_checks() -> Self {
        Self { nodes: Vec::new(), check_finite: true }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Gradient-free leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !matches!(op, Op::MaskCols(..) | Op::LogSoftmax(_)) {
            value.check_finite(&format!("node {}", self.nodes.len()))?;
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// `[m,n] x [n,p] -> [m,p]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `x[m,n] · w[p,n]^T -> [m,p]`, the layout used for all weight matrices.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("linear input")?;
        let (p, n2) = self.value(w).dims2("linear weight")?;
        if n != n2 {
            return Err(Error::shape(format!(
                "linear: input {:?} against weight {:?}",
                self.value(x).shape(),
                self.value(w).shape()
            )));
        }
        let mut out = vec![0.0; m * p];
        kernels::matmul_bt(self.value(x).data(), self.value(w).data(), &mut out, m, n, p);
        self.push(Tensor::new(vec![m, p], out)?, Op::Linear(x, w), &[x, w])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a), &[a])
    }

    /// Scales slice `i` along the last dimension by `c[i]`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let out = self.col_op(a, c, "mul_col", |x, s| x * s)?;
        self.push(out, Op::MulCol(a, c), &[a, c])
    }

    /// Divides slice `i` along the last dimension by `d[i]`.
    pub fn div_col(&mut self, a: Var, d: Var) -> Result<Var> {
        let out = self.col_op(a, d, "div_col", |x, s| x / s)?;
        self.push(out, Op::DivCol(a, d), &[a, d])
    }

    fn col_op(&self, a: Var, c: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vc) = (self.value(a), self.value(c));
        if va.outer() != vc.len() {
            return Err(Error::shape(format!(
                "{what}: {:?} needs {} scales, got {:?}",
                va.shape(),
                va.outer(),
                vc.shape()
            )));
        }
        let d = va.last_dim();
        let data = va.data().iter().enumerate().map(|(i, &x)| f(x, vc.data()[i / d])).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    /// Sum over the last dimension; result has one entry per slice.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let data = (0..va.outer()).map(|i| va.row(i).iter().sum()).collect();
        let out = Tensor::vector(data);
        self.push(out, Op::SumLast(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Column means of a matrix, rows reduced in ascending order.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("mean_rows")?;
        let va = self.value(a);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, x) in out.iter_mut().zip(va.row(i)) {
                *o += x;
            }
        }
        let inv = 1.0 / m as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(Tensor::vector(out), Op::MeanRows(a), &[a])
    }

    /// Max-stabilised softmax over the last dimension. Entries equal to
    /// [`MASKED_LOGIT`] receive probability exactly zero.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = softmax_lastdim(self.value(a))?;
        self.push(out, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let d = va.last_dim();
        let mut data = Vec::with_capacity(va.len());
        for i in 0..va.outer() {
            let row = va.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(Error::DegenerateSoftmax { row: i });
            }
            let s: f64 = row.iter().map(|x| (x - m).exp()).sum();
            let lse = m + s.ln();
            data.extend(row.iter().map(|x| x - lse));
        }
        debug_assert_eq!(data.len(), va.outer() * d);
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, Op::LogSoftmax(a), &[a])
    }

    /// Replaces columns whose `keep` flag is false by the masked sentinel.
    pub fn mask_cols(&mut self, a: Var, keep: Vec<bool>) -> Result<Var> {
        let va = self.value(a);
        let d = va.last_dim();
        if keep.len() != d {
            return Err(Error::shape(format!("mask_cols: {} flags for last dim {d}", keep.len())));
        }
        let data = va.data().iter().enumerate().map(|(i, &x)| if keep[i % d] { x } else { MASKED_LOGIT }).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, Op::MaskCols(a, keep), &[a])
    }

    /// Root-mean-square normalisation over the last dimension with a learned gain.
    pub fn rms_norm(&mut self, x: Var, w: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let d = vx.last_dim();
        if vw.len() != d {
            return Err(Error::shape(format!("rms_norm: gain {:?} against input {:?}", vw.shape(), vx.shape())));
        }
        let mut data = Vec::with_capacity(vx.len());
        for i in 0..vx.outer() {
            let row = vx.row(i);
            let r = inv_rms(row);
            data.extend(row.iter().zip(vw.data()).map(|(a, g)| a * r * g));
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(out, Op::RmsNorm(x, w), &[x, w])
    }

    /// Rows of `table[V,D]` selected by `idx`, giving `[idx.len(), D]`.
    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Result<Var> {
        let vt = self.value(table);
        let (v, d) = vt.dims2("gather_rows")?;
        if idx.is_empty() {
            return Err(Error::shape("gather_rows: empty index list"));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for (pos, &r) in idx.iter().enumerate() {
            if r >= v {
                return Err(Error::input(format!(
                    "gather_rows: index {r} at position {pos} out of range for {v} rows"
                )));
            }
            data.extend_from_slice(vt.row(r));
        }
        let out = Tensor::new(vec![idx.len(), d], data)?;
        self.push(out, Op::GatherRows(table, idx), &[table])
    }

    /// Adds row `r` of `src[k,D]` into row `idx[r]` of a fresh `[rows,D]` zero matrix.
    pub fn scatter_rows(&mut self, src: Var, idx: Vec<usize>, rows: usize) -> Result<Var> {
        let vs = self.value(src);
        let (k, d) = vs.dims2("scatter_rows")?;
        if idx.len() != k || idx.iter().any(|&r| r >= rows) {
            return Err(Error::shape(format!(
                "scatter_rows: {k} source rows, {} targets, {rows} output rows",
                idx.len()
            )));
        }
        let mut data = vec![0.0; rows * d];
        for (r, &t) in idx.iter().enumerate() {
            for (o, x) in data[t * d..(t + 1) * d].iter_mut().zip(vs.row(r)) {
                *o += x;
            }
        }
        let out = Tensor::new(vec![rows, d], data)?;
        self.push(out, Op::ScatterRows(src, idx), &[src])
    }

    /// Elements at the given flat indices, as a vector.
    pub fn pick(&mut self, src: Var, idx: Vec<usize>) -> Result<Var> {
        let vs = self.value(src);
        if idx.is_empty() || idx.iter().any(|&i| i >= vs.len()) {
            return Err(Error::shape(format!("pick: {} indices into {:?}", idx.len(), vs.shape())));
        }
        let data = idx.iter().map(|&i| vs.data()[i]).collect();
        self.push(Tensor::vector(data), Op::Pick(src, idx), &[src])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(out, Op::Reshape(a), &[a])
    }

    /// Causal grouped-query attention over packed sequences.
    ///
    /// `q` is `[T, heads*dh]`; `k` and `v` are `[T, kv_heads*dh]`. Query head
    /// `h` reads key/value head `h / (heads / kv_heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (t, qd) = self.value(q).dims2("attention q")?;
        let (tk, kd) = self.value(k).dims2("attention k")?;
        if self.value(v).shape() != [tk, kd] || tk != t {
            return Err(Error::shape("attention: q/k/v row counts or k/v shapes differ"));
        }
        let (nh, nkv) = (layout.num_heads, layout.num_kv_heads);
        if nh == 0 || nkv == 0 || nh % nkv != 0 || qd % nh != 0 || kd != (qd / nh) * nkv {
            return Err(Error::shape(format!(
                "attention: {nh} heads / {nkv} kv heads incompatible with widths {qd}, {kd}"
            )));
        }
        let mut covered = 0;
        for &(s, l) in &layout.segments {
            if s != covered || l == 0 {
                return Err(Error::shape("attention: segments must tile the rows in order"));
            }
            covered += l;
        }
        if covered != t {
            return Err(Error::shape(format!("attention: segments cover {covered} of {t} rows")));
        }
        let dh = qd / nh;
        let group = nh / nkv;
        let scale = 1.0 / (dh as f64).sqrt();
        let (vq, vk, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());

        let mut out = vec![0.0; t * qd];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for &(s, l) in &layout.segments {
            for h in 0..nh {
                let kvh = h / group;
                for i in 0..l {
                    let qi = &vq[(s + i) * qd + h * dh..][..dh];
                    scores.clear();
                    for j in 0..=i {
                        let kj = &vk[(s + j) * kd + kvh * dh..][..dh];
                        scores.push(kernels::dot(qi, kj) * scale);
                    }
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for sc in scores.iter_mut() {
                        *sc = (*sc - m).exp();
                        z += *sc;
                    }
                    let orow = &mut out[(s + i) * qd + h * dh..][..dh];
                    for (j, sc) in scores.iter_mut().enumerate() {
                        *sc /= z;
                        let vj = &vv[(s + j) * kd + kvh * dh..][..dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += *sc * x;
                        }
                    }
                    probs.extend_from_slice(&scores);
                }
            }
        }
        let out = Tensor::new(vec![t, qd], out)?;
        self.push(out, Op::Attention { q, k, v, layout, probs }, &[q, k, v])
    }

    /// Gradients of the scalar `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!("backward needs a scalar loss, got {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, n) = va.dims2("matmul")?;
                let p = vb.shape()[1];
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * n];
                    kernels::matmul_bt(gd, vb.data(), &mut da, m, p, n);
                    acc(*a, Tensor::new(vec![m, n], da)?);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; n * p];
                    kernels::matmul_at(va.data(), gd, &mut db, m, n, p);
                    acc(*b, Tensor::new(vec![n, p], db)?);
                }
            }
            Op::Linear(x, w) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (m, n) = vx.dims2("linear")?;
                let p = vw.shape()[0];
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; m * n];
                    kernels::matmul(gd, vw.data(), &mut dx, m, p, n);
                    acc(*x, Tensor::new(vec![m, n], dx)?);
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![0.0; p * n];
                    kernels::matmul_at(gd, vx.data(), &mut dw, m, p, n);
                    acc(*w, Tensor::new(vec![p, n], dw)?);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, zip_map(g, vb, |gv, y| gv * y));
                acc(*b, zip_map(g, va, |gv, x| gv * x));
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c)),
            Op::Silu(a) => {
                let va = self.value(*a);
                acc(
                    *a,
                    zip_map(g, va, |gv, x| {
                        let s = sigmoid(x);
                        gv * (s + x * s * (1.0 - s))
                    }),
                );
            }
            Op::MulCol(a, c) => {
                let (va, vc) = (self.value(*a), self.value(*c));
                let d = va.last_dim();
                let da = gd.iter().enumerate().map(|(i, gv)| gv * vc.data()[i / d]).collect();
                acc(*a, Tensor::new(va.shape().to_vec(), da)?);
                if self.requires_grad(*c) {
                    let dc = (0..va.outer()).map(|i| kernels::dot(&gd[i * d..(i + 1) * d], va.row(i))).collect();
                    acc(*c, Tensor::new(vc.shape().to_vec(), dc)?);
                }
            }
            Op::DivCol(a, dv) => {
                let (va, vd) = (self.value(*a), self.value(*dv));
                let d = va.last_dim();
                let da = gd.iter().enumerate().map(|(i, gv)| gv / vd.data()[i / d]).collect();
                acc(*a, Tensor::new(va.shape().to_vec(), da)?);
                if self.requires_grad(*dv) {
                    let dd = (0..va.outer())
                        .map(|i| {
                            let den = vd.data()[i];
                            -kernels::dot(&gd[i * d..(i + 1) * d], va.row(i)) / (den * den)
                        })
                        .collect();
                    acc(*dv, Tensor::new(vd.shape().to_vec(), dd)?);
                }
            }
            Op::SumLast(a) => {
                let va = self.value(*a);
                let d = va.last_dim();
                let da = (0..va.len()).map(|i| gd[i / d]).collect();
                acc(*a, Tensor::new(va.shape().to_vec(), da)?);
            }
            Op::SumAll(a) => {
                let va = self.value(*a);
                acc(*a, Tensor::full(va.shape(), gd[0]));
            }
            Op::MeanRows(a) => {
                let va = self.value(*a);
                let (m, n) = va.dims2("mean_rows")?;
                let inv = 1.0 / m as f64;
                let da = (0..m * n).map(|i| gd[i % n] * inv).collect();
                acc(*a, Tensor::new(vec![m, n], da)?);
            }
            Op::Softmax(a) => {
                let p = &node.value;
                let d = p.last_dim();
                let mut da = Vec::with_capacity(p.len());
                for i in 0..p.outer() {
                    let (pr, gr) = (p.row(i), &gd[i * d..(i + 1) * d]);
                    let c = kernels::dot(pr, gr);
                    da.extend(pr.iter().zip(gr).map(|(pv, gv)| pv * (gv - c)));
                }
                acc(*a, Tensor::new(p.shape().to_vec(), da)?);
            }
            Op::LogSoftmax(a) => {
                let lp = &node.value;
                let d = lp.last_dim();
                let mut da = Vec::with_capacity(lp.len());
                for i in 0..lp.outer() {
                    let (lr, gr) = (lp.row(i), &gd[i * d..(i + 1) * d]);
                    let s: f64 = gr.iter().sum();
                    da.extend(lr.iter().zip(gr).map(|(l, gv)| gv - l.exp() * s));
                }
                acc(*a, Tensor::new(lp.shape().to_vec(), da)?);
            }
            Op::MaskCols(a, keep) => {
                let d = keep.len();
                let da = gd.iter().enumerate().map(|(i, &gv)| if keep[i % d] { gv } else { 0.0 }).collect();
                acc(*a, Tensor::new(g.shape().to_vec(), da)?);
            }
            Op::RmsNorm(x, w) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let d = vx.last_dim();
                let mut dx = Vec::with_capacity(vx.len());
                let mut dw = vec![0.0; d];
                for i in 0..vx.outer() {
                    let row = vx.row(i);
                    let gr = &gd[i * d..(i + 1) * d];
                    let r = inv_rms(row);
                    let mut proj = 0.0;
                    for j in 0..d {
                        let xhat = row[j] * r;
                        dw[j] += gr[j] * xhat;
                        proj += gr[j] * vw.data()[j] * xhat;
                    }
                    proj /= d as f64;
                    for j in 0..d {
                        let xhat = row[j] * r;
                        dx.push(r * (gr[j] * vw.data()[j] - xhat * proj));
                    }
                }
                acc(*x, Tensor::new(vx.shape().to_vec(), dx)?);
                acc(*w, Tensor::new(vw.shape().to_vec(), dw)?);
            }
            Op::GatherRows(table, idx) => {
                let vt = self.value(*table);
                let d = vt.last_dim();
                let mut dt = Tensor::zeros(vt.shape());
                let dd = dt.data_mut();
                for (r, &t) in idx.iter().enumerate() {
                    for (o, x) in dd[t * d..(t + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                        *o += x;
                    }
                }
                acc(*table, dt);
            }
            Op::ScatterRows(src, idx) => {
                let vs = self.value(*src);
                let d = vs.last_dim();
                let mut ds = Vec::with_capacity(vs.len());
                for &t in idx {
                    ds.extend_from_slice(&gd[t * d..(t + 1) * d]);
                }
                acc(*src, Tensor::new(vs.shape().to_vec(), ds)?);
            }
            Op::Pick(src, idx) => {
                let vs = self.value(*src);
                let mut ds = Tensor::zeros(vs.shape());
                for (r, &i) in idx.iter().enumerate() {
                    ds.data_mut()[i] += gd[r];
                }
                acc(*src, ds);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                acc(*a, g.clone().reshape(shape)?);
            }
            Op::Attention { q, k, v, layout, probs } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, layout, probs, gd);
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
        }
        Ok(())
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        probs: &[f64],
        gd: &[f64],
    ) -> (Tensor, Tensor, Tensor) {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (t, qd) = (vq.shape()[0], vq.shape()[1]);
        let kd = vk.shape()[1];
        let nh = layout.num_heads;
        let dh = qd / nh;
        let group = nh / layout.num_kv_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vvd) = (vq.data(), vk.data(), vv.data());

        let mut dq = vec![0.0; t * qd];
        let mut dk = vec![0.0; t * kd];
        let mut dv = vec![0.0; t * kd];
        let mut offset = 0;
        let mut ds = Vec::new();
        for &(s, l) in &layout.segments {
            for h in 0..nh {
                let kvh = h / group;
                for i in 0..l {
                    let p = &probs[offset..offset + i + 1];
                    offset += i + 1;
                    let gi = &gd[(s + i) * qd + h * dh..][..dh];
                    ds.clear();
                    let mut c = 0.0;
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vvd[(s + j) * kd + kvh * dh..][..dh];
                        let dp = kernels::dot(gi, vj);
                        c += pj * dp;
                        ds.push(dp);
                        let dvj = &mut dv[(s + j) * kd + kvh * dh..][..dh];
                        for (o, x) in dvj.iter_mut().zip(gi) {
                            *o += pj * x;
                        }
                    }
                    let qi = &qv[(s + i) * qd + h * dh..][..dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let dsj = pj * (ds[j] - c) * scale;
                        if dsj == 0.0 {
                            continue;
                        }
                        let kj = &kv[(s + j) * kd + kvh * dh..][..dh];
                        let dqi = &mut dq[(s + i) * qd + h * dh..][..dh];
                        for (o, x) in dqi.iter_mut().zip(kj) {
                            *o += dsj * x;
                        }
                        let dkj = &mut dk[(s + j) * kd + kvh * dh..][..dh];
                        for (o, x) in dkj.iter_mut().zip(qi) {
                            *o += dsj * x;
                        }
                    }
                }
            }
        }
        (
            Tensor::new(vec![t, qd], dq).expect("shape"),
            Tensor::new(vec![t, kd], dk).expect("shape"),
            Tensor::new(vec![t, kd], dv).expect("shape"),
        )
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

pub(crate) fn inv_rms(row: &[f64]) -> f64 {
    let ms = row.iter().map(|x| x * x).sum::<f64>() / row.len() as f64;
    1.0 / (ms + RMS_EPS).sqrt()
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Softmax over the last dimension without recording on a tape.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let mut data = Vec::with_capacity(x.len());
    for i in 0..x.outer() {
        let row = x.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return Err(Error::DegenerateSoftmax { row: i });
        }
        let start = data.len();
        let mut z = 0.0;
        for &v in row {
            let e = (v - m).exp();
            z += e;
            data.push(e);
        }
        data[start..].iter_mut().for_each(|e| *e /= z);
    }
    Tensor::new(x.shape().to_vec(), data)
}
