//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`]s together with the
//! forward value. [`Graph::backward`] walks the tape in reverse and returns
//! exact gradients for every node. The op set is deliberately closed: every
//! model in the workspace is composed from these primitives.
//!
//! Sequence activations use the channel-major layout `[channels, batch, len]`
//! so that convolutions over a whole batch reduce to a single GEMM per chunk.

use crate::error::{shape_err, NumericError, Result};
use crate::kernels::{self, ConvDims};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv1d { x: Var, w: Var, b: Var, dims: ConvDims },
    MatMulNt { a: Var, b: Var },
    AddRowBias { x: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    AvgPool2(Var),
    Upsample { x: Var },
    Concat0(Var, Var),
    GatherRows { table: Var, idx: Vec<usize> },
    BroadcastTime { x: Var },
    ToBatchMajor(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    LogSoftmaxRows { x: Var, exclude_diag: bool },
    WeightedSum { x: Var, w: Tensor },
    InstanceNorm { x: Var, inv_std: Vec<f64> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape()[..] {
        [c, b, l] => Ok((c, b, l)),
        _ => shape_err(op, format!("expected [c, b, l], got {:?}", t.shape())),
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape()[..] {
        [n, k] => Ok((n, k)),
        _ => shape_err(op, format!("expected rank 2, got {:?}", t.shape())),
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Binds a parameter; gradients flow back to `id`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// Same-padded stride-1 1-D convolution. `x` is `[c_in, l]` or
    /// `[c_in, b, l]`, `w` is `[c_out, c_in, k]` with odd `k`, `b` is `[c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let (c_in, batch, len, rank2) = match xv.shape()[..] {
            [c, l] => (c, 1, l, true),
            [c, nb, l] => (c, nb, l, false),
            _ => return shape_err("conv1d", format!("input {:?}", xv.shape())),
        };
        let wv = self.value(w);
        let [c_out, wc_in, kernel] = wv.shape()[..] else {
            return shape_err("conv1d", format!("kernel {:?}", wv.shape()));
        };
        if wc_in != c_in {
            return shape_err("conv1d", format!("input has {c_in} channels, kernel expects {wc_in}"));
        }
        if kernel % 2 == 0 {
            return shape_err("conv1d", format!("kernel width {kernel} must be odd"));
        }
        if self.value(b).shape() != [c_out] {
            return shape_err("conv1d", format!("bias {:?} for {c_out} outputs", self.value(b).shape()));
        }
        let dims = ConvDims {
            c_in,
            c_out,
            batch,
            len,
            kernel,
        };
        let y = kernels::conv1d_forward(xv.data(), wv.data(), self.value(b).data(), &dims);
        let shape = if rank2 {
            vec![c_out, len]
        } else {
            vec![c_out, batch, len]
        };
        Ok(self.push(Tensor::from_parts(shape, y), Op::Conv1d { x, w, b, dims }))
    }

    /// `a * b^T`. `a` is `[n, k]` (or `[k]`), `b` is `[p, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let (n, k, rank1) = match av.shape()[..] {
            [k] => (1, k, true),
            [n, k] => (n, k, false),
            _ => return shape_err("matmul_nt", format!("lhs {:?}", av.shape())),
        };
        let (p, bk) = dims2(self.value(b), "matmul_nt")?;
        if bk != k {
            return shape_err("matmul_nt", format!("inner dims {k} vs {bk}"));
        }
        let mut out = vec![0.0; n * p];
        kernels::gemm(n, k, p, 1.0, av.data(), k, 1, self.value(b).data(), 1, k, 0.0, &mut out, p, 1);
        let shape = if rank1 { vec![p] } else { vec![n, p] };
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMulNt { a, b }))
    }

    /// Adds `b` (`[p]`) to every row of `x` (`[n, p]` or `[p]`).
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let p = *xv.shape().last().unwrap();
        if self.value(b).shape() != [p] {
            return shape_err("add_row_bias", format!("{:?} + {:?}", xv.shape(), self.value(b).shape()));
        }
        let bv = self.value(b).data();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(p) {
            for (o, bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddRowBias { x, b }))
    }

    /// Affine map `x W^T + b` with `W` of shape `[p, n]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul_nt(x, w)?;
        self.add_row_bias(h, b)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(op, format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Sub(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|e| e * c);
        self.push(v, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * e);
        self.push(v, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Mean squared difference over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Average pooling with window and stride 2 along the last axis of
    /// `[c, b, l]`; a trailing odd element is dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, nb, l) = dims3(self.value(x), "avg_pool2")?;
        let lo = l / 2;
        if lo == 0 {
            return shape_err("avg_pool2", format!("length {l} too short"));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; c * nb * lo];
        for (row_o, row_i) in out.chunks_mut(lo).zip(xd.chunks(l)) {
            for t in 0..lo {
                row_o[t] = 0.5 * (row_i[2 * t] + row_i[2 * t + 1]);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![c, nb, lo], out), Op::AvgPool2(x)))
    }

    /// Nearest-neighbour resampling of `[c, b, l]` to length `out_len`.
    pub fn upsample(&mut self, x: Var, out_len: usize) -> Result<Var> {
        let (c, nb, l) = dims3(self.value(x), "upsample")?;
        if out_len == 0 {
            return shape_err("upsample", "zero output length");
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; c * nb * out_len];
        for (row_o, row_i) in out.chunks_mut(out_len).zip(xd.chunks(l)) {
            for (t, o) in row_o.iter_mut().enumerate() {
                *o = row_i[t * l / out_len];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![c, nb, out_len], out), Op::Upsample { x }))
    }

    /// Concatenates along axis 0; trailing dimensions must agree.
    pub fn concat0(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != sb.len() || sa[1..] != sb[1..] {
            return shape_err("concat0", format!("{sa:?} vs {sb:?}"));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat0(a, b)))
    }

    /// Embedding lookup: rows `idx` of `table` (`[v, d]`) as `[idx.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (v, d) = dims2(self.value(table), "gather_rows")?;
        if idx.is_empty() {
            return Err(NumericError::Empty("gather_rows"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return shape_err("gather_rows", format!("index {bad} out of {v} rows"));
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), d], out),
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Replicates per-item channel vectors `[b, c]` along time: `[c, b, len]`.
    pub fn broadcast_time(&mut self, x: Var, len: usize) -> Result<Var> {
        let (nb, c) = dims2(self.value(x), "broadcast_time")?;
        if len == 0 {
            return shape_err("broadcast_time", "zero length");
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; c * nb * len];
        for ch in 0..c {
            for b in 0..nb {
                out[(ch * nb + b) * len..][..len].fill(xd[b * c + ch]);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![c, nb, len], out), Op::BroadcastTime { x }))
    }

    /// `[c, b, l]` -> `[b, c * l]`: each row is the row-major flattening of
    /// one item's `[c, l]` feature map.
    pub fn to_batch_major(&mut self, x: Var) -> Result<Var> {
        let (c, nb, l) = dims3(self.value(x), "to_batch_major")?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; c * nb * l];
        for ch in 0..c {
            for b in 0..nb {
                out[b * c * l + ch * l..][..l].copy_from_slice(&xd[(ch * nb + b) * l..][..l]);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![nb, c * l], out), Op::ToBatchMajor(x)))
    }

    /// Scales each row of `[n, d]` (or a single `[d]` vector) to unit norm.
    /// All-zero rows are rejected.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        let mut out = xv.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / d);
        for (r, row) in out.chunks_mut(d).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(NumericError::Invalid(format!(
                    "l2 normalisation of all-zero row {r}"
                )));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::L2NormalizeRows { x, norms }))
    }

    /// Row-wise log-softmax of `[n, k]`. With `exclude_diag` the entry `(i, i)`
    /// is left out of row `i`'s normaliser and reported as 0.
    pub fn log_softmax_rows(&mut self, x: Var, exclude_diag: bool) -> Result<Var> {
        let (n, k) = dims2(self.value(x), "log_softmax_rows")?;
        if exclude_diag && (n != k || k < 2) {
            return shape_err("log_softmax_rows", format!("diagonal exclusion needs square k>=2, got [{n}, {k}]"));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let row = &xd[i * k..(i + 1) * k];
            let skip = exclude_diag.then_some(i);
            let lse = crate::ops::logsumexp_skip(row, skip);
            for j in 0..k {
                out[i * k + j] = if Some(j) == skip { 0.0 } else { row[j] - lse };
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, k], out), Op::LogSoftmaxRows { x, exclude_diag }))
    }

    /// `sum(w * x)` with a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, w: Tensor) -> Result<Var> {
        if w.shape() != self.value(x).shape() {
            return shape_err("weighted_sum", format!("{:?} vs {:?}", w.shape(), self.value(x).shape()));
        }
        let s = self.value(x).data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, w }))
    }

    /// Per-(channel, item) normalisation over time of `[c, b, l]`, no affine.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (c, nb, l) = dims3(self.value(x), "instance_norm")?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; c * nb * l];
        let mut inv_std = Vec::with_capacity(c * nb);
        for (row_o, row_i) in out.chunks_mut(l).zip(xd.chunks(l)) {
            let mu = row_i.iter().sum::<f64>() / l as f64;
            let var = row_i.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / l as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in row_o.iter_mut().zip(row_i) {
                *o = (v - mu) * is;
            }
            inv_std.push(is);
        }
        Ok(self.push(Tensor::from_parts(vec![c, nb, l], out), Op::InstanceNorm { x, inv_std }))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericError::NonScalarLoss(lv.shape().to_vec()));
        }
        for (i, node) in self.nodes[..=loss.0].iter().enumerate() {
            if !node.value.is_finite() {
                return Err(NumericError::NonFinite(format!("forward value of node {i}")));
            }
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[idx] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Param(_) => unreachable!(),
                Op::Conv1d { x, w, b: bvar, dims } => {
                    let cg = kernels::conv1d_backward(self.value(*x).data(), self.value(*w).data(), g.data(), dims);
                    accumulate(&mut grads, *x, self.value(*x).shape(), cg.dx);
                    accumulate(&mut grads, *w, self.value(*w).shape(), cg.dw);
                    accumulate(&mut grads, *bvar, self.value(*bvar).shape(), cg.db);
                }
                Op::MatMulNt { a, b } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let k = *av.shape().last().unwrap();
                    let n = av.len() / k;
                    let p = bv.shape()[0];
                    // da = g [n, p] * b [p, k]
                    let mut da = vec![0.0; n * k];
                    kernels::gemm(n, p, k, 1.0, g.data(), p, 1, bv.data(), k, 1, 0.0, &mut da, k, 1);
                    // db = g^T [p, n] * a [n, k]
                    let mut db = vec![0.0; p * k];
                    kernels::gemm(p, n, k, 1.0, g.data(), 1, p, av.data(), k, 1, 0.0, &mut db, k, 1);
                    accumulate(&mut grads, *a, av.shape(), da);
                    accumulate(&mut grads, *b, bv.shape(), db);
                }
                Op::AddRowBias { x, b } => {
                    let p = self.value(*b).len();
                    let mut db = vec![0.0; p];
                    for row in g.data().chunks(p) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *b, &[p], db);
                    accumulate(&mut grads, *x, g.shape(), g.data().to_vec());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.shape(), g.data().to_vec());
                    let shape = g.shape().to_vec();
                    accumulate(&mut grads, *b, &shape, g.into_data());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.shape(), g.data().to_vec());
                    let neg = g.data().iter().map(|v| -v).collect();
                    accumulate(&mut grads, *b, g.shape(), neg);
                }
                Op::Scale(x, c) => {
                    let d = g.data().iter().map(|v| v * c).collect();
                    accumulate(&mut grads, *x, g.shape(), d);
                }
                Op::Relu(x) => {
                    let d = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, g.shape(), d);
                }
                Op::Square(x) => {
                    let d = g.data().iter().zip(self.value(*x).data()).map(|(gv, xv)| 2.0 * gv * xv).collect();
                    accumulate(&mut grads, *x, g.shape(), d);
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    accumulate(&mut grads, *x, xv.shape(), vec![g.data()[0]; xv.len()]);
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let s = g.data()[0] / xv.len() as f64;
                    accumulate(&mut grads, *x, xv.shape(), vec![s; xv.len()]);
                }
                Op::AvgPool2(x) => {
                    let xv = self.value(*x);
                    let l = xv.shape()[2];
                    let lo = l / 2;
                    let mut d = vec![0.0; xv.len()];
                    for (row_d, row_g) in d.chunks_mut(l).zip(g.data().chunks(lo)) {
                        for t in 0..lo {
                            row_d[2 * t] = 0.5 * row_g[t];
                            row_d[2 * t + 1] = 0.5 * row_g[t];
                        }
                    }
                    accumulate(&mut grads, *x, xv.shape(), d);
                }
                Op::Upsample { x } => {
                    let xv = self.value(*x);
                    let l = xv.shape()[2];
                    let out_len = g.shape()[2];
                    let mut d = vec![0.0; xv.len()];
                    for (row_d, row_g) in d.chunks_mut(l).zip(g.data().chunks(out_len)) {
                        for (t, gv) in row_g.iter().enumerate() {
                            row_d[t * l / out_len] += gv;
                        }
                    }
                    accumulate(&mut grads, *x, xv.shape(), d);
                }
                Op::Concat0(a, b) => {
                    let na = self.value(*a).len();
                    let gd = g.data();
                    accumulate(&mut grads, *a, self.value(*a).shape(), gd[..na].to_vec());
                    accumulate(&mut grads, *b, self.value(*b).shape(), gd[na..].to_vec());
                }
                Op::GatherRows { table, idx } => {
                    let tv = self.value(*table);
                    let d = tv.shape()[1];
                    let mut dt = vec![0.0; tv.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for (a, b) in dt[i * d..(i + 1) * d].iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                            *a += b;
                        }
                    }
                    accumulate(&mut grads, *table, tv.shape(), dt);
                }
                Op::BroadcastTime { x } => {
                    let xv = self.value(*x);
                    let (nb, c) = (xv.shape()[0], xv.shape()[1]);
                    let len = g.shape()[2];
                    let mut d = vec![0.0; nb * c];
                    for ch in 0..c {
                        for b in 0..nb {
                            d[b * c + ch] = g.data()[(ch * nb + b) * len..][..len].iter().sum();
                        }
                    }
                    accumulate(&mut grads, *x, xv.shape(), d);
                }
                Op::ToBatchMajor(x) => {
                    let xv = self.value(*x);
                    let (c, nb, l) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                    let mut d = vec![0.0; xv.len()];
                    for ch in 0..c {
                        for b in 0..nb {
                            d[(ch * nb + b) * l..][..l].copy_from_slice(&g.data()[b * c * l + ch * l..][..l]);
                        }
                    }
                    accumulate(&mut grads, *x, xv.shape(), d);
                }
                Op::L2NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let d = *y.shape().last().unwrap();
                    let mut dx = vec![0.0; y.len()];
                    for (r, ((dxr, yr), gr)) in dx
                        .chunks_mut(d)
                        .zip(y.data().chunks(d))
                        .zip(g.data().chunks(d))
                        .enumerate()
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dxr[j] = (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                    accumulate(&mut grads, *x, y.shape(), dx);
                }
                Op::LogSoftmaxRows { x, exclude_diag } => {
                    let y = &node.value;
                    let (n, k) = (y.shape()[0], y.shape()[1]);
                    let mut dx = vec![0.0; n * k];
                    for i in 0..n {
                        let yr = &y.data()[i * k..(i + 1) * k];
                        let gr = &g.data()[i * k..(i + 1) * k];
                        let skip = exclude_diag.then_some(i);
                        let gsum: f64 = (0..k).filter(|&j| Some(j) != skip).map(|j| gr[j]).sum();
                        for j in 0..k {
                            if Some(j) != skip {
                                dx[i * k + j] = gr[j] - yr[j].exp() * gsum;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, y.shape(), dx);
                }
                Op::WeightedSum { x, w } => {
                    let s = g.data()[0];
                    let d = w.data().iter().map(|v| v * s).collect();
                    accumulate(&mut grads, *x, w.shape(), d);
                }
                Op::InstanceNorm { x, inv_std } => {
                    let y = &node.value;
                    let l = y.shape()[2];
                    let mut dx = vec![0.0; y.len()];
                    for (r, ((dxr, yr), gr)) in dx
                        .chunks_mut(l)
                        .zip(y.data().chunks(l))
                        .zip(g.data().chunks(l))
                        .enumerate()
                    {
                        let gm = gr.iter().sum::<f64>() / l as f64;
                        let gym = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / l as f64;
                        for t in 0..l {
                            dxr[t] = inv_std[r] * (gr[t] - gm - yr[t] * gym);
                        }
                    }
                    accumulate(&mut grads, *x, y.shape(), dx);
                }
            }
        }
        Ok(Gradients::collect(self, grads))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], d: Vec<f64>) {
    match &mut grads[v.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(&d) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::from_parts(shape.to_vec(), d)),
    }
}

/// Gradients produced by [`Graph::backward`]: one slot per leaf or
/// parameter node reachable from the loss.
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    bindings: Vec<(ParamId, usize)>,
}

impl Gradients {
    fn collect(graph: &Graph, leaves: Vec<Option<Tensor>>) -> Self {
        let bindings = graph
            .nodes
            .iter()
            .enumerate()
            .take(leaves.len())
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Self { leaves, bindings }
    }

    /// Gradient with respect to an input or parameter node.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter, summed over every node bound to it.
    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        let mut acc: Option<Tensor> = None;
        for &(pid, node) in &self.bindings {
            if pid != id {
                continue;
            }
            if let Some(g) = &self.leaves[node] {
                match &mut acc {
                    Some(a) => a.add_assign(g),
                    None => acc = Some(g.clone()),
                }
            }
        }
        acc
    }

    /// Overwrites the gradient slots of `store`; unreached parameters get zeros.
    pub fn write_to(&self, store: &mut ParamStore) {
        store.zero_grads();
        for &(pid, node) in &self.bindings {
            if let Some(g) = &self.leaves[node] {
                store.get_mut(pid).grad.add_assign(g);
            }
        }
    }
}
