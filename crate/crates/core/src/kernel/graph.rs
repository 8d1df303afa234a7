//! Tape of recorded operations and the reverse sweep over it.
//!
//! Every op appends one node whose inputs precede it, so node order is a
//! topological order and the backward pass is a single reverse scan.

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Floor applied inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Pick(Var, Vec<usize>),
    Reshape(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RowOuter(Var, Var),
    GradReversal(Var, f64),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        cols: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    LstmCell {
        x: Var,
        h: Var,
        c: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
        /// activated gates [B, 4H] in order input, forget, candidate, output
        gates: Vec<f64>,
        tanh_c: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics produced by a training-mode batchnorm call.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance over the normalized positions.
    pub var: Vec<f64>,
    /// Number of positions each channel was averaged over.
    pub count: usize,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
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

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    dst.iter_mut().for_each(|d| *d /= sum);
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Untracked constant.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Tracked leaf that is not a stored parameter; its gradient is only
    /// available through the returned [`Gradients`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let trainable = store.is_trainable(id);
        self.push(store.value(id).clone(), Op::Param(id), trainable)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.input(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        Ok(self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Adds a per-channel bias along axis 1 of a rank-2 or rank-3 input.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() < 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(shape_err("add_bias", sx, sb));
        }
        let ch = sx[1];
        let inner: usize = sx[2..].iter().product();
        let bias = self.data(b);
        let mut out = self.data(x).to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += bias[(i / inner) % ch];
        }
        let t = Tensor::new(sx.to_vec(), out)?;
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(t, Op::AddBias(x, b), ng))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect()).unwrap();
        let ng = self.ng(x);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    /// `ln(max(x, LOG_FLOOR))`.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.max(LOG_FLOOR).ln())
    }

    /// Identity on the forward pass; scales the incoming gradient by `-lambda`.
    pub fn grad_reversal(&mut self, x: Var, lambda: f64) -> Var {
        let v = self.value(x).clone();
        let ng = self.ng(x);
        self.push(v, Op::GradReversal(x, lambda), ng)
    }

    fn check_rows(&self, x: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 || s[1] == 0 {
            return Err(shape_err(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    /// Row-wise softmax of an `[N, K]` input.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (n, k) = self.check_rows(x, "softmax")?;
        let mut out = vec![0.0; n * k];
        let src = self.data(x);
        for i in 0..n {
            softmax_row(&src[i * k..(i + 1) * k], &mut out[i * k..(i + 1) * k]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![n, k], out)?, Op::Softmax(x), ng))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, k) = self.check_rows(x, "log_softmax")?;
        let src = self.data(x);
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let row = &src[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..k {
                out[i * k + j] = row[j] - lse;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![n, k], out)?, Op::LogSoftmax(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(shape_err("mean", self.shape(x), &[]));
        }
        let s = self.data(x).iter().sum::<f64>() / n as f64;
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), ng))
    }

    /// Column means of an `[N, K]` input, giving `[K]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] == 0 {
            return Err(shape_err("mean_rows", s, &[]));
        }
        let (n, k) = (s[0], s[1]);
        let mut out = vec![0.0; k];
        for row in self.data(x).chunks_exact(k) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![k], out)?, Op::MeanRows(x), ng))
    }

    /// Selects `x[i, idx[i]]` from an `[N, K]` input, giving `[N]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != idx.len() {
            return Err(shape_err("pick", s, &[idx.len()]));
        }
        let k = s[1];
        if let Some(&bad) = idx.iter().find(|&&j| j >= k) {
            return Err(Error::invalid(format!("pick: index {bad} out of range for {k} columns")));
        }
        let d = self.data(x);
        let out = idx.iter().enumerate().map(|(i, &j)| d[i * k + j]).collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![idx.len()], out)?, Op::Pick(x, idx.to_vec()), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Flattens all but the first axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[1] {
            return Err(shape_err("slice_cols", s, &[start, len]));
        }
        let (n, f) = (s[0], s[1]);
        let d = self.data(x);
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&d[i * f + start..i * f + start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![n, len], out)?, Op::SliceCols(x, start), ng))
    }

    /// Rows `start..start + len` along axis 0 of any-rank input.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || start + len > s[0] {
            return Err(shape_err("slice_rows", &s, &[start, len]));
        }
        let inner: usize = s[1..].iter().product();
        let out = self.data(x)[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::SliceRows(x, start), ng))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let n = self.shape(xs[0])[0];
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 2 || s[0] != n {
                return Err(shape_err("concat_cols", self.shape(xs[0]), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.data(x)[i * w..(i + 1) * w]);
            }
        }
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(Tensor::new(vec![n, total], out)?, Op::ConcatCols(xs.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let f = self.shape(xs[0])[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s[1..] != f[..] {
                return Err(shape_err("concat_rows", self.shape(xs[0]), s));
            }
            rows += s[0];
            out.extend_from_slice(self.data(x));
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&f);
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(Tensor::new(shape, out)?, Op::ConcatRows(xs.to_vec()), ng))
    }

    /// Per-row outer product: `[N, D] x [N, K] -> [N, D*K]`, laid out so
    /// column `d * K + k` holds `a[n, d] * b[n, k]`.
    pub fn row_outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(shape_err("row_outer", sa, sb));
        }
        let (n, d, k) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; n * d * k];
        for i in 0..n {
            for p in 0..d {
                let av = da[i * d + p];
                let o = &mut out[(i * d + p) * k..(i * d + p + 1) * k];
                o.iter_mut().zip(&db[i * k..(i + 1) * k]).for_each(|(o, bv)| *o = av * bv);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![n, d * k], out)?, Op::RowOuter(a, b), ng))
    }

    /// 1D convolution: `x [N, Cin, L]`, `w [Cout, Cin, Kw]`, `b [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(shape_err("conv1d", sx, sw));
        }
        if sb != [sw[0]] {
            return Err(shape_err("conv1d", sw, sb));
        }
        let (n, cin, len) = (sx[0], sx[1], sx[2]);
        let (cout, kw) = (sw[0], sw[2]);
        if stride == 0 || len + 2 * padding < kw {
            return Err(shape_err("conv1d", sx, sw));
        }
        let lout = (len + 2 * padding - kw) / stride + 1;
        let ck = cin * kw;
        let xd = self.data(x);
        let mut cols = vec![0.0; n * ck * lout];
        for s in 0..n {
            let col = &mut cols[s * ck * lout..(s + 1) * ck * lout];
            for ci in 0..cin {
                let xrow = &xd[(s * cin + ci) * len..(s * cin + ci + 1) * len];
                for k in 0..kw {
                    let crow = &mut col[(ci * kw + k) * lout..(ci * kw + k + 1) * lout];
                    for (t, c) in crow.iter_mut().enumerate() {
                        let pos = (t * stride + k) as isize - padding as isize;
                        if pos >= 0 && (pos as usize) < len {
                            *c = xrow[pos as usize];
                        }
                    }
                }
            }
        }
        let wd = self.data(w);
        let bd = self.data(b);
        let mut out = vec![0.0; n * cout * lout];
        for s in 0..n {
            let o = &mut out[s * cout * lout..(s + 1) * cout * lout];
            for (co, row) in o.chunks_exact_mut(lout).enumerate() {
                row.iter_mut().for_each(|v| *v = bd[co]);
            }
            gemm(cout, ck, lout, wd, false, &cols[s * ck * lout..], false, 1.0, o);
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            Tensor::new(vec![n, cout, lout], out)?,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
                cols,
            },
            ng,
        ))
    }

    /// Batch normalization over axis 1 of `[N, C]` or `[N, C, L]`.
    ///
    /// With `running = None` the batch statistics are used and returned;
    /// otherwise the supplied (mean, var) pair is treated as a constant.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || self.shape(gamma) != [sx[1]] || self.shape(beta) != [sx[1]] {
            return Err(shape_err("batch_norm", &sx, self.shape(gamma)));
        }
        let (n, ch) = (sx[0], sx[1]);
        let inner: usize = sx[2..].iter().product();
        let count = n * inner;
        if count == 0 {
            return Err(shape_err("batch_norm", &sx, &[]));
        }
        let xd = self.data(x);
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                if m.len() != ch || v.len() != ch {
                    return Err(shape_err("batch_norm", &sx, &[m.len()]));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                let mut mean = vec![0.0; ch];
                let mut var = vec![0.0; ch];
                for s in 0..n {
                    for c in 0..ch {
                        let seg = &xd[(s * ch + c) * inner..(s * ch + c + 1) * inner];
                        mean[c] += seg.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for s in 0..n {
                    for c in 0..ch {
                        let seg = &xd[(s * ch + c) * inner..(s * ch + c + 1) * inner];
                        var[c] += seg.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for (i, (xh, o)) in xhat.iter_mut().zip(out.iter_mut()).enumerate() {
            let c = (i / inner) % ch;
            *xh = (xd[i] - mean[c]) * inv_std[c];
            *o = g[c] * *xh + bt[c];
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let v = self.push(
            Tensor::new(sx, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: stats.is_some(),
            },
            ng,
        );
        Ok((v, stats))
    }

    /// One LSTM step. Returns `[B, 2H]` holding the new hidden state in the
    /// first `H` columns and the new cell state in the last `H`.
    ///
    /// `w_ih [4H, In]`, `w_hh [4H, H]`, `b [4H]`; gate blocks are ordered
    /// input, forget, candidate, output.
    pub fn lstm_cell(&mut self, x: Var, h: Var, c: Var, w_ih: Var, w_hh: Var, b: Var) -> Result<Var> {
        let (sx, sh, sc) = (self.shape(x), self.shape(h), self.shape(c));
        if sx.len() != 2 || sh.len() != 2 || sh != sc || sx[0] != sh[0] {
            return Err(shape_err("lstm_cell", sx, sh));
        }
        let (bsz, input, hid) = (sx[0], sx[1], sh[1]);
        if self.shape(w_ih) != [4 * hid, input] {
            return Err(shape_err("lstm_cell", self.shape(w_ih), &[4 * hid, input]));
        }
        if self.shape(w_hh) != [4 * hid, hid] {
            return Err(shape_err("lstm_cell", self.shape(w_hh), &[4 * hid, hid]));
        }
        if self.shape(b) != [4 * hid] {
            return Err(shape_err("lstm_cell", self.shape(b), &[4 * hid]));
        }
        let g4 = 4 * hid;
        let mut gates = vec![0.0; bsz * g4];
        for row in gates.chunks_exact_mut(g4) {
            row.copy_from_slice(self.data(b));
        }
        gemm(bsz, input, g4, self.data(x), false, self.data(w_ih), true, 1.0, &mut gates);
        gemm(bsz, hid, g4, self.data(h), false, self.data(w_hh), true, 1.0, &mut gates);
        let cd = self.data(c);
        let mut out = vec![0.0; bsz * 2 * hid];
        let mut tanh_c = vec![0.0; bsz * hid];
        for s in 0..bsz {
            let gr = &mut gates[s * g4..(s + 1) * g4];
            for j in 0..hid {
                let i = sigmoid(gr[j]);
                let f = sigmoid(gr[hid + j]);
                let g = gr[2 * hid + j].tanh();
                let o = sigmoid(gr[3 * hid + j]);
                gr[j] = i;
                gr[hid + j] = f;
                gr[2 * hid + j] = g;
                gr[3 * hid + j] = o;
                let cn = f * cd[s * hid + j] + i * g;
                let tc = cn.tanh();
                tanh_c[s * hid + j] = tc;
                out[s * 2 * hid + j] = o * tc;
                out[s * 2 * hid + hid + j] = cn;
            }
        }
        let ng = [x, h, c, w_ih, w_hh, b].iter().any(|&v| self.ng(v));
        Ok(self.push(
            Tensor::new(vec![bsz, 2 * hid], out)?,
            Op::LstmCell {
                x,
                h,
                c,
                w_ih,
                w_hh,
                b,
                gates,
                tanh_c,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Parameter gradients are added
    /// into `store` (never overwritten), so repeated calls accumulate.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop_node(i, &dy, &mut grads, store);
            }
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>], store: &mut ParamStore) {
        let node = &self.nodes[i];
        let y = node.value.data();
        // Returns the gradient buffer of `v` if it is tracked.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].needs_grad {
                    let len = self.nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Input | Op::Leaf => {}
            Op::Param(id) => {
                store.grad_mut(*id).iter_mut().zip(dy).for_each(|(g, d)| *g += d);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(ga) = acc!(*a) {
                    gemm(m, n, k, dy, false, self.data(*b), true, 1.0, ga);
                }
                if let Some(gb) = acc!(*b) {
                    gemm(k, m, n, self.data(*a), true, dy, false, 1.0, gb);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                if let Some(gb) = acc!(*b) {
                    gb.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                if let Some(gb) = acc!(*b) {
                    gb.iter_mut().zip(dy).for_each(|(g, d)| *g -= d);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = acc!(*a) {
                    let bd = self.data(*b);
                    for j in 0..ga.len() {
                        ga[j] += dy[j] * bd[j];
                    }
                }
                if let Some(gb) = acc!(*b) {
                    let ad = self.data(*a);
                    for j in 0..gb.len() {
                        gb[j] += dy[j] * ad[j];
                    }
                }
            }
            Op::AddBias(x, b) => {
                let sx = self.shape(*x);
                let ch = sx[1];
                let inner: usize = sx[2..].iter().product();
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                if let Some(gb) = acc!(*b) {
                    for (j, d) in dy.iter().enumerate() {
                        gb[(j / inner) % ch] += d;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().zip(dy).for_each(|(g, d)| *g += s * d);
                }
            }
            Op::GradReversal(x, lambda) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().zip(dy).for_each(|(g, d)| *g += -lambda * d);
                }
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                if let Some(gx) = acc!(*x) {
                    for j in 0..gx.len() {
                        if xd[j] > 0.0 {
                            gx[j] += dy[j];
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = acc!(*x) {
                    for j in 0..gx.len() {
                        gx[j] += dy[j] * (1.0 - y[j] * y[j]);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = acc!(*x) {
                    for j in 0..gx.len() {
                        gx[j] += dy[j] * y[j] * (1.0 - y[j]);
                    }
                }
            }
            Op::Abs(x) => {
                let xd = self.data(*x);
                if let Some(gx) = acc!(*x) {
                    for j in 0..gx.len() {
                        gx[j] += dy[j] * if xd[j] > 0.0 {
                            1.0
                        } else if xd[j] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                }
            }
            Op::Log(x) => {
                let xd = self.data(*x);
                if let Some(gx) = acc!(*x) {
                    for j in 0..gx.len() {
                        if xd[j] > LOG_FLOOR {
                            gx[j] += dy[j] / xd[j];
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let k = self.shape(*x)[1];
                if let Some(gx) = acc!(*x) {
                    for ((g, yr), dr) in gx.chunks_exact_mut(k).zip(y.chunks_exact(k)).zip(dy.chunks_exact(k)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            g[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let k = self.shape(*x)[1];
                if let Some(gx) = acc!(*x) {
                    for ((g, yr), dr) in gx.chunks_exact_mut(k).zip(y.chunks_exact(k)).zip(dy.chunks_exact(k)) {
                        let s: f64 = dr.iter().sum();
                        for j in 0..k {
                            g[j] += dr[j] - yr[j].exp() * s;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().for_each(|g| *g += dy[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = acc!(*x) {
                    let s = dy[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|g| *g += s);
                }
            }
            Op::MeanRows(x) => {
                let n = self.shape(*x)[0];
                let k = self.shape(*x)[1];
                if let Some(gx) = acc!(*x) {
                    for row in gx.chunks_exact_mut(k) {
                        row.iter_mut().zip(dy).for_each(|(g, d)| *g += d / n as f64);
                    }
                }
            }
            Op::Pick(x, idx) => {
                let k = self.shape(*x)[1];
                if let Some(gx) = acc!(*x) {
                    for (r, &j) in idx.iter().enumerate() {
                        gx[r * k + j] += dy[r];
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
            }
            Op::SliceCols(x, start) => {
                let f = self.shape(*x)[1];
                let len = node.value.shape()[1];
                if let Some(gx) = acc!(*x) {
                    for (r, dr) in dy.chunks_exact(len).enumerate() {
                        gx[r * f + start..r * f + start + len]
                            .iter_mut()
                            .zip(dr)
                            .for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::SliceRows(x, start) => {
                let inner: usize = self.shape(*x)[1..].iter().product();
                if let Some(gx) = acc!(*x) {
                    gx[start * inner..start * inner + dy.len()]
                        .iter_mut()
                        .zip(dy)
                        .for_each(|(g, d)| *g += d);
                }
            }
            Op::ConcatCols(xs) => {
                let total = node.value.shape()[1];
                let mut off = 0;
                for &x in xs {
                    let w = self.shape(x)[1];
                    if let Some(gx) = acc!(x) {
                        for (r, gr) in gx.chunks_exact_mut(w).enumerate() {
                            gr.iter_mut()
                                .zip(&dy[r * total + off..r * total + off + w])
                                .for_each(|(g, d)| *g += d);
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = self.value(x).len();
                    if let Some(gx) = acc!(x) {
                        gx.iter_mut().zip(&dy[off..off + len]).for_each(|(g, d)| *g += d);
                    }
                    off += len;
                }
            }
            Op::RowOuter(a, b) => {
                let (n, d) = (self.shape(*a)[0], self.shape(*a)[1]);
                let k = self.shape(*b)[1];
                if let Some(ga) = acc!(*a) {
                    let bd = self.data(*b);
                    for s in 0..n {
                        for p in 0..d {
                            let dr = &dy[(s * d + p) * k..(s * d + p + 1) * k];
                            ga[s * d + p] += dr.iter().zip(&bd[s * k..(s + 1) * k]).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = acc!(*b) {
                    let ad = self.data(*a);
                    for s in 0..n {
                        for p in 0..d {
                            let av = ad[s * d + p];
                            let dr = &dy[(s * d + p) * k..(s * d + p + 1) * k];
                            gb[s * k..(s + 1) * k].iter_mut().zip(dr).for_each(|(g, dv)| *g += av * dv);
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
                cols,
            } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (n, cin, len) = (sx[0], sx[1], sx[2]);
                let (cout, kw) = (sw[0], sw[2]);
                let lout = node.value.shape()[2];
                let ck = cin * kw;
                if let Some(gb) = acc!(*b) {
                    for (j, row) in dy.chunks_exact(lout).enumerate() {
                        gb[j % cout] += row.iter().sum::<f64>();
                    }
                }
                if let Some(gw) = acc!(*w) {
                    for s in 0..n {
                        gemm(
                            cout,
                            lout,
                            ck,
                            &dy[s * cout * lout..],
                            false,
                            &cols[s * ck * lout..],
                            true,
                            1.0,
                            gw,
                        );
                    }
                }
                let wd = self.data(*w);
                if let Some(gx) = acc!(*x) {
                    let mut dcol = vec![0.0; ck * lout];
                    for s in 0..n {
                        gemm(ck, cout, lout, wd, true, &dy[s * cout * lout..], false, 0.0, &mut dcol);
                        for ci in 0..cin {
                            let gxr = &mut gx[(s * cin + ci) * len..(s * cin + ci + 1) * len];
                            for k in 0..kw {
                                let crow = &dcol[(ci * kw + k) * lout..(ci * kw + k + 1) * lout];
                                for (t, c) in crow.iter().enumerate() {
                                    let pos = (t * stride + k) as isize - *padding as isize;
                                    if pos >= 0 && (pos as usize) < len {
                                        gxr[pos as usize] += c;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let sx = self.shape(*x);
                let ch = sx[1];
                let inner: usize = sx[2..].iter().product();
                let count = (sx[0] * inner) as f64;
                let chan = |j: usize| (j / inner) % ch;
                let mut sum_dy = vec![0.0; ch];
                let mut sum_dy_xhat = vec![0.0; ch];
                for j in 0..dy.len() {
                    let c = chan(j);
                    sum_dy[c] += dy[j];
                    sum_dy_xhat[c] += dy[j] * xhat[j];
                }
                if let Some(gg) = acc!(*gamma) {
                    gg.iter_mut().zip(&sum_dy_xhat).for_each(|(g, s)| *g += s);
                }
                if let Some(gb) = acc!(*beta) {
                    gb.iter_mut().zip(&sum_dy).for_each(|(g, s)| *g += s);
                }
                let gd = self.data(*gamma).to_vec();
                if let Some(gx) = acc!(*x) {
                    for j in 0..gx.len() {
                        let c = chan(j);
                        gx[j] += if *batch_stats {
                            gd[c] * inv_std[c] / count * (count * dy[j] - sum_dy[c] - xhat[j] * sum_dy_xhat[c])
                        } else {
                            gd[c] * inv_std[c] * dy[j]
                        };
                    }
                }
            }
            Op::LstmCell {
                x,
                h,
                c,
                w_ih,
                w_hh,
                b,
                gates,
                tanh_c,
            } => {
                let (bsz, input) = (self.shape(*x)[0], self.shape(*x)[1]);
                let hid = self.shape(*h)[1];
                let g4 = 4 * hid;
                let cd = self.data(*c);
                let mut dz = vec![0.0; bsz * g4];
                let mut dc_prev = vec![0.0; bsz * hid];
                for s in 0..bsz {
                    let gr = &gates[s * g4..(s + 1) * g4];
                    for j in 0..hid {
                        let (i, f, g, o) = (gr[j], gr[hid + j], gr[2 * hid + j], gr[3 * hid + j]);
                        let tc = tanh_c[s * hid + j];
                        let dh = dy[s * 2 * hid + j];
                        let dc = dy[s * 2 * hid + hid + j] + dh * o * (1.0 - tc * tc);
                        let dzr = &mut dz[s * g4..(s + 1) * g4];
                        dzr[j] = dc * g * i * (1.0 - i);
                        dzr[hid + j] = dc * cd[s * hid + j] * f * (1.0 - f);
                        dzr[2 * hid + j] = dc * i * (1.0 - g * g);
                        dzr[3 * hid + j] = dh * tc * o * (1.0 - o);
                        dc_prev[s * hid + j] = dc * f;
                    }
                }
                if let Some(gc) = acc!(*c) {
                    gc.iter_mut().zip(&dc_prev).for_each(|(g, d)| *g += d);
                }
                if let Some(gx) = acc!(*x) {
                    gemm(bsz, g4, input, &dz, false, self.data(*w_ih), false, 1.0, gx);
                }
                if let Some(gh) = acc!(*h) {
                    gemm(bsz, g4, hid, &dz, false, self.data(*w_hh), false, 1.0, gh);
                }
                if let Some(gw) = acc!(*w_ih) {
                    gemm(g4, bsz, input, &dz, true, self.data(*x), false, 1.0, gw);
                }
                if let Some(gw) = acc!(*w_hh) {
                    gemm(g4, bsz, hid, &dz, true, self.data(*h), false, 1.0, gw);
                }
                if let Some(gb) = acc!(*b) {
                    for row in dz.chunks_exact(g4) {
                        gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                }
            }
        }
    }
}
