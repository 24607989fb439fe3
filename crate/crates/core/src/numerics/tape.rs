//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation pushes a
//! node holding its output value and the indices of its inputs; calling
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients
//! into the [`ParamStore`] for every parameter leaf.

use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    SwapAxes12(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSoftmax(Var),
    CausalMask(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,k] += g[m,n] * b[k,n]^T`
fn gemm_nt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let bt = transpose_last2(b, 1, k, n);
    gemm_nn(g, &bt, c, m, n, k);
}

/// `c[k,n] += a[m,k]^T * g[m,n]`
fn gemm_tn(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

fn transpose_last2(data: &[f64], batch: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        let src = &data[b * r * c..(b + 1) * r * c];
        let dst = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

fn swap12(data: &[f64], a: usize, b: usize, c: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&data[src..src + d]);
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(delta).for_each(|(b, d)| *b += d),
        None => *slot = Some(delta.to_vec()),
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// `[B,m,k] x [B,k,n] -> [B,m,n]`
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm_nn(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(self.push(Tensor::new(vec![bs, m, n], out)?, Op::BatchMatMul(a, b)))
    }

    /// Swaps the last two axes of a 2-D or 3-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (batch, r, c) = match s.as_slice() {
            [r, c] => (1, *r, *c),
            [b, r, c] => (*b, *r, *c),
            _ => return Err(shape_err("transpose", &s, &[])),
        };
        let out = transpose_last2(self.value(x).data(), batch, r, c);
        let mut shape = s;
        let len = shape.len();
        shape.swap(len - 2, len - 1);
        Ok(self.push(Tensor::new(shape, out)?, Op::Transpose(x)))
    }

    /// `[a,b,c,d] -> [a,c,b,d]`
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [a, b, c, d] = s[..] else {
            return Err(shape_err("swap_axes12", &s, &[]));
        };
        let out = swap12(self.value(x).data(), a, b, c, d);
        Ok(self.push(Tensor::new(vec![a, c, b, d], out)?, Op::SwapAxes12(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(shape_err("reshape", s, shape));
        }
        let value = self.value(x).clone().reshaped(shape.to_vec());
        Ok(self.push(value, Op::Reshape(x)))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(name, sa, sb));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = sa.to_vec();
        Ok(self.push(Tensor::new(shape, out)?, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[n]` bias to every row of a `[.., n]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(shape_err("add_bias", sx, sb));
        }
        let n = sb[0];
        let b = self.value(bias).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        let shape = sx.to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias(x, bias)))
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.map(x, |v| scale * v + shift);
        self.push(value, Op::Affine(x, scale))
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.map(x, sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.map(x, f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.map(x, f64::ln);
        self.push(value, Op::Log(x))
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the bound is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.map(x, |v| v.clamp(lo, hi));
        self.push(value, Op::Clamp(x, lo, hi))
    }

    fn rowwise(&self, x: Var, f: impl Fn(&[f64], &mut [f64])) -> Tensor {
        let t = self.value(x);
        let c = t.cols();
        let mut out = vec![0.0; t.numel()];
        for (src, dst) in t.data().chunks(c).zip(out.chunks_mut(c)) {
            f(src, dst);
        }
        Tensor::new(t.shape().to_vec(), out).expect("same shape")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let value = self.rowwise(x, softmax_row);
        self.push(value, Op::Softmax(x))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let value = self.rowwise(x, |src, dst| {
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + src.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s - lse;
            }
        });
        self.push(value, Op::LogSoftmax(x))
    }

    /// Sets entries above the diagonal of the last two axes to `-inf`.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(shape_err("causal_mask", &s, &[]));
        }
        let t = s[s.len() - 1];
        let mut value = self.value(x).clone();
        for (idx, v) in value.data_mut().iter_mut().enumerate() {
            let (i, j) = ((idx / t) % t, idx % t);
            if j > i {
                *v = f64::NEG_INFINITY;
            }
        }
        Ok(self.push(value, Op::CausalMask(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Layer normalisation over the last axis with learned scale and offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gamma), self.shape(beta));
        let w = *sx.last().unwrap_or(&0);
        if sg != [w] || sb != [w] {
            return Err(shape_err("layer_norm", sx, sg));
        }
        let shape = sx.to_vec();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xs = self.value(x).data();
        let rows = xs.len() / w;
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * w..(r + 1) * w];
            let mu = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..w {
                let h = (row[j] - mu) * is;
                xhat[r * w + j] = h;
                out[r * w + j] = g[j] * h + b[j];
            }
        }
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Selects rows (over the flattened leading axes) by index.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        let total = t.numel() / c.max(1);
        if let Some(&bad) = rows.iter().find(|&&r| r >= total) {
            return Err(shape_err("gather_rows", t.shape(), &[bad]));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(t.row(r));
        }
        Ok(self.push(Tensor::new(vec![rows.len(), c], out)?, Op::GatherRows(x, rows.to_vec())))
    }

    /// Back-propagates from a scalar `loss` and accumulates gradients into
    /// `store` for every parameter leaf on this tape.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let ls = self.value(loss);
        if ls.numel() != 1 || ls.shape().iter().any(|&d| d != 1) {
            return Err(Error::NonScalarLoss(ls.shape().to_vec()));
        }
        for node in &self.nodes {
            if let Op::Param(id) = node.op {
                if store.grad(id).is_none() {
                    store.accumulate_grad(id, &vec![0.0; node.value.numel()]);
                }
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Const => {}
                Op::Param(id) => store.accumulate_grad(*id, &g),
                Op::MatMul(a, b) => {
                    let (sa, sb) = (val(*a).shape(), val(*b).shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let mut da = vec![0.0; m * k];
                    gemm_nt(&g, val(*b).data(), &mut da, m, k, n);
                    let mut db = vec![0.0; k * n];
                    gemm_tn(val(*a).data(), &g, &mut db, m, k, n);
                    add_into(&mut grads[a.0], &da);
                    add_into(&mut grads[b.0], &db);
                }
                Op::BatchMatMul(a, b) => {
                    let (sa, sb) = (val(*a).shape(), val(*b).shape());
                    let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                    let (ad, bd) = (val(*a).data(), val(*b).data());
                    let mut da = vec![0.0; bs * m * k];
                    let mut db = vec![0.0; bs * k * n];
                    for j in 0..bs {
                        let gj = &g[j * m * n..(j + 1) * m * n];
                        gemm_nt(gj, &bd[j * k * n..(j + 1) * k * n], &mut da[j * m * k..(j + 1) * m * k], m, k, n);
                        gemm_tn(&ad[j * m * k..(j + 1) * m * k], gj, &mut db[j * k * n..(j + 1) * k * n], m, k, n);
                    }
                    add_into(&mut grads[a.0], &da);
                    add_into(&mut grads[b.0], &db);
                }
                Op::Transpose(x) => {
                    let s = node.value.shape();
                    let (batch, r, c) = match s {
                        [r, c] => (1, *r, *c),
                        [b, r, c] => (*b, *r, *c),
                        _ => unreachable!(),
                    };
                    add_into(&mut grads[x.0], &transpose_last2(&g, batch, r, c));
                }
                Op::SwapAxes12(x) => {
                    let s = node.value.shape();
                    add_into(&mut grads[x.0], &swap12(&g, s[0], s[1], s[2], s[3]));
                }
                Op::Reshape(x) => add_into(&mut grads[x.0], &g),
                Op::Add(a, b) => {
                    add_into(&mut grads[a.0], &g);
                    add_into(&mut grads[b.0], &g);
                }
                Op::Sub(a, b) => {
                    add_into(&mut grads[a.0], &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    add_into(&mut grads[b.0], &neg);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> = g.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                    let db: Vec<f64> = g.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                    add_into(&mut grads[a.0], &da);
                    add_into(&mut grads[b.0], &db);
                }
                Op::AddBias(x, b) => {
                    let n = val(*b).numel();
                    let mut db = vec![0.0; n];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % n] += gv;
                    }
                    add_into(&mut grads[x.0], &g);
                    add_into(&mut grads[b.0], &db);
                }
                Op::Affine(x, scale) => {
                    let dx: Vec<f64> = g.iter().map(|v| v * scale).collect();
                    add_into(&mut grads[x.0], &dx);
                }
                Op::Sigmoid(x) => {
                    let dx: Vec<f64> = g.iter().zip(node.value.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                    add_into(&mut grads[x.0], &dx);
                }
                Op::Tanh(x) => {
                    let dx: Vec<f64> = g.iter().zip(node.value.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                    add_into(&mut grads[x.0], &dx);
                }
                Op::Log(x) => {
                    let dx: Vec<f64> = g.iter().zip(val(*x).data()).map(|(g, v)| g / v).collect();
                    add_into(&mut grads[x.0], &dx);
                }
                Op::Clamp(x, lo, hi) => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(val(*x).data())
                        .map(|(g, v)| if v >= lo && v <= hi { *g } else { 0.0 })
                        .collect();
                    add_into(&mut grads[x.0], &dx);
                }
                Op::Softmax(x) => {
                    let c = node.value.cols();
                    let mut dx = vec![0.0; g.len()];
                    for ((gy, y), d) in g.chunks(c).zip(node.value.data().chunks(c)).zip(dx.chunks_mut(c)) {
                        let dot: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[j] = y[j] * (gy[j] - dot);
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
                Op::LogSoftmax(x) => {
                    let c = node.value.cols();
                    let mut dx = vec![0.0; g.len()];
                    for ((gy, y), d) in g.chunks(c).zip(node.value.data().chunks(c)).zip(dx.chunks_mut(c)) {
                        let total: f64 = gy.iter().sum();
                        for j in 0..c {
                            d[j] = gy[j] - y[j].exp() * total;
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
                Op::CausalMask(x) => {
                    let t = node.value.cols();
                    let dx: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(idx, gv)| if idx % t > (idx / t) % t { 0.0 } else { *gv })
                        .collect();
                    add_into(&mut grads[x.0], &dx);
                }
                Op::Sum(x) => {
                    let dx = vec![g[0]; val(*x).numel()];
                    add_into(&mut grads[x.0], &dx);
                }
                Op::Mean(x) => {
                    let n = val(*x).numel();
                    let dx = vec![g[0] / n as f64; n];
                    add_into(&mut grads[x.0], &dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let w = val(*gamma).numel();
                    let gm = val(*gamma).data();
                    let mut dx = vec![0.0; g.len()];
                    let mut dg = vec![0.0; w];
                    let mut db = vec![0.0; w];
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * w..(r + 1) * w];
                        let hr = &xhat[r * w..(r + 1) * w];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..w {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                            let dh = gr[j] * gm[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        let wf = w as f64;
                        for j in 0..w {
                            let dh = gr[j] * gm[j];
                            dx[r * w + j] = is / wf * (wf * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                    add_into(&mut grads[gamma.0], &dg);
                    add_into(&mut grads[beta.0], &db);
                }
                Op::GatherRows(x, rows) => {
                    let c = node.value.cols();
                    let mut dx = vec![0.0; val(*x).numel()];
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            dx[r * c + j] += g[k * c + j];
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
            }
        }
        Ok(())
    }
}
