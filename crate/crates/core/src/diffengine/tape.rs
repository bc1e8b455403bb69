//! Reverse-mode tape.
//!
//! Every forward op appends one node holding its value and the parents it
//! read. `backward` walks the nodes once in reverse insertion order, which
//! is a reverse topological order because parents always precede children.
//! Gradients are only propagated into nodes that require them, so a frozen
//! subgraph costs no weight-gradient work.

use std::rc::Rc;

use super::tensor::{split_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Padding policy for 1-D convolutions along time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    /// Left zero padding of `(K-1)*dilation`; output keeps the input length.
    Causal,
    /// No padding; output length is `T - (K-1)*dilation`.
    Valid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Linear(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    MixAxis { w: Var, x: Var, axis: usize },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sqrt(Var),
    MulConst(Var, Rc<Vec<f64>>),
    Conv1d { x: Var, w: Var, dilation: usize },
    Depthwise { x: Var, w: Var, dilation: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Pad { x: Var, axis: usize, before: usize },
    IndexSelect { x: Var, axis: usize, idx: Rc<Vec<usize>> },
    Reshape(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    BatchNorm { x: Var, inv_std: Vec<f64> },
    ChannelAffine { x: Var, scale: Vec<f64> },
    SymNormalize(Var),
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    L1Loss(Var, Rc<Tensor>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn check(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn conv_out_len(t: usize, k: usize, dilation: usize, mode: ConvMode) -> Option<usize> {
    match mode {
        ConvMode::Causal => Some(t),
        ConvMode::Valid => t.checked_sub((k - 1) * dilation).filter(|&n| n > 0),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        check(name, &value)?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn zip_with(&self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "add", |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "sub", |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "mul", |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push("scale", v, Op::Scale(a, c), &[a])
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let last = *tx.shape().last().unwrap_or(&1);
        if tb.numel() != last || tb.rank() != 1 {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} for input {:?}", tb.shape(), tx.shape()),
            ));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(last) {
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        self.push("add_bias", out, Op::AddBias(x, b), &[x, b])
    }

    /// `x[.., in] · wᵀ` with `w` of shape `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tw.rank() != 2 || tx.rank() == 0 || *tx.shape().last().unwrap() != tw.shape()[1] {
            return Err(Error::shape(
                "linear",
                format!("input {:?}, weight {:?}", tx.shape(), tw.shape()),
            ));
        }
        let (n_out, n_in) = (tw.shape()[0], tw.shape()[1]);
        let rows = tx.numel() / n_in;
        let mut out = vec![0.0; rows * n_out];
        let (xd, wd) = (tx.data(), tw.data());
        for m in 0..rows {
            let xr = &xd[m * n_in..(m + 1) * n_in];
            for o in 0..n_out {
                let wr = &wd[o * n_in..(o + 1) * n_in];
                out[m * n_out + o] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = n_out;
        let v = Tensor::new(&shape, out)?;
        self.push("linear", v, Op::Linear(x, w), &[x, w])
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let v = matmul_raw(ta, tb);
        self.push("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", ta.shape())));
        }
        let v = transpose_raw(ta);
        self.push("transpose", v, Op::Transpose(a), &[a])
    }

    /// Mixes positions along `axis`: `y[.., p, ..] = Σ_q w[p, q] x[.., q, ..]`.
    pub fn mix_axis(&mut self, w: Var, x: Var, axis: usize) -> Result<Var> {
        let (tw, tx) = (self.value(w), self.value(x));
        if tw.rank() != 2 || axis >= tx.rank() || tx.shape()[axis] != tw.shape()[1] {
            return Err(Error::shape(
                "mix_axis",
                format!("weight {:?}, input {:?}, axis {}", tw.shape(), tx.shape(), axis),
            ));
        }
        let (outer, n, inner) = split_axis(tx.shape(), axis);
        let m = tw.shape()[0];
        let mut out = vec![0.0; outer * m * inner];
        let (wd, xd) = (tw.data(), tx.data());
        for a in 0..outer {
            for p in 0..m {
                let orow = &mut out[(a * m + p) * inner..(a * m + p + 1) * inner];
                for q in 0..n {
                    let c = wd[p * n + q];
                    if c == 0.0 {
                        continue;
                    }
                    let xrow = &xd[(a * n + q) * inner..(a * n + q + 1) * inner];
                    for (o, &xv) in orow.iter_mut().zip(xrow) {
                        *o += c * xv;
                    }
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = m;
        let v = Tensor::new(&shape, out)?;
        self.push("mix_axis", v, Op::MixAxis { w, x, axis }, &[w, x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push("relu", v, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::tanh);
        self.push("tanh", v, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(x), &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.data().iter().any(|&v| v < 0.0) {
            return Err(Error::NonFinite("sqrt"));
        }
        let v = tx.map(f64::sqrt);
        self.push("sqrt", v, Op::Sqrt(x), &[x])
    }

    /// Elementwise product with a constant array (masks, dropout).
    pub fn mul_const(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let tx = self.value(x);
        if factors.len() != tx.numel() {
            return Err(Error::shape(
                "mul_const",
                format!("{} factors for {:?}", factors.len(), tx.shape()),
            ));
        }
        let data = tx.data().iter().zip(&factors).map(|(a, b)| a * b).collect();
        let v = Tensor::new(tx.shape(), data)?;
        self.push("mul_const", v, Op::MulConst(x, Rc::new(factors)), &[x])
    }

    /// Dilated 1-D convolution over `x: [N, T, C_in]` with `w: [K, C_in, C_out]`.
    /// `y[n, t, o] = Σ_k Σ_i w[k, i, o] · x[n, t - k·dilation, i]` (causal form).
    pub fn conv1d(&mut self, x: Var, w: Var, dilation: usize, mode: ConvMode) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 3 || tw.rank() != 3 || tw.shape()[1] != tx.shape()[2] || dilation == 0 {
            return Err(Error::shape(
                "conv1d",
                format!("input {:?}, weight {:?}, dilation {}", tx.shape(), tw.shape(), dilation),
            ));
        }
        let (n, t, ci) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (k, co) = (tw.shape()[0], tw.shape()[2]);
        let t_out = conv_out_len(t, k, dilation, mode).ok_or(Error::SequenceTooShort {
            got: t,
            need: (k - 1) * dilation + 1,
        })?;
        let shift = t - t_out;
        let mut out = vec![0.0; n * t_out * co];
        let (xd, wd) = (tx.data(), tw.data());
        for b in 0..n {
            for to in 0..t_out {
                let tt = to + shift;
                let orow = &mut out[(b * t_out + to) * co..(b * t_out + to + 1) * co];
                for kk in 0..k {
                    let lag = kk * dilation;
                    if lag > tt {
                        break;
                    }
                    let src = tt - lag;
                    let xrow = &xd[(b * t + src) * ci..(b * t + src + 1) * ci];
                    let wk = &wd[kk * ci * co..(kk + 1) * ci * co];
                    for (i, &xv) in xrow.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        for (o, &wv) in orow.iter_mut().zip(&wk[i * co..(i + 1) * co]) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
        let v = Tensor::new(&[n, t_out, co], out)?;
        self.push(
            "conv1d",
            v,
            Op::Conv1d { x, w, dilation },
            &[x, w],
        )
    }

    /// Per-channel dilated convolution over `x: [N, T, C]` with `w: [C_w, K]`,
    /// where `C_w` is `C` or 1 (one kernel shared by every channel).
    /// `y[n, t, c] = Σ_k w[c, k] · x[n, t - k·dilation, c]` (causal form).
    pub fn depthwise_conv(&mut self, x: Var, w: Var, dilation: usize, mode: ConvMode) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 3
            || tw.rank() != 2
            || !(tw.shape()[0] == tx.shape()[2] || tw.shape()[0] == 1)
            || dilation == 0
        {
            return Err(Error::shape(
                "depthwise_conv",
                format!("input {:?}, weight {:?}, dilation {}", tx.shape(), tw.shape(), dilation),
            ));
        }
        let (n, t, c) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (cw, k) = (tw.shape()[0], tw.shape()[1]);
        let t_out = conv_out_len(t, k, dilation, mode).ok_or(Error::SequenceTooShort {
            got: t,
            need: (k - 1) * dilation + 1,
        })?;
        let shift = t - t_out;
        let mut out = vec![0.0; n * t_out * c];
        let (xd, wd) = (tx.data(), tw.data());
        for b in 0..n {
            for to in 0..t_out {
                let tt = to + shift;
                for kk in 0..k {
                    let lag = kk * dilation;
                    if lag > tt {
                        break;
                    }
                    let src = tt - lag;
                    for ch in 0..c {
                        let wv = wd[(if cw == 1 { 0 } else { ch }) * k + kk];
                        out[(b * t_out + to) * c + ch] += wv * xd[(b * t + src) * c + ch];
                    }
                }
            }
        }
        let v = Tensor::new(&[n, t_out, c], out)?;
        self.push(
            "depthwise_conv",
            v,
            Op::Depthwise { x, w, dilation },
            &[x, w],
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {} for {:?}", axis, first)));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", s, first)));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for a in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let d = t.shape()[axis];
                out.extend_from_slice(&t.data()[a * d * inner..(a + 1) * d * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let v = Tensor::new(&shape, out)?;
        self.push(
            "concat",
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() || start + len > tx.shape()[axis] || len == 0 {
            return Err(Error::shape(
                "slice",
                format!("[{}, {}) on axis {} of {:?}", start, start + len, axis, tx.shape()),
            ));
        }
        let (outer, d, inner) = split_axis(tx.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for a in 0..outer {
            out.extend_from_slice(&tx.data()[(a * d + start) * inner..(a * d + start + len) * inner]);
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = len;
        let v = Tensor::new(&shape, out)?;
        self.push("slice", v, Op::Slice { x, axis, start }, &[x])
    }

    /// Zero padding along `axis`.
    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(Error::shape("pad", format!("axis {} for {:?}", axis, tx.shape())));
        }
        let (outer, d, inner) = split_axis(tx.shape(), axis);
        let nd = d + before + after;
        let mut out = vec![0.0; outer * nd * inner];
        for a in 0..outer {
            out[(a * nd + before) * inner..(a * nd + before + d) * inner]
                .copy_from_slice(&tx.data()[a * d * inner..(a + 1) * d * inner]);
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = nd;
        let v = Tensor::new(&shape, out)?;
        self.push("pad", v, Op::Pad { x, axis, before }, &[x])
    }

    pub fn index_select(&mut self, x: Var, axis: usize, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() || idx.iter().any(|&i| i >= tx.shape()[axis]) {
            return Err(Error::shape(
                "index_select",
                format!("indices out of range on axis {} of {:?}", axis, tx.shape()),
            ));
        }
        let (outer, d, inner) = split_axis(tx.shape(), axis);
        let mut out = Vec::with_capacity(outer * idx.len() * inner);
        for a in 0..outer {
            for &i in idx {
                out.extend_from_slice(&tx.data()[(a * d + i) * inner..(a * d + i + 1) * inner]);
            }
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = idx.len();
        let v = Tensor::new(&shape, out)?;
        self.push(
            "index_select",
            v,
            Op::IndexSelect {
                x,
                axis,
                idx: Rc::new(idx.to_vec()),
            },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(x), &[x])
    }

    /// Normalizes each last-axis vector to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().ok_or_else(|| Error::shape("layer_norm", "rank 0"))?;
        let mut out = tx.data().to_vec();
        let mut inv_std = Vec::with_capacity(tx.numel() / d.max(1));
        for row in out.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let v = Tensor::new(tx.shape(), out)?;
        self.push("layer_norm", v, Op::LayerNorm { x, inv_std }, &[x])
    }

    /// Batch normalization of `x: [M, C]` over the M rows using batch statistics.
    /// Returns the output together with the per-channel batch means and variances.
    pub fn batch_norm_train(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let tx = self.value(x);
        if tx.rank() != 2 || tx.shape()[0] == 0 {
            return Err(Error::shape("batch_norm", format!("{:?}", tx.shape())));
        }
        let (m, c) = (tx.shape()[0], tx.shape()[1]);
        let d = tx.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for r in 0..m {
            for j in 0..c {
                mean[j] += d[r * c + j];
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        for r in 0..m {
            for j in 0..c {
                let e = d[r * c + j] - mean[j];
                var[j] += e * e;
            }
        }
        var.iter_mut().for_each(|v| *v /= m as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = d.to_vec();
        for r in 0..m {
            for j in 0..c {
                out[r * c + j] = (out[r * c + j] - mean[j]) * inv_std[j];
            }
        }
        let v = Tensor::new(&[m, c], out)?;
        let var_out = self.push("batch_norm", v, Op::BatchNorm { x, inv_std }, &[x])?;
        Ok((var_out, mean, var))
    }

    /// `y[.., c] = (x[.., c] - shift[c]) * scale[c]` with constant coefficients.
    pub fn channel_affine(&mut self, x: Var, shift: &[f64], scale: &[f64]) -> Result<Var> {
        let tx = self.value(x);
        let c = *tx.shape().last().unwrap_or(&0);
        if shift.len() != c || scale.len() != c {
            return Err(Error::shape("channel_affine", format!("{:?}", tx.shape())));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(c) {
            for j in 0..c {
                row[j] = (row[j] - shift[j]) * scale[j];
            }
        }
        let v = Tensor::new(tx.shape(), out)?;
        self.push(
            "channel_affine",
            v,
            Op::ChannelAffine {
                x,
                scale: scale.to_vec(),
            },
            &[x],
        )
    }

    /// `D^{-1/2} (A + I) D^{-1/2}` with `D` the row sums of `A + I`.
    /// The self-loop weight is 1: any diagonal entry already in `A` is replaced, not added to.
    pub fn sym_normalize(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 || ta.shape()[0] != ta.shape()[1] {
            return Err(Error::shape("sym_normalize", format!("{:?}", ta.shape())));
        }
        let v = sym_normalize_raw(ta);
        self.push("sym_normalize", v, Op::SymNormalize(a), &[a])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push("sum", v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let v = Tensor::scalar(tx.sum() / tx.numel().max(1) as f64);
        self.push("mean", v, Op::Mean(x), &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).data().iter().map(|a| a * a).sum());
        self.push("sum_squares", v, Op::SumSquares(x), &[x])
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let s = self.sum_squares(x)?;
        self.sqrt(s)
    }

    /// Frobenius norm of a matrix.
    pub fn frobenius_norm(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rank() != 2 {
            return Err(Error::shape("frobenius_norm", format!("{:?}", self.value(x).shape())));
        }
        self.l2_norm(x)
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let tp = self.value(pred);
        same_shape("l1_loss", tp, target)?;
        let s: f64 = tp
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        let v = Tensor::scalar(s / tp.numel().max(1) as f64);
        self.push("l1_loss", v, Op::L1Loss(pred, Rc::new(target.clone())), &[pred])
    }

    /// Activation pattern of every non-smooth op on the tape (relu inputs,
    /// absolute-value residuals). Two evaluations with different patterns
    /// straddle a kink.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => sig.extend(self.value(*x).data().iter().map(|&v| v > 0.0)),
                Op::L1Loss(p, target) => sig.extend(
                    self.value(*p)
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(a, b)| a > b),
                ),
                _ => {}
            }
        }
        sig
    }

    /// Runs reverse accumulation from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |v: Var, t: Tensor| {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    acc(*a, elementwise(g, tb, |x, y| x * y));
                }
                if self.wants(*b) {
                    acc(*b, elementwise(g, ta, |x, y| x * y));
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    acc(*a, g.map(|v| v * c));
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    acc(*x, g.clone());
                }
                if self.wants(*b) {
                    let last = self.value(*b).numel();
                    let mut gb = vec![0.0; last];
                    for row in g.data().chunks(last) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(*b, Tensor::new(&[last], gb)?);
                }
            }
            Op::Linear(x, w) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n_out, n_in) = (tw.shape()[0], tw.shape()[1]);
                let rows = tx.numel() / n_in;
                let (gd, xd, wd) = (g.data(), tx.data(), tw.data());
                if self.wants(*x) {
                    let mut gx = vec![0.0; rows * n_in];
                    for m in 0..rows {
                        let gxr = &mut gx[m * n_in..(m + 1) * n_in];
                        for o in 0..n_out {
                            let go = gd[m * n_out + o];
                            if go == 0.0 {
                                continue;
                            }
                            for (a, &wv) in gxr.iter_mut().zip(&wd[o * n_in..(o + 1) * n_in]) {
                                *a += go * wv;
                            }
                        }
                    }
                    acc(*x, Tensor::new(tx.shape(), gx)?);
                }
                if self.wants(*w) {
                    let mut gw = vec![0.0; n_out * n_in];
                    for m in 0..rows {
                        let xr = &xd[m * n_in..(m + 1) * n_in];
                        for o in 0..n_out {
                            let go = gd[m * n_out + o];
                            if go == 0.0 {
                                continue;
                            }
                            for (a, &xv) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(xr) {
                                *a += go * xv;
                            }
                        }
                    }
                    acc(*w, Tensor::new(tw.shape(), gw)?);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    acc(*a, matmul_raw(g, &transpose_raw(tb)));
                }
                if self.wants(*b) {
                    acc(*b, matmul_raw(&transpose_raw(ta), g));
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    acc(*a, transpose_raw(g));
                }
            }
            Op::MixAxis { w, x, axis } => {
                let (tw, tx) = (self.value(*w), self.value(*x));
                let (outer, n, inner) = split_axis(tx.shape(), *axis);
                let m = tw.shape()[0];
                let (wd, xd, gd) = (tw.data(), tx.data(), g.data());
                if self.wants(*x) {
                    let mut gx = vec![0.0; tx.numel()];
                    for a in 0..outer {
                        for p in 0..m {
                            let grow = &gd[(a * m + p) * inner..(a * m + p + 1) * inner];
                            for q in 0..n {
                                let c = wd[p * n + q];
                                if c == 0.0 {
                                    continue;
                                }
                                let gxr = &mut gx[(a * n + q) * inner..(a * n + q + 1) * inner];
                                for (o, &gv) in gxr.iter_mut().zip(grow) {
                                    *o += c * gv;
                                }
                            }
                        }
                    }
                    acc(*x, Tensor::new(tx.shape(), gx)?);
                }
                if self.wants(*w) {
                    let mut gw = vec![0.0; m * n];
                    for a in 0..outer {
                        for p in 0..m {
                            let grow = &gd[(a * m + p) * inner..(a * m + p + 1) * inner];
                            for q in 0..n {
                                let xrow = &xd[(a * n + q) * inner..(a * n + q + 1) * inner];
                                gw[p * n + q] += grow.iter().zip(xrow).map(|(u, v)| u * v).sum::<f64>();
                            }
                        }
                    }
                    acc(*w, Tensor::new(tw.shape(), gw)?);
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    acc(*x, elementwise(g, self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
                }
            }
            Op::Tanh(x) => {
                if self.wants(*x) {
                    acc(*x, elementwise(g, out, |gv, y| gv * (1.0 - y * y)));
                }
            }
            Op::Sigmoid(x) => {
                if self.wants(*x) {
                    acc(*x, elementwise(g, out, |gv, y| gv * y * (1.0 - y)));
                }
            }
            Op::Sqrt(x) => {
                if self.wants(*x) {
                    acc(*x, elementwise(g, out, |gv, y| if y > 0.0 { gv * 0.5 / y } else { 0.0 }));
                }
            }
            Op::MulConst(x, f) => {
                if self.wants(*x) {
                    let data = g.data().iter().zip(f.iter()).map(|(a, b)| a * b).collect();
                    acc(*x, Tensor::new(g.shape(), data)?);
                }
            }
            Op::Conv1d { x, w, dilation } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, t, ci) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (k, co) = (tw.shape()[0], tw.shape()[2]);
                let t_out = out.shape()[1];
                let shift = t - t_out;
                let (xd, wd, gd) = (tx.data(), tw.data(), g.data());
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let mut gx = if want_x { vec![0.0; tx.numel()] } else { Vec::new() };
                let mut gw = if want_w { vec![0.0; tw.numel()] } else { Vec::new() };
                for b in 0..n {
                    for to in 0..t_out {
                        let tt = to + shift;
                        let grow = &gd[(b * t_out + to) * co..(b * t_out + to + 1) * co];
                        for kk in 0..k {
                            let lag = kk * dilation;
                            if lag > tt {
                                break;
                            }
                            let src = tt - lag;
                            let base = (b * t + src) * ci;
                            let wk = &wd[kk * ci * co..(kk + 1) * ci * co];
                            for i in 0..ci {
                                let wrow = &wk[i * co..(i + 1) * co];
                                if want_x {
                                    gx[base + i] += grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                                }
                                if want_w {
                                    let xv = xd[base + i];
                                    if xv != 0.0 {
                                        let gwr = &mut gw[(kk * ci + i) * co..(kk * ci + i + 1) * co];
                                        for (o, &gv) in gwr.iter_mut().zip(grow) {
                                            *o += xv * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if want_x {
                    acc(*x, Tensor::new(tx.shape(), gx)?);
                }
                if want_w {
                    acc(*w, Tensor::new(tw.shape(), gw)?);
                }
            }
            Op::Depthwise { x, w, dilation } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, t, c) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (cw, k) = (tw.shape()[0], tw.shape()[1]);
                let t_out = out.shape()[1];
                let shift = t - t_out;
                let (xd, wd, gd) = (tx.data(), tw.data(), g.data());
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let mut gx = if want_x { vec![0.0; tx.numel()] } else { Vec::new() };
                let mut gw = if want_w { vec![0.0; tw.numel()] } else { Vec::new() };
                for b in 0..n {
                    for to in 0..t_out {
                        let tt = to + shift;
                        for kk in 0..k {
                            let lag = kk * dilation;
                            if lag > tt {
                                break;
                            }
                            let src = tt - lag;
                            for ch in 0..c {
                                let widx = (if cw == 1 { 0 } else { ch }) * k + kk;
                                let gv = gd[(b * t_out + to) * c + ch];
                                if want_x {
                                    gx[(b * t + src) * c + ch] += gv * wd[widx];
                                }
                                if want_w {
                                    gw[widx] += gv * xd[(b * t + src) * c + ch];
                                }
                            }
                        }
                    }
                }
                if want_x {
                    acc(*x, Tensor::new(tx.shape(), gx)?);
                }
                if want_w {
                    acc(*w, Tensor::new(tw.shape(), gw)?);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let d = tp.shape()[*axis];
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(tp.numel());
                        for a in 0..outer {
                            gp.extend_from_slice(
                                &g.data()[(a * total + offset) * inner..(a * total + offset + d) * inner],
                            );
                        }
                        acc(p, Tensor::new(tp.shape(), gp)?);
                    }
                    offset += d;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    let (outer, d, inner) = split_axis(tx.shape(), *axis);
                    let len = out.shape()[*axis];
                    let mut gx = vec![0.0; tx.numel()];
                    for a in 0..outer {
                        gx[(a * d + start) * inner..(a * d + start + len) * inner]
                            .copy_from_slice(&g.data()[a * len * inner..(a + 1) * len * inner]);
                    }
                    acc(*x, Tensor::new(tx.shape(), gx)?);
                }
            }
            Op::Pad { x, axis, before } => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    let (outer, d, inner) = split_axis(tx.shape(), *axis);
                    let nd = out.shape()[*axis];
                    let mut gx = Vec::with_capacity(tx.numel());
                    for a in 0..outer {
                        gx.extend_from_slice(&g.data()[(a * nd + before) * inner..(a * nd + before + d) * inner]);
                    }
                    acc(*x, Tensor::new(tx.shape(), gx)?);
                }
            }
            Op::IndexSelect { x, axis, idx } => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    let (outer, d, inner) = split_axis(tx.shape(), *axis);
                    let m = idx.len();
                    let mut gx = vec![0.0; tx.numel()];
                    for a in 0..outer {
                        for (j, &src) in idx.iter().enumerate() {
                            let grow = &g.data()[(a * m + j) * inner..(a * m + j + 1) * inner];
                            for (o, v) in gx[(a * d + src) * inner..(a * d + src + 1) * inner]
                                .iter_mut()
                                .zip(grow)
                            {
                                *o += v;
                            }
                        }
                    }
                    acc(*x, Tensor::new(tx.shape(), gx)?);
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    acc(*x, g.clone().reshape(self.value(*x).shape())?);
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if self.wants(*x) {
                    let d = *out.shape().last().unwrap();
                    let mut gx = vec![0.0; out.numel()];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let y = &out.data()[r * d..(r + 1) * d];
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let mg = gr.iter().sum::<f64>() / d as f64;
                        let mgy = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = is * (gr[j] - mg - y[j] * mgy);
                        }
                    }
                    acc(*x, Tensor::new(out.shape(), gx)?);
                }
            }
            Op::BatchNorm { x, inv_std } => {
                if self.wants(*x) {
                    let (m, c) = (out.shape()[0], out.shape()[1]);
                    let (y, gd) = (out.data(), g.data());
                    let mut mg = vec![0.0; c];
                    let mut mgy = vec![0.0; c];
                    for r in 0..m {
                        for j in 0..c {
                            mg[j] += gd[r * c + j];
                            mgy[j] += gd[r * c + j] * y[r * c + j];
                        }
                    }
                    let mut gx = vec![0.0; m * c];
                    for r in 0..m {
                        for j in 0..c {
                            gx[r * c + j] = inv_std[j]
                                * (gd[r * c + j] - mg[j] / m as f64 - y[r * c + j] * mgy[j] / m as f64);
                        }
                    }
                    acc(*x, Tensor::new(&[m, c], gx)?);
                }
            }
            Op::ChannelAffine { x, scale } => {
                if self.wants(*x) {
                    let c = scale.len();
                    let mut gx = g.data().to_vec();
                    for row in gx.chunks_mut(c) {
                        for j in 0..c {
                            row[j] *= scale[j];
                        }
                    }
                    acc(*x, Tensor::new(g.shape(), gx)?);
                }
            }
            Op::SymNormalize(a) => {
                if self.wants(*a) {
                    let ta = self.value(*a);
                    let n = ta.shape()[0];
                    let ad = ta.data();
                    let b = |i: usize, j: usize| if i == j { 1.0 } else { ad[i * n + j] };
                    let deg: Vec<f64> = (0..n).map(|i| (0..n).map(|j| b(i, j)).sum()).collect();
                    let s: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
                    let gd = g.data();
                    let mut gs = vec![0.0; n];
                    for i in 0..n {
                        for j in 0..n {
                            let gij = gd[i * n + j];
                            gs[i] += gij * b(i, j) * s[j];
                            gs[j] += gij * s[i] * b(i, j);
                        }
                    }
                    let gdeg: Vec<f64> = (0..n).map(|i| gs[i] * -0.5 * s[i] / deg[i]).collect();
                    let mut ga = vec![0.0; n * n];
                    for i in 0..n {
                        for j in 0..n {
                            if i != j {
                                ga[i * n + j] = gd[i * n + j] * s[i] * s[j] + gdeg[i];
                            }
                        }
                    }
                    acc(*a, Tensor::new(&[n, n], ga)?);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    acc(*x, Tensor::full(self.value(*x).shape(), g.item()));
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    acc(*x, Tensor::full(tx.shape(), g.item() / tx.numel().max(1) as f64));
                }
            }
            Op::SumSquares(x) => {
                if self.wants(*x) {
                    let gv = g.item();
                    acc(*x, self.value(*x).map(|v| 2.0 * v * gv));
                }
            }
            Op::L1Loss(p, target) => {
                if self.wants(*p) {
                    let tp = self.value(*p);
                    let c = g.item() / tp.numel().max(1) as f64;
                    let data = tp
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(a, b)| {
                            let d = a - b;
                            if d > 0.0 {
                                c
                            } else if d < 0.0 {
                                -c
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    acc(*p, Tensor::new(tp.shape(), data)?);
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out).expect("matmul shape")
}

pub(crate) fn transpose_raw(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(&[n, m], out).expect("transpose shape")
}

pub(crate) fn sym_normalize_raw(a: &Tensor) -> Tensor {
    let n = a.shape()[0];
    let ad = a.data();
    let mut out = vec![0.0; n * n];
    let b = |i: usize, j: usize| if i == j { 1.0 } else { ad[i * n + j] };
    let deg: Vec<f64> = (0..n).map(|i| (0..n).map(|j| b(i, j)).sum()).collect();
    for i in 0..n {
        for j in 0..n {
            let b = b(i, j);
            out[i * n + j] = b / (deg[i].sqrt() * deg[j].sqrt());
        }
    }
    Tensor::new(&[n, n], out).expect("square")
}
