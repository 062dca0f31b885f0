//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its output value and
//! whatever the backward pass needs. Nodes are appended in evaluation order, so
//! walking the tape backwards is a valid topological order.

use std::collections::HashMap;

use rand::Rng;

use super::kernels::{self, gemm};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    BroadcastCols(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    LayerNormChannels {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Relu(Var),
    Gelu {
        x: Var,
        cdf: Vec<f64>,
    },
    Sigmoid(Var),
    Tanh(Var),
    Depthwise {
        x: Var,
        kernel: Var,
    },
    Pointwise {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    DropPath(Var, f64),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Stack(Vec<Var>),
    Select {
        x: Var,
        index: usize,
    },
    Reshape(Var),
    PadKernel(Var),
    Sum(Var),
    Mean(Var),
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    Mse(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Recording of one forward evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::InvalidArgument(format!(
            "{op} expects a rank-{rank} tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(Node {
            value,
            op,
            requires_grad,
            param: None,
        })
    }

    fn push_node(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. Gradients are only propagated towards leaves that
    /// require them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_node(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param: None,
        })
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push_node(Node {
            value: store.value(id).clone(),
            op: Op::Leaf,
            requires_grad: true,
            param: Some(id),
        });
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`Graph::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        expect_rank("matmul", ta, 2)?;
        expect_rank("matmul", tb, 2)?;
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        if tb.shape()[0] != k {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        expect_rank("transpose", t, 2)?;
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data()[i * n + j];
            }
        }
        Ok(self.push(Tensor::new([n, m], out)?, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let out = Tensor::new(ta.shape(), zip_map(ta.data(), tb.data(), |x, y| x + y))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let out = Tensor::new(ta.shape(), zip_map(ta.data(), tb.data(), |x, y| x - y))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let out = Tensor::new(ta.shape(), zip_map(ta.data(), tb.data(), |x, y| x * y))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::from_fn(t.shape(), |i| t.data()[i] * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::from_fn(t.shape(), |i| t.data()[i] + s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// Adds `row` (any shape with as many elements as the last extent of `x`)
    /// to every trailing vector of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let n = *tx.shape().last().unwrap();
        if tr.len() != n {
            return Err(Error::shape("add_row", tx.shape(), tr.shape()));
        }
        let r = tr.data();
        let out = Tensor::from_fn(tx.shape(), |i| tx.data()[i] + r[i % n]);
        Ok(self.push(out, Op::AddRow(x, row), &[x, row]))
    }

    /// Repeats a length-`n` vector into an `n × cols` matrix.
    pub fn broadcast_cols(&mut self, v: Var, cols: usize) -> Var {
        let t = self.value(v);
        let n = t.len();
        let out = Tensor::from_fn([n, cols], |i| t.data()[i / cols]);
        self.push(out, Op::BroadcastCols(v), &[v])
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        expect_rank("softmax_rows", t, 2)?;
        let c = t.shape()[1];
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let inv = 1.0 / sum;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        Ok(self.push(Tensor::new(t.shape(), out)?, Op::Softmax(x), &[x]))
    }

    /// Normalizes every trailing vector of length `d`, then applies the
    /// affine `gain`/`bias` (both of length `d`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = *tx.shape().last().unwrap();
        if tg.len() != d || tb.len() != d {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.len() / d;
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let v = &tx.data()[r * d..(r + 1) * d];
            let mean = v.iter().sum::<f64>() / d as f64;
            let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (v[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Layer norm across the channel axis of a `C×H×W` map, independently at
    /// every spatial location, with per-channel affine.
    pub fn layer_norm_channels(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        expect_rank("layer_norm_channels", tx, 3)?;
        let c = tx.shape()[0];
        let p = tx.shape()[1] * tx.shape()[2];
        if tg.len() != c || tb.len() != c {
            return Err(Error::shape("layer_norm_channels", tx.shape(), tg.shape()));
        }
        let xd = tx.data();
        let mut mean = vec![0.0; p];
        for ch in 0..c {
            for (m, v) in mean.iter_mut().zip(&xd[ch * p..(ch + 1) * p]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= c as f64);
        let mut var = vec![0.0; p];
        for ch in 0..c {
            for ((s, v), m) in var.iter_mut().zip(&xd[ch * p..(ch + 1) * p]).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let rstd: Vec<f64> = var
            .iter()
            .map(|s| 1.0 / (s / c as f64 + eps).sqrt())
            .collect();
        let mut xhat = vec![0.0; tx.len()];
        let mut out = vec![0.0; tx.len()];
        for ch in 0..c {
            let (g, b) = (tg.data()[ch], tb.data()[ch]);
            let src = &xd[ch * p..(ch + 1) * p];
            let xh = &mut xhat[ch * p..(ch + 1) * p];
            let o = &mut out[ch * p..(ch + 1) * p];
            for i in 0..p {
                xh[i] = (src[i] - mean[i]) * rstd[i];
                o[i] = xh[i] * g + b;
            }
        }
        let out = Tensor::new(tx.shape(), out)?;
        Ok(self.push(
            out,
            Op::LayerNormChannels {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// `max(x, 0)`, letting NaN through so failures stay visible.
    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(t.shape(), |i| {
            let v = t.data()[i];
            if v < 0.0 {
                0.0
            } else {
                v
            }
        });
        self.push(out, Op::Relu(x), &[x])
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cdf: Vec<f64> = t.data().iter().map(|&v| kernels::normal_cdf(v)).collect();
        let out = Tensor::from_fn(t.shape(), |i| t.data()[i] * cdf[i]);
        self.push(out, Op::Gelu { x, cdf }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(t.shape(), |i| {
            let v = t.data()[i];
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(t.shape(), |i| t.data()[i].tanh());
        self.push(out, Op::Tanh(x), &[x])
    }

    /// Depthwise "same" convolution of `x` (`C×H×W`) with `kernel`
    /// (`C×k×k`, `k` odd).
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        expect_rank("depthwise_conv2d", tx, 3)?;
        expect_rank("depthwise_conv2d", tk, 3)?;
        let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let k = tk.shape()[1];
        if tk.shape()[2] != k || k % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "depthwise kernel must be square with odd size, got {:?}",
                tk.shape()
            )));
        }
        if tk.shape()[0] != c {
            return Err(Error::shape("depthwise_conv2d", tx.shape(), tk.shape()));
        }
        let mut out = vec![0.0; tx.len()];
        kernels::depthwise_forward(tx.data(), tk.data(), c, h, w, k, &mut out);
        let out = Tensor::new(tx.shape(), out)?;
        Ok(self.push(out, Op::Depthwise { x, kernel }, &[x, kernel]))
    }

    /// Per-pixel linear map across channels: `w` is `C_out×C_in`, `b` is
    /// `C_out`.
    pub fn pointwise_conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        expect_rank("pointwise_conv2d", tx, 3)?;
        expect_rank("pointwise_conv2d", tw, 2)?;
        let (cin, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let cout = tw.shape()[0];
        if tw.shape()[1] != cin || tb.len() != cout {
            return Err(Error::shape("pointwise_conv2d", tx.shape(), tw.shape()));
        }
        let p = h * wd;
        let mut out = vec![0.0; cout * p];
        for (o, &bv) in out.chunks_mut(p).zip(tb.data()) {
            o.fill(bv);
        }
        gemm(cout, cin, p, tw.data(), false, tx.data(), false, &mut out, 1.0);
        let out = Tensor::new([cout, h, wd], out)?;
        Ok(self.push(out, Op::Pointwise { x, w, b }, &[x, w, b]))
    }

    /// Dense 2-D convolution: `x` is `C_in×H×W`, `w` is `C_out×C_in×k×k`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        expect_rank("conv2d", tx, 3)?;
        expect_rank("conv2d", tw, 4)?;
        let (cin, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (cout, k) = (tw.shape()[0], tw.shape()[2]);
        if tw.shape()[1] != cin || tw.shape()[3] != k || tb.len() != cout || stride == 0 {
            return Err(Error::shape("conv2d", tx.shape(), tw.shape()));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape("conv2d", tx.shape(), tw.shape()));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let cols = kernels::im2col(tx.data(), cin, h, wd, k, stride, pad, ho, wo);
        let p = ho * wo;
        let mut out = vec![0.0; cout * p];
        for (o, &bv) in out.chunks_mut(p).zip(tb.data()) {
            o.fill(bv);
        }
        gemm(cout, cin * k * k, p, tw.data(), false, &cols, false, &mut out, 1.0);
        let out = Tensor::new([cout, ho, wo], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            &[x, w, b],
        ))
    }

    /// Stochastic depth on a residual branch. In training mode the whole
    /// branch is zeroed with probability `gamma`, otherwise scaled by
    /// `1 / (1 - gamma)`; in eval mode (or with `gamma == 0`) it is the
    /// identity and no node is recorded.
    pub fn drop_path(
        &mut self,
        x: Var,
        gamma: f64,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidArgument(format!(
                "drop-path ratio must lie in [0, 1), got {gamma}"
            )));
        }
        if !training || gamma == 0.0 {
            return Ok(x);
        }
        let keep = rng.random::<f64>() >= gamma;
        let factor = if keep { 1.0 / (1.0 - gamma) } else { 0.0 };
        let t = self.value(x);
        let out = Tensor::from_fn(t.shape(), |i| t.data()[i] * factor);
        Ok(self.push(out, Op::DropPath(x, factor), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        expect_rank("slice_cols", t, 2)?;
        let (m, n) = (t.shape()[0], t.shape()[1]);
        if start + len > n || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "column slice {start}..{} out of range for {n} columns",
                start + len
            )));
        }
        let out = Tensor::from_fn([m, len], |i| t.data()[(i / len) * n + start + i % len]);
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            expect_rank("concat_cols", t, 2)?;
            if t.shape()[0] != m {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), t.shape()));
            }
            widths.push(t.shape()[1]);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            for i in 0..m {
                out[i * n + off..i * n + off + w].copy_from_slice(t.row(i));
            }
            off += w;
        }
        Ok(self.push(Tensor::new([m, n], out)?, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.value(parts[0]).len());
        for &p in parts {
            let t = self.value(p);
            if t.shape() != first.as_slice() {
                return Err(Error::shape("stack", &first, t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first);
        Ok(self.push(Tensor::new(shape, data)?, Op::Stack(parts.to_vec()), parts))
    }

    /// Slice `index` along the leading axis.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 2 || index >= t.shape()[0] {
            return Err(Error::InvalidArgument(format!(
                "cannot select {index} from shape {:?}",
                t.shape()
            )));
        }
        let inner: usize = t.shape()[1..].iter().product();
        let out = Tensor::new(
            t.shape()[1..].to_vec(),
            t.data()[index * inner..(index + 1) * inner].to_vec(),
        )?;
        Ok(self.push(out, Op::Select { x, index }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Zero-pads each `k×k` slice of a `C×k×k` kernel to `size×size`, centered.
    pub fn pad_kernel(&mut self, kernel: Var, size: usize) -> Result<Var> {
        let t = self.value(kernel);
        expect_rank("pad_kernel", t, 3)?;
        let (c, k) = (t.shape()[0], t.shape()[1]);
        if size < k || (size - k) % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot center a {k}x{k} kernel in {size}x{size}"
            )));
        }
        let off = (size - k) / 2;
        let mut out = vec![0.0; c * size * size];
        for ch in 0..c {
            for y in 0..k {
                for x in 0..k {
                    out[(ch * size + y + off) * size + x + off] = t.data()[(ch * k + y) * k + x];
                }
            }
        }
        Ok(self.push(Tensor::new([c, size, size], out)?, Op::PadKernel(kernel), &[kernel]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// `Σ weights ⊙ x` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if weights.len() != t.len() {
            return Err(Error::shape("weighted_sum", t.shape(), &[weights.len()]));
        }
        let s = t.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, &[x]))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mse", ta, tb)?;
        let s = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / ta.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), &[a, b]))
    }

    /// Computes gradients of the scalar `loss` with respect to every node on
    /// a path to a leaf that requires them. Previous graph-level gradients
    /// are discarded; use [`Graph::accumulate_param_grads`] to sum them into a
    /// parameter store.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let Graph { nodes, grads, .. } = self;
        grads.iter_mut().for_each(|g| *g = None);
        if !nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(nodes, grads, i, &g);
        }
        Ok(())
    }

    /// Adds leaf gradients of parameters into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for node_grad in self.nodes.iter().zip(&self.grads) {
            if let (Node { param: Some(id), .. }, Some(g)) = node_grad {
                for (dst, src) in store.get_mut(*id).grad.iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
    }

    /// [`Graph::backward`] followed by [`Graph::accumulate_param_grads`].
    pub fn backward_params(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward(loss)?;
        self.accumulate_param_grads(store);
        Ok(())
    }
}

/// Returns the gradient buffer of `v`, allocating zeros on first touch, or
/// `None` when `v` does not need a gradient.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let val = |v: Var| &nodes[v.0].value;
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if let Some(ga) = slot(nodes, grads, *a) {
                gemm(m, n, k, g, false, tb.data(), true, ga, 1.0);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gemm(k, m, n, ta.data(), true, g, false, gb, 1.0);
            }
        }
        Op::Transpose(a) => {
            let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
            if let Some(ga) = slot(nodes, grads, *a) {
                for r in 0..m {
                    for c in 0..n {
                        ga[r * n + c] += g[c * m + r];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                axpy(ga, g, 1.0);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                axpy(gb, g, 1.0);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                axpy(ga, g, 1.0);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                axpy(gb, g, -1.0);
            }
        }
        Op::Mul(a, b) => {
            let (da, db) = (val(*a).data(), val(*b).data());
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, gv), y) in ga.iter_mut().zip(g).zip(db) {
                    *d += gv * y;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((d, gv), x) in gb.iter_mut().zip(g).zip(da) {
                    *d += gv * x;
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                axpy(ga, g, *s);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                axpy(ga, g, 1.0);
            }
        }
        Op::AddRow(x, r) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                axpy(gx, g, 1.0);
            }
            if let Some(gr) = slot(nodes, grads, *r) {
                let n = gr.len();
                for chunk in g.chunks(n) {
                    axpy(gr, chunk, 1.0);
                }
            }
        }
        Op::BroadcastCols(v) => {
            let cols = out.shape()[1];
            if let Some(gv) = slot(nodes, grads, *v) {
                for (d, chunk) in gv.iter_mut().zip(g.chunks(cols)) {
                    *d += chunk.iter().sum::<f64>();
                }
            }
        }
        Op::Softmax(x) => {
            let c = out.shape()[1];
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((dst, y), gy) in gx.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c)) {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dst[j] += y[j] * (gy[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = val(*gain).len();
            let gn = val(*gain).data().to_vec();
            if let Some(gb) = slot(nodes, grads, *bias) {
                for chunk in g.chunks(d) {
                    axpy(gb, chunk, 1.0);
                }
            }
            if let Some(gg) = slot(nodes, grads, *gain) {
                for (gc, hc) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += gc[j] * hc[j];
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let mut dh = vec![0.0; d];
                for (r, ((dst, gc), hc)) in gx
                    .chunks_mut(d)
                    .zip(g.chunks(d))
                    .zip(xhat.chunks(d))
                    .enumerate()
                {
                    for j in 0..d {
                        dh[j] = gc[j] * gn[j];
                    }
                    let m1 = dh.iter().sum::<f64>() / d as f64;
                    let m2 = dh.iter().zip(hc).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dst[j] += rstd[r] * (dh[j] - m1 - hc[j] * m2);
                    }
                }
            }
        }
        Op::LayerNormChannels {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let c = val(*gain).len();
            let p = rstd.len();
            let gn = val(*gain).data().to_vec();
            if let Some(gb) = slot(nodes, grads, *bias) {
                for ch in 0..c {
                    gb[ch] += g[ch * p..(ch + 1) * p].iter().sum::<f64>();
                }
            }
            if let Some(gg) = slot(nodes, grads, *gain) {
                for ch in 0..c {
                    gg[ch] += g[ch * p..(ch + 1) * p]
                        .iter()
                        .zip(&xhat[ch * p..(ch + 1) * p])
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let mut m1 = vec![0.0; p];
                let mut m2 = vec![0.0; p];
                for ch in 0..c {
                    let gc = &g[ch * p..(ch + 1) * p];
                    let hc = &xhat[ch * p..(ch + 1) * p];
                    for i in 0..p {
                        let dh = gc[i] * gn[ch];
                        m1[i] += dh;
                        m2[i] += dh * hc[i];
                    }
                }
                let inv_c = 1.0 / c as f64;
                for ch in 0..c {
                    let gc = &g[ch * p..(ch + 1) * p];
                    let hc = &xhat[ch * p..(ch + 1) * p];
                    let dst = &mut gx[ch * p..(ch + 1) * p];
                    for i in 0..p {
                        let dh = gc[i] * gn[ch];
                        dst[i] += rstd[i] * (dh - m1[i] * inv_c - hc[i] * m2[i] * inv_c);
                    }
                }
            }
        }
        Op::Relu(x) => {
            let xd = val(*x).data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((d, gv), v) in gx.iter_mut().zip(g).zip(xd) {
                    if *v > 0.0 {
                        *d += gv;
                    }
                }
            }
        }
        Op::Gelu { x, cdf } => {
            let xd = val(*x).data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (((d, gv), v), c) in gx.iter_mut().zip(g).zip(xd).zip(cdf) {
                    *d += gv * (c + v * kernels::normal_pdf(*v));
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((d, gv), y) in gx.iter_mut().zip(g).zip(out.data()) {
                    *d += gv * y * (1.0 - y);
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((d, gv), y) in gx.iter_mut().zip(g).zip(out.data()) {
                    *d += gv * (1.0 - y * y);
                }
            }
        }
        Op::Depthwise { x, kernel } => {
            let (tx, tk) = (val(*x), val(*kernel));
            let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
            let k = tk.shape()[1];
            // Two disjoint slots are needed at once; take one out temporarily.
            let mut gk_buf = if nodes[kernel.0].requires_grad {
                Some(grads[kernel.0].take().unwrap_or_else(|| vec![0.0; tk.len()]))
            } else {
                None
            };
            let gx = slot(nodes, grads, *x).map(|v| v.as_mut_slice());
            kernels::depthwise_backward(
                tx.data(),
                tk.data(),
                g,
                c,
                h,
                w,
                k,
                gx,
                gk_buf.as_deref_mut(),
            );
            if let Some(buf) = gk_buf {
                grads[kernel.0] = Some(buf);
            }
        }
        Op::Pointwise { x, w, b } => {
            let (tx, tw) = (val(*x), val(*w));
            let (cin, cout) = (tx.shape()[0], tw.shape()[0]);
            let p = tx.len() / cin;
            if let Some(gb) = slot(nodes, grads, *b) {
                for (d, chunk) in gb.iter_mut().zip(g.chunks(p)) {
                    *d += chunk.iter().sum::<f64>();
                }
            }
            if let Some(gw) = slot(nodes, grads, *w) {
                gemm(cout, p, cin, g, false, tx.data(), true, gw, 1.0);
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                gemm(cin, cout, p, tw.data(), true, g, false, gx, 1.0);
            }
        }
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
            cols,
        } => {
            let (tx, tw) = (val(*x), val(*w));
            let (cin, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
            let (cout, k) = (tw.shape()[0], tw.shape()[2]);
            let (ho, wo) = (out.shape()[1], out.shape()[2]);
            let p = ho * wo;
            let kk = cin * k * k;
            if let Some(gb) = slot(nodes, grads, *b) {
                for (d, chunk) in gb.iter_mut().zip(g.chunks(p)) {
                    *d += chunk.iter().sum::<f64>();
                }
            }
            if let Some(gw) = slot(nodes, grads, *w) {
                gemm(cout, p, kk, g, false, cols, true, gw, 1.0);
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let mut gcols = vec![0.0; kk * p];
                gemm(kk, cout, p, tw.data(), true, g, false, &mut gcols, 0.0);
                kernels::col2im(&gcols, cin, h, wd, k, *stride, *pad, ho, wo, gx);
            }
        }
        Op::DropPath(x, factor) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                axpy(gx, g, *factor);
            }
        }
        Op::SliceCols { x, start } => {
            let n = val(*x).shape()[1];
            let len = out.shape()[1];
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, chunk) in g.chunks(len).enumerate() {
                    axpy(&mut gx[r * n + start..r * n + start + len], chunk, 1.0);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let n = out.shape()[1];
            let mut off = 0;
            for p in parts {
                let w = val(*p).shape()[1];
                if let Some(gp) = slot(nodes, grads, *p) {
                    for (r, dst) in gp.chunks_mut(w).enumerate() {
                        axpy(dst, &g[r * n + off..r * n + off + w], 1.0);
                    }
                }
                off += w;
            }
        }
        Op::Stack(parts) => {
            let inner = val(parts[0]).len();
            for (j, p) in parts.iter().enumerate() {
                if let Some(gp) = slot(nodes, grads, *p) {
                    axpy(gp, &g[j * inner..(j + 1) * inner], 1.0);
                }
            }
        }
        Op::Select { x, index } => {
            let inner = out.len();
            if let Some(gx) = slot(nodes, grads, *x) {
                axpy(&mut gx[index * inner..(index + 1) * inner], g, 1.0);
            }
        }
        Op::PadKernel(kv) => {
            let (c, k) = (val(*kv).shape()[0], val(*kv).shape()[1]);
            let size = out.shape()[1];
            let off = (size - k) / 2;
            if let Some(gk) = slot(nodes, grads, *kv) {
                for ch in 0..c {
                    for y in 0..k {
                        for x in 0..k {
                            gk[(ch * k + y) * k + x] += g[(ch * size + y + off) * size + x + off];
                        }
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let s = g[0] / gx.len() as f64;
                gx.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::WeightedSum { x, weights } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                axpy(gx, weights, g[0]);
            }
        }
        Op::Mse(a, b) => {
            let (da, db) = (val(*a).data(), val(*b).data());
            let s = 2.0 * g[0] / da.len() as f64;
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, x), y) in ga.iter_mut().zip(da).zip(db) {
                    *d += s * (x - y);
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((d, x), y) in gb.iter_mut().zip(da).zip(db) {
                    *d -= s * (x - y);
                }
            }
        }
    }
}
