//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] is a Wengert list: every op appends a node holding its output
//! value plus whatever the backward pass needs. Nodes are only ever appended,
//! so node order is a topological order and [`Tape::backward`] is a single
//! reverse sweep.
//!
//! Shape rules (all tensors row-major):
//!
//! | op | inputs | output |
//! |----|--------|--------|
//! | `add`, `mul` | `s`, `s` | `s` |
//! | `add_broadcast` | `[..lead, ..t]`, `t` | `[..lead, ..t]` |
//! | `matmul` | `[..b, m, k]`, `[k, n]` or `[..b, k, n]` | `[..b, m, n]` |
//! | `dense` | `[.., i]`, `[i, o]`, bias `[o]` | `[.., o]` |
//! | `conv2d` | `[B, H, W, Ci]`, `[Kh, Kw, Ci, Co]` | `[B, Ho, Wo, Co]` |
//! | `maxpool2d(k)` | `[B, H, W, C]` | `[B, H/k, W/k, C]` |
//! | `layernorm` | `[.., d]`, `[d]`, `[d]` | `[.., d]` |
//! | `softmax(axis)` | `s` | `s` |
//! | `mean`, `sum` | any | `[]` |
//! | `max_over_indices` | `[B, C]`, `G` index groups | `[B, G]` |
//! | `gather_rows` | `[V, ..r]`, `N` indices | `[N, ..r]` |
//! | `concat(axis)` | shapes equal except `axis` | summed `axis` |
//! | `clip_around` | `[..lead, ..t]`, center `t` | `[..lead, ..t]` |
//! | `cross_entropy` | `[B, K]`, `B` labels | `[]` (batch mean) |

use crate::kernels::{self, ConvGeom};
use crate::tensor::numel;
use crate::{Element, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// No padding; the kernel must fit inside the input.
    Valid,
    /// Zero padding so that `out = ceil(in / stride)`; the odd pixel of
    /// padding goes to the bottom/right.
    Same,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Max,
    Mean,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared: bool,
    },
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Mean(Var),
    Sum(Var),
    IndexReduce {
        x: Var,
        groups: Vec<Vec<usize>>,
        mode: Reduce,
        argmax: Vec<usize>,
    },
    Clip {
        x: Var,
        lo: T,
        hi: T,
    },
    ClipAround {
        x: Var,
        lo: Vec<T>,
        hi: Vec<T>,
    },
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of the leaves that requested them, returned by
/// [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    checked: bool,
    consumed: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        reason: reason.into(),
    }
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checked: false,
            consumed: false,
        }
    }

    /// A tape that fails any op whose output contains NaN or infinity.
    pub fn checked() -> Self {
        Self {
            checked: true,
            ..Self::new()
        }
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    fn val(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.node(v)?.value)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.get(v.0).is_some_and(|n| n.requires_grad)
    }

    /// Value of a recorded node.
    ///
    /// Panics if `v` was not produced by this tape.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.checked && !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        f: impl Fn(T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let xv = self.val(x)?;
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(name, out, op, rg)
    }

    fn binary_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (av, bv) = (self.val(a)?, self.val(b)?);
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(name, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds `b` to every trailing block of `a` whose shape equals `b`'s
    /// (bias-add; a rank-0 `b` is a scalar add).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a)?, self.val(b)?);
        let (ashape, bshape) = (av.shape(), bv.shape());
        if bshape.len() > ashape.len() || ashape[ashape.len() - bshape.len()..] != *bshape {
            return Err(mismatch("add_broadcast", ashape, bshape));
        }
        let block = bv.numel();
        let bd = bv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % block])
            .collect();
        let out = Tensor::from_parts(ashape.to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push("add_broadcast", out, Op::AddBroadcast(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let s = T::of(factor);
        self.unary("scale", x, |v| v * s, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, T::tanh, Op::Tanh(x))
    }

    /// Elementwise clamp to `[lo, hi]`. The gradient passes where the input
    /// lies inside the closed interval and is zero where it was clamped.
    pub fn clip(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo.is_nan() || hi.is_nan() || lo >= hi {
            return Err(invalid("clip", format!("requires lo < hi, got [{lo}, {hi}]")));
        }
        let (l, h) = (T::of(lo), T::of(hi));
        self.unary("clip", x, |v| v.max(l).min(h), Op::Clip { x, lo: l, hi: h })
    }

    /// Clamps `x` into `[center - radius, center + radius]`, with `center`
    /// broadcast over leading dims as in [`Tape::add_broadcast`].
    ///
    /// The bounds are rounded inward, so `|out - center| <= radius` holds in
    /// exact arithmetic even though `out` is rounded. `center` is treated as
    /// a constant and must not require gradients.
    pub fn clip_around(&mut self, x: Var, center: Var, radius: f64) -> Result<Var> {
        if !(radius >= 0.0 && radius.is_finite()) {
            return Err(invalid("clip_around", format!("radius must be finite and non-negative, got {radius}")));
        }
        if self.rg(center) {
            return Err(invalid("clip_around", "center must be a constant"));
        }
        let (xv, cv) = (self.val(x)?, self.val(center)?);
        let (xs, cs) = (xv.shape(), cv.shape());
        if cs.len() > xs.len() || xs[xs.len() - cs.len()..] != *cs {
            return Err(mismatch("clip_around", xs, cs));
        }
        let mut lo = Vec::with_capacity(cv.numel());
        let mut hi = Vec::with_capacity(cv.numel());
        for &c in cv.data() {
            let (want_lo, want_hi) = (c.as_f64() - radius, c.as_f64() + radius);
            let mut l = T::of(want_lo);
            if l.as_f64() < want_lo {
                l = l.next_up();
            }
            let mut h = T::of(want_hi);
            if h.as_f64() > want_hi {
                h = h.next_down();
            }
            lo.push(l);
            hi.push(h);
        }
        let block = lo.len();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v.max(lo[i % block]).min(hi[i % block]))
            .collect();
        let out = Tensor::from_parts(xs.to_vec(), data);
        let rg = self.rg(x);
        self.push("clip_around", out, Op::ClipAround { x, lo, hi }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a)?, self.val(b)?);
        let (ashape, bshape) = (av.shape(), bv.shape());
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(mismatch("matmul", ashape, bshape));
        }
        let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (bk, n) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
        let lead = &ashape[..ashape.len() - 2];
        let shared = bshape.len() == 2;
        if bk != k || (!shared && bshape[..bshape.len() - 2] != *lead) {
            return Err(mismatch("matmul", ashape, bshape));
        }
        let batch = numel(lead);
        let data = kernels::matmul(av.data(), bv.data(), batch, m, k, n, shared);
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        let op = Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared,
        };
        self.push("matmul", Tensor::from_parts(shape, data), op, rg)
    }

    /// Affine layer `x * w + bias` over the last axis of `x`.
    pub fn dense(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.val(x)?, self.val(w)?);
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(mismatch("dense", xs, ws));
        }
        let (inp, out) = (ws[0], ws[1]);
        let rows = xv.numel() / inp;
        let mut data = kernels::matmul(xv.data(), wv.data(), 1, rows, inp, out, true);
        if let Some(b) = bias {
            let bv = self.val(b)?;
            if bv.shape() != [out] {
                return Err(mismatch("dense", ws, bv.shape()));
            }
            for row in data.chunks_mut(out) {
                for (o, &bb) in row.iter_mut().zip(bv.data()) {
                    *o = *o + bb;
                }
            }
        }
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = out;
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        let op = Op::Dense {
            x,
            w,
            b: bias,
            rows,
        };
        self.push("dense", Tensor::from_parts(shape, data), op, rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (xv, wv) = (self.val(x)?, self.val(w)?);
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[3] != ws[2] {
            return Err(mismatch("conv2d", xs, ws));
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        let (in_h, in_w, k_h, k_w) = (xs[1], xs[2], ws[0], ws[1]);
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if in_h < k_h || in_w < k_w {
                    return Err(mismatch("conv2d", xs, ws));
                }
                ((in_h - k_h) / stride + 1, (in_w - k_w) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let oh = in_h.div_ceil(stride);
                let ow = in_w.div_ceil(stride);
                let ph = ((oh - 1) * stride + k_h).saturating_sub(in_h);
                let pw = ((ow - 1) * stride + k_w).saturating_sub(in_w);
                (oh, ow, ph / 2, pw / 2)
            }
        };
        let geom = ConvGeom {
            batch: xs[0],
            in_h,
            in_w,
            in_c: xs[3],
            k_h,
            k_w,
            out_c: ws[3],
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        };
        let data = kernels::conv2d(xv.data(), wv.data(), geom);
        let shape = vec![geom.batch, out_h, out_w, geom.out_c];
        let rg = self.rg(x) || self.rg(w);
        self.push("conv2d", Tensor::from_parts(shape, data), Op::Conv2d { x, w, geom }, rg)
    }

    /// Non-overlapping max pooling with a square `size` window (floor mode).
    /// Backward routes each gradient to the first maximal input.
    pub fn maxpool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let xv = self.val(x)?;
        let xs = xv.shape();
        if xs.len() != 4 || size == 0 || xs[1] < size || xs[2] < size {
            return Err(invalid("maxpool2d", format!("window {size} on input {xs:?}")));
        }
        let (data, argmax) = kernels::maxpool2d(xv.data(), xs[0], xs[1], xs[2], xs[3], size);
        let shape = vec![xs[0], xs[1] / size, xs[2] / size, xs[3]];
        let rg = self.rg(x);
        self.push("maxpool2d", Tensor::from_parts(shape, data), Op::MaxPool2d { x, argmax }, rg)
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.val(x)?, self.val(gamma)?, self.val(beta)?);
        let xs = xv.shape();
        let d = *xs.last().ok_or_else(|| invalid("layernorm", "rank-0 input"))?;
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(mismatch("layernorm", xs, gv.shape()));
        }
        let eps = T::of(eps);
        let inv_d = T::of(1.0 / d as f64);
        let rows = xv.numel() / d;
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (i, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * gv.data()[i] + bv.data()[i]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        self.push("layernorm", Tensor::from_parts(xs.to_vec(), out), op, rg)
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        let name = if log { "log_softmax" } else { "softmax" };
        let xv = self.val(x)?;
        let xs = xv.shape();
        if axis >= xs.len() {
            return Err(invalid(name, format!("axis {axis} out of range for {xs:?}")));
        }
        let (outer, len, inner) = split_axis(xs, axis);
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let mx = (0..len).fold(T::neg_infinity(), |m, i| m.max(src[at(i)]));
                let total: T = (0..len).map(|i| (src[at(i)] - mx).exp()).sum();
                let lse = total.ln();
                for i in 0..len {
                    let shifted = src[at(i)] - mx;
                    out[at(i)] = if log {
                        shifted - lse
                    } else {
                        shifted.exp() / total
                    };
                }
            }
        }
        let rg = self.rg(x);
        let op = if log {
            Op::LogSoftmax { x, axis }
        } else {
            Op::Softmax { x, axis }
        };
        self.push(name, Tensor::from_parts(xs.to_vec(), out), op, rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x)?;
        let m = xv.data().iter().copied().sum::<T>() / T::of(xv.numel() as f64);
        let rg = self.rg(x);
        self.push("mean", Tensor::scalar(m), Op::Mean(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x)?;
        let s = xv.data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    fn index_reduce(&mut self, x: Var, groups: &[Vec<usize>], mode: Reduce) -> Result<Var> {
        let name = match mode {
            Reduce::Max => "max_over_indices",
            Reduce::Mean => "mean_over_indices",
        };
        let xv = self.val(x)?;
        let xs = xv.shape();
        if xs.len() != 2 {
            return Err(invalid(name, format!("expects [batch, classes], got {xs:?}")));
        }
        let (rows, cols) = (xs[0], xs[1]);
        if groups.is_empty() {
            return Err(invalid(name, "no index groups"));
        }
        for g in groups {
            if g.is_empty() {
                return Err(invalid(name, "empty index group"));
            }
            if let Some(&bad) = g.iter().find(|&&i| i >= cols) {
                return Err(invalid(name, format!("index {bad} out of range for {cols} columns")));
            }
        }
        let src = xv.data();
        let mut out = Vec::with_capacity(rows * groups.len());
        let mut argmax = Vec::new();
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            for g in groups {
                match mode {
                    Reduce::Max => {
                        let mut best = g[0];
                        for &i in &g[1..] {
                            if row[i] > row[best] || (row[i] == row[best] && i < best) {
                                best = i;
                            }
                        }
                        out.push(row[best]);
                        argmax.push(r * cols + best);
                    }
                    Reduce::Mean => {
                        let s: T = g.iter().map(|&i| row[i]).sum();
                        out.push(s / T::of(g.len() as f64));
                    }
                }
            }
        }
        let rg = self.rg(x);
        let op = Op::IndexReduce {
            x,
            groups: groups.to_vec(),
            mode,
            argmax,
        };
        self.push(name, Tensor::from_parts(vec![rows, groups.len()], out), op, rg)
    }

    /// For each row of `x: [B, C]` and each index group, the maximum over the
    /// group's columns. Gradient goes to the winning column only; ties go to
    /// the lowest column index.
    pub fn max_over_indices(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        self.index_reduce(x, groups, Reduce::Max)
    }

    pub fn mean_over_indices(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        self.index_reduce(x, groups, Reduce::Mean)
    }

    /// Selects rows (first-axis slices) of `table`; indices may repeat.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.val(table)?;
        let ts = tv.shape();
        if ts.is_empty() {
            return Err(invalid("gather_rows", "rank-0 table"));
        }
        if indices.is_empty() {
            return Err(invalid("gather_rows", "no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= ts[0]) {
            return Err(invalid("gather_rows", format!("row {bad} out of range for {} rows", ts[0])));
        }
        let row = numel(&ts[1..]);
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&tv.data()[i * row..(i + 1) * row]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&ts[1..]);
        let rg = self.rg(table);
        let op = Op::GatherRows {
            table,
            indices: indices.to_vec(),
        };
        self.push("gather_rows", Tensor::from_parts(shape, data), op, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(x)?.reshape(shape.to_vec())?;
        let rg = self.rg(x);
        self.push("reshape", out, Op::Reshape(x), rg)
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.val(x)?;
        let xs = xv.shape();
        let mut seen = vec![false; xs.len()];
        if axes.len() != xs.len() || axes.iter().any(|&a| a >= xs.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(invalid("permute", format!("{axes:?} is not a permutation of {} axes", xs.len())));
        }
        let data = kernels::permute(xv.data(), xs, axes);
        let shape = axes.iter().map(|&a| xs[a]).collect();
        let rg = self.rg(x);
        let op = Op::Permute {
            x,
            axes: axes.to_vec(),
        };
        self.push("permute", Tensor::from_parts(shape, data), op, rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.val(*inputs.first().ok_or_else(|| invalid("concat", "no inputs"))?)?;
        let base = first.shape().to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.val(v)?.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        self.push("concat", Tensor::from_parts(shape, data), op, rg)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.val(logits)?;
        let ls = lv.shape();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(mismatch("cross_entropy", ls, &[labels.len()]));
        }
        let k = ls[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid("cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = Vec::with_capacity(lv.numel());
        let mut total = T::zero();
        for (row, &label) in lv.data().chunks(k).zip(labels) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            total = total + z.ln() + mx - row[label];
            probs.extend(row.iter().map(|&v| (v - mx).exp() / z));
        }
        let loss = total / T::of(labels.len() as f64);
        let rg = self.rg(logits);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push("cross_entropy", Tensor::scalar(loss), op, rg)
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape: a second call
    /// fails until [`Tape::reset`]. Every leaf recorded with
    /// `requires_grad` receives a gradient (zeros if unreachable).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let lv = self.val(loss)?;
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                (matches!(node.op, Op::Leaf) && node.requires_grad).then(|| {
                    let shape = node.value.shape().to_vec();
                    let data = g.unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                    Tensor::from_parts(shape, data)
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut acc = |v: Var, delta: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(delta) {
                        *e = *e + d;
                    }
                }
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    acc(*a, g.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                }
                if self.rg(*b) {
                    acc(*b, g.iter().zip(av).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::AddBroadcast(a, b) => {
                acc(*a, g.to_vec());
                if self.rg(*b) {
                    let block = self.value(*b).numel();
                    let mut db = vec![T::zero(); block];
                    for chunk in g.chunks(block) {
                        for (d, &v) in db.iter_mut().zip(chunk) {
                            *d = *d + v;
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Scale(x, s) => acc(*x, g.iter().map(|&v| v * *s).collect()),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared,
            } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    acc(*a, kernels::matmul_grad_lhs(g, bv, *batch, *m, *k, *n, *shared));
                }
                if self.rg(*b) {
                    acc(*b, kernels::matmul_grad_rhs(g, av, *batch, *m, *k, *n, *shared));
                }
            }
            Op::Dense { x, w, b, rows } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w));
                let (inp, outd) = (wv.shape()[0], wv.shape()[1]);
                if self.rg(*x) {
                    acc(*x, kernels::matmul_grad_lhs(g, wv.data(), 1, *rows, inp, outd, true));
                }
                if self.rg(*w) {
                    acc(*w, kernels::matmul_grad_rhs(g, xv, 1, *rows, inp, outd, true));
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let mut db = vec![T::zero(); outd];
                    for row in g.chunks(outd) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    acc(b, db);
                }
            }
            Op::Conv2d { x, w, geom } => {
                if self.rg(*x) {
                    acc(*x, kernels::conv2d_grad_input(g, self.value(*w).data(), *geom));
                }
                if self.rg(*w) {
                    acc(*w, kernels::conv2d_grad_weight(g, self.value(*x).data(), *geom));
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&ix, &gv) in argmax.iter().zip(g) {
                    dx[ix] = dx[ix] + gv;
                }
                acc(*x, dx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                );
            }
            Op::Tanh(x) => acc(
                *x,
                g.iter().zip(out).map(|(&g, &y)| g * (T::one() - y * y)).collect(),
            ),
            Op::Clip { x, lo, hi } => {
                let xv = self.value(*x).data();
                acc(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&g, &v)| if v >= *lo && v <= *hi { g } else { T::zero() })
                        .collect(),
                );
            }
            Op::ClipAround { x, lo, hi } => {
                let xv = self.value(*x).data();
                let block = lo.len();
                acc(
                    *x,
                    g.iter()
                        .zip(xv)
                        .enumerate()
                        .map(|(i, (&g, &v))| {
                            if v >= lo[i % block] && v <= hi[i % block] {
                                g
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                );
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma).data();
                let d = gv.len();
                let inv_d = T::of(1.0 / d as f64);
                if self.rg(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    for ((grow, hrow), &r) in g.chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                        let dh: Vec<T> = grow.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let s1: T = dh.iter().copied().sum();
                        let s2: T = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum();
                        for (&dhi, &hi) in dh.iter().zip(hrow) {
                            dx.push(r * (dhi - (s1 + hi * s2) * inv_d));
                        }
                    }
                    acc(*x, dx);
                }
                if self.rg(*gamma) {
                    let mut dg = vec![T::zero(); d];
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, &a), &h) in dg.iter_mut().zip(grow).zip(hrow) {
                            *o = *o + a * h;
                        }
                    }
                    acc(*gamma, dg);
                }
                if self.rg(*beta) {
                    let mut db = vec![T::zero(); d];
                    for grow in g.chunks(d) {
                        for (o, &a) in db.iter_mut().zip(grow) {
                            *o = *o + a;
                        }
                    }
                    acc(*beta, db);
                }
            }
            Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
                let log = matches!(node.op, Op::LogSoftmax { .. });
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + j;
                        if log {
                            let gs: T = (0..len).map(|i| g[at(i)]).sum();
                            for i in 0..len {
                                dx[at(i)] = g[at(i)] - out[at(i)].exp() * gs;
                            }
                        } else {
                            let dot: T = (0..len).map(|i| g[at(i)] * out[at(i)]).sum();
                            for i in 0..len {
                                dx[at(i)] = out[at(i)] * (g[at(i)] - dot);
                            }
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0] / T::of(n as f64); n]);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::IndexReduce {
                x,
                groups,
                mode,
                argmax,
            } => {
                let xv = self.value(*x);
                let cols = xv.shape()[1];
                let mut dx = vec![T::zero(); xv.numel()];
                match mode {
                    Reduce::Max => {
                        for (&ix, &gv) in argmax.iter().zip(g) {
                            dx[ix] = dx[ix] + gv;
                        }
                    }
                    Reduce::Mean => {
                        for (r, grow) in g.chunks(groups.len()).enumerate() {
                            for (grp, &gv) in groups.iter().zip(grow) {
                                let share = gv / T::of(grp.len() as f64);
                                for &c in grp {
                                    dx[r * cols + c] = dx[r * cols + c] + share;
                                }
                            }
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::GatherRows { table, indices } => {
                let tv = self.value(*table);
                let row = numel(&tv.shape()[1..]);
                let mut dt = vec![T::zero(); tv.numel()];
                for (&r, grow) in indices.iter().zip(g.chunks(row)) {
                    for (d, &v) in dt[r * row..(r + 1) * row].iter_mut().zip(grow) {
                        *d = *d + v;
                    }
                }
                acc(*table, dt);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                acc(*x, kernels::permute(g, node.value.shape(), &inverse));
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.value(v).shape()[*axis] * inner;
                    if self.rg(v) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                        }
                        acc(v, d);
                    }
                    offset += chunk;
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = probs.len() / labels.len();
                let scale = g[0] / T::of(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] = d[r * k + l] - scale;
                }
                acc(*logits, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_returns_operand() {
        let mut tape = Tape::<f64>::new();
        let eye = tape
            .constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]))
            .unwrap();
        let a = tape
            .constant(t(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]))
            .unwrap();
        let out = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(out), tape.value(a));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![4]).unwrap()).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![2, 3]).unwrap()).unwrap();
        let y = tape.tanh(x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[2], &[1., 2.])).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::<f64>::new();
        let z = tape.param(Tensor::zeros(vec![1, 4]).unwrap()).unwrap();
        let loss = tape.cross_entropy(z, &[2]).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(z).unwrap().data(), &[0.25, 0.25, -0.75, 0.25]);
    }

    #[test]
    fn backward_twice_fails() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[2], &[1., 2.])).unwrap();
        let loss = tape.sum(w).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.backward(loss).unwrap_err(), TensorError::TapeConsumed);
        tape.reset();
        let w = tape.param(t(&[2], &[1., 2.])).unwrap();
        let loss = tape.sum(w).unwrap();
        assert!(tape.backward(loss).is_ok());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[2], &[1., 2.])).unwrap();
        assert!(matches!(tape.backward(w), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]).unwrap()).unwrap();
        let b = tape.constant(Tensor::zeros(vec![2, 3]).unwrap()).unwrap();
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
        assert!(tape.clip(a, 1.0, 1.0).is_err());
    }

    #[test]
    fn checked_tape_rejects_non_finite() {
        let mut tape = Tape::<f32>::checked();
        let x = tape.constant(Tensor::full(vec![2], 1e30).unwrap()).unwrap();
        let sq = tape.mul(x, x);
        assert_eq!(sq.unwrap_err(), TensorError::NonFinite { op: "mul" });
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let used = tape.param(t(&[2], &[1., 2.])).unwrap();
        let unused = tape.param(t(&[3], &[1., 2., 3.])).unwrap();
        let loss = tape.sum(used).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn max_over_indices_tie_goes_to_lowest_column() {
        let mut tape = Tape::<f64>::new();
        let z = tape.param(t(&[1, 4], &[2., 2., 1., 2.])).unwrap();
        let out = tape.max_over_indices(z, &[vec![3, 1], vec![2]]).unwrap();
        assert_eq!(tape.value(out).data(), &[2., 1.]);
        let loss = tape.sum(out).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(z).unwrap().data(), &[0., 1., 1., 0.]);
    }
}
