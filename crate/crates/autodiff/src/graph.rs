//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its variables in creation
//! order. [`Graph::backward`] walks the tape in reverse and accumulates
//! gradients into the leaves that were created with [`Graph::param`].
//! A graph is used for one forward/backward pass and then dropped.

use crate::float::Float;
use crate::kernels;
use crate::tensor::{Shape, Tensor};
use crate::{Error, Result};

/// Handle to a value on a graph's tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv,
    Deconv,
    BatchNorm,
    Relu,
    Concat,
    SliceC,
    Add,
    Mul,
    Scale,
    MseLoss,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 10] = [
        OpKind::Conv,
        OpKind::Deconv,
        OpKind::BatchNorm,
        OpKind::Relu,
        OpKind::Concat,
        OpKind::SliceC,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::MseLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv => "conv2d",
            OpKind::Deconv => "deconv2d",
            OpKind::BatchNorm => "batchnorm",
            OpKind::Relu => "relu",
            OpKind::Concat => "concat_c",
            OpKind::SliceC => "slice_c",
            OpKind::Add => "add",
            OpKind::Mul => "mul_elem",
            OpKind::Scale => "scale",
            OpKind::MseLoss => "mse_loss",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::DIFFERENTIABLE.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Float> BnState<T> {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Deconv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        invstd: Vec<f64>,
        train: bool,
    },
    Relu {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    SliceC {
        x: Var,
        start: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    Mse {
        pred: Var,
        target: Var,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv { .. } => OpKind::Conv,
            Op::Deconv { .. } => OpKind::Deconv,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Relu { .. } => OpKind::Relu,
            Op::Concat { .. } => OpKind::Concat,
            Op::SliceC { .. } => OpKind::SliceC,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Mse { .. } => OpKind::MseLoss,
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    fault: Option<OpKind>,
}

/// Strides that read an operand of shape `from` while iterating `to`;
/// broadcast axes get stride 0.
fn broadcast_strides(from: Shape, to: Shape) -> [usize; 4] {
    let mut strides = [0; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        strides[d] = if from.0[d] == 1 && to.0[d] != 1 { 0 } else { acc };
        acc *= from.0[d];
    }
    strides
}

fn for_each_broadcast(out: Shape, a: Shape, b: Shape, mut f: impl FnMut(usize, usize, usize)) {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let [n, c, h, w] = out.0;
    let mut o = 0;
    for i0 in 0..n {
        for i1 in 0..c {
            for i2 in 0..h {
                let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..w {
                    f(o, ba + i3 * sa[3], bb + i3 * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            fault: None,
        }
    }

    /// Corrupts the backward rule of `kind` (scales its propagated gradient
    /// by 1.5). Negative control for gradient checks.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant: no gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// A trainable leaf; its gradient is available after [`Graph::backward`].
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Cross-correlation with weights `[Cout, Cin, k, k]` and zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let value = kernels::conv_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let rg = self.needs(&[x, w]) || b.is_some_and(|b| self.needs(&[b]));
        Ok(self.push(
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
            },
            value,
            rg,
        ))
    }

    /// 3×3 convolution, padding 1, stride 1 or 2; output extent `ceil(in / stride)`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let ws = self.shape(w);
        if ws.h() != 3 || ws.w() != 3 {
            return Err(Error::Dimension(format!("conv3x3 needs 3x3 weights, got {ws}")));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::Dimension(format!("conv3x3 stride must be 1 or 2, got {stride}")));
        }
        self.conv2d(x, w, b, stride, 1)
    }

    /// Transposed convolution with weights `[Cin, Cout, k, k]`.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let value = kernels::deconv_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let rg = self.needs(&[x, w]) || b.is_some_and(|b| self.needs(&[b]));
        Ok(self.push(
            Op::Deconv {
                x,
                w,
                b,
                stride,
                pad,
            },
            value,
            rg,
        ))
    }

    /// 4×4 transposed convolution, stride 2, padding 1: doubles both extents.
    pub fn deconv4x4_s2(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let ws = self.shape(w);
        if ws.h() != 4 || ws.w() != 4 {
            return Err(Error::Dimension(format!("deconv4x4_s2 needs 4x4 weights, got {ws}")));
        }
        self.deconv2d(x, w, b, 2, 1)
    }

    /// Per-channel batch normalization; `gamma` and `beta` are `1×C×1×1`.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, state: &mut BnState<T>, mode: Mode) -> Result<Var> {
        let xs = self.shape(x);
        let c = xs.c();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).len() != c {
                return Err(Error::Dimension(format!(
                    "batchnorm {name} has {} values for {c} channels",
                    self.value(v).len()
                )));
            }
        }
        if state.channels() != c {
            return Err(Error::Dimension(format!(
                "batchnorm state tracks {} channels, input has {c}",
                state.channels()
            )));
        }
        let m = xs.n() * xs.plane();
        let train = mode == Mode::Train;
        if train && m <= 1 {
            return Err(Error::Domain(format!(
                "batchnorm in train mode needs more than one value per channel, input is {xs}"
            )));
        }
        let xv = self.value(x).data();
        let plane = xs.plane();
        let mut invstd = vec![0.0; c];
        let mut mean = vec![0.0; c];
        if train {
            let mut var = vec![0.0; c];
            for (i, chunk) in xv.chunks_exact(plane).enumerate() {
                mean[i % c] += chunk.iter().map(|v| v.f64()).sum::<f64>();
            }
            mean.iter_mut().for_each(|s| *s /= m as f64);
            for (i, chunk) in xv.chunks_exact(plane).enumerate() {
                let mu = mean[i % c];
                var[i % c] += chunk.iter().map(|v| (v.f64() - mu).powi(2)).sum::<f64>();
            }
            var.iter_mut().for_each(|s| *s /= m as f64);
            for ch in 0..c {
                invstd[ch] = 1.0 / (var[ch] + state.eps).sqrt();
                let mom = state.momentum;
                let unbiased = var[ch] * m as f64 / (m - 1) as f64;
                state.running_mean[ch] = T::of((1.0 - mom) * state.running_mean[ch].f64() + mom * mean[ch]);
                state.running_var[ch] = T::of((1.0 - mom) * state.running_var[ch].f64() + mom * unbiased);
            }
        } else {
            for ch in 0..c {
                mean[ch] = state.running_mean[ch].f64();
                invstd[ch] = 1.0 / (state.running_var[ch].f64() + state.eps).sqrt();
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for (i, chunk) in xv.chunks_exact(plane).enumerate() {
            let ch = i % c;
            let (mu, is) = (mean[ch], invstd[ch]);
            for &v in chunk {
                let h = T::of((v.f64() - mu) * is);
                xhat.push(h);
                out.push(g[ch] * h + b[ch]);
            }
        }
        let value = Tensor::new(xs, out)?;
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                train,
            },
            value,
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.needs(&[x]);
        self.push(Op::Relu { x }, value, rg)
    }

    /// Concatenation along channels.
    pub fn concat_c(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let s0 = self.shape(first);
        let mut c = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.n() != s0.n() || s.h() != s0.h() || s.w() != s0.w() {
                return Err(Error::Dimension(format!("cannot concatenate {s} with {s0}")));
            }
            c += s.c();
        }
        let out_shape = Shape::new(s0.n(), c, s0.h(), s0.w());
        let mut data = Vec::with_capacity(out_shape.len());
        for n in 0..s0.n() {
            for &p in parts {
                data.extend_from_slice(self.value(p).sample(n));
            }
        }
        let value = Tensor::new(out_shape, data)?;
        let rg = self.needs(parts);
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
            },
            value,
            rg,
        ))
    }

    /// Channels `[start, start + count)`.
    pub fn slice_c(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let s = self.shape(x);
        if start + count > s.c() || count == 0 {
            return Err(Error::Dimension(format!(
                "channel slice {start}..{} of {s}",
                start + count
            )));
        }
        let out_shape = Shape::new(s.n(), count, s.h(), s.w());
        let mut data = Vec::with_capacity(out_shape.len());
        for n in 0..s.n() {
            let sample = self.value(x).sample(n);
            data.extend_from_slice(&sample[start * s.plane()..(start + count) * s.plane()]);
        }
        let value = Tensor::new(out_shape, data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(Op::SliceC { x, start }, value, rg))
    }

    fn broadcast_pair(&self, a: Var, b: Var, what: &str) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        sa.broadcast(sb)
            .ok_or_else(|| Error::Dimension(format!("{what}: shapes {sa} and {sb} do not broadcast")))
    }

    /// Element-wise sum; size-1 axes broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_pair(a, b, "add")?;
        let mut data = vec![T::zero(); out.len()];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for_each_broadcast(out, self.shape(a), self.shape(b), |o, i, j| data[o] = av[i] + bv[j]);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Add { a, b }, Tensor::new(out, data)?, rg))
    }

    /// Element-wise product; size-1 axes broadcast.
    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_pair(a, b, "mul_elem")?;
        let mut data = vec![T::zero(); out.len()];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for_each_broadcast(out, self.shape(a), self.shape(b), |o, i, j| data[o] = av[i] * bv[j]);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Mul { a, b }, Tensor::new(out, data)?, rg))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.needs(&[x]);
        self.push(Op::Scale { x, s }, value, rg)
    }

    /// `(1/n) Σ (target − pred)²` over all `n` elements, as a `1×1×1×1` tensor.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (sp, st) = (self.shape(pred), self.shape(target));
        if sp != st {
            return Err(Error::Dimension(format!("mse_loss: prediction {sp} vs target {st}")));
        }
        let n = sp.len();
        if n == 0 {
            return Err(Error::Dimension("mse_loss of empty tensors".into()));
        }
        let sum: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(p, t)| (t.f64() - p.f64()).powi(2))
            .sum();
        let loss = T::of(sum / n as f64);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("mse_loss over {sp} evaluated to {loss:?}")));
        }
        let rg = self.needs(&[pred, target]);
        Ok(self.push(Op::Mse { pred, target }, Tensor::scalar(loss), rg))
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, &b)| *a = *a + b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Sums `g` (shaped like the broadcast output) down to `target`.
    fn reduce_to(g: &Tensor<T>, target: Shape, factor: impl Fn(usize, usize) -> T, other: Shape) -> Tensor<T> {
        let out = g.shape();
        let mut acc = vec![T::zero(); target.len()];
        let gd = g.data();
        for_each_broadcast(out, target, other, |o, i, j| acc[i] = acc[i] + gd[o] * factor(i, j));
        Tensor::new(target, acc).unwrap()
    }

    /// Reverse pass from a `1×1×1×1` loss. Gradients of parameter leaves are
    /// kept; intermediate gradients are released as the tape unwinds.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != Shape::SCALAR {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got {}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = self.grads[idx].take() else {
                continue;
            };
            if self.fault == Some(self.nodes[idx].op.kind()) {
                let k = T::of(1.5);
                g.data_mut().iter_mut().for_each(|v| *v = *v * k);
            }
            for (v, d) in self.backprop(idx, &g)? {
                self.accumulate(v, d);
            }
        }
        Ok(())
    }

    fn backprop(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv { x, w, b, stride, pad } => {
                let want_dx = self.nodes[x.0].requires_grad;
                let (dx, dw, db) =
                    kernels::conv_backward(self.value(x), self.value(w), g, stride, pad, want_dx)?;
                if let Some(dx) = dx {
                    out.push((x, dx));
                }
                out.push((w, dw));
                if let Some(b) = b {
                    out.push((b, db));
                }
            }
            &Op::Deconv { x, w, b, stride, pad } => {
                let want_dx = self.nodes[x.0].requires_grad;
                let (dx, dw, db) =
                    kernels::deconv_backward(self.value(x), self.value(w), g, stride, pad, want_dx)?;
                if let Some(dx) = dx {
                    out.push((x, dx));
                }
                out.push((w, dw));
                if let Some(b) = b {
                    out.push((b, db));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                train,
            } => {
                let (x, gamma, beta, train) = (*x, *gamma, *beta, *train);
                let s = node.value.shape();
                let (c, plane) = (s.c(), s.plane());
                let m = (s.n() * plane) as f64;
                let gv = self.value(gamma).data();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for (i, (gc, hc)) in g.data().chunks_exact(plane).zip(xhat.chunks_exact(plane)).enumerate() {
                    for (&dy, &h) in gc.iter().zip(hc) {
                        dgamma[i % c] += dy.f64() * h.f64();
                        dbeta[i % c] += dy.f64();
                    }
                }
                let mut dx = Vec::with_capacity(s.len());
                for (i, (gc, hc)) in g.data().chunks_exact(plane).zip(xhat.chunks_exact(plane)).enumerate() {
                    let ch = i % c;
                    let (gm, is) = (gv[ch].f64(), invstd[ch]);
                    for (&dy, &h) in gc.iter().zip(hc) {
                        let v = if train {
                            gm * is / m * (m * dy.f64() - dbeta[ch] - h.f64() * dgamma[ch])
                        } else {
                            gm * is * dy.f64()
                        };
                        dx.push(T::of(v));
                    }
                }
                let cshape = Shape::new(1, c, 1, 1);
                let dgamma = Tensor::new(cshape, dgamma.into_iter().map(T::of).collect())?;
                let dbeta = Tensor::new(cshape, dbeta.into_iter().map(T::of).collect())?;
                let dx = Tensor::new(s, dx)?;
                out.push((x, dx));
                out.push((gamma, dgamma));
                out.push((beta, dbeta));
            }
            &Op::Relu { x } => {
                let xv = self.value(x).data();
                let data = g
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                let dx = Tensor::new(g.shape(), data)?;
                out.push((x, dx));
            }
            Op::Concat { parts } => {
                let parts = parts.clone();
                let s = g.shape();
                let mut offset = 0;
                for p in parts {
                    let ps = self.shape(p);
                    let mut data = Vec::with_capacity(ps.len());
                    for n in 0..s.n() {
                        let sample = g.sample(n);
                        data.extend_from_slice(&sample[offset * s.plane()..(offset + ps.c()) * s.plane()]);
                    }
                    offset += ps.c();
                    out.push((p, Tensor::new(ps, data)?));
                }
            }
            &Op::SliceC { x, start } => {
                let xs = self.shape(x);
                let s = g.shape();
                let mut dx = Tensor::zeros(xs);
                for n in 0..s.n() {
                    let dst = &mut dx.data_mut()[n * xs.sample_len()..(n + 1) * xs.sample_len()];
                    dst[start * s.plane()..(start + s.c()) * s.plane()].copy_from_slice(g.sample(n));
                }
                out.push((x, dx));
            }
            &Op::Add { a, b } => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let da = Self::reduce_to(g, sa, |_, _| T::one(), sb);
                let db = Self::reduce_to(g, sb, |_, _| T::one(), sa);
                out.push((a, da));
                out.push((b, db));
            }
            &Op::Mul { a, b } => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let da = Self::reduce_to(g, sa, |_, j| bv[j], sb);
                let db = Self::reduce_to(g, sb, |_, j| av[j], sa);
                out.push((a, da));
                out.push((b, db));
            }
            &Op::Scale { x, s } => {
                let dx = g.map(|v| v * s);
                out.push((x, dx));
            }
            &Op::Mse { pred, target } => {
                let n = self.shape(pred).len() as f64;
                let gl = g.item().f64();
                let k = 2.0 * gl / n;
                let (pv, tv) = (self.value(pred).data(), self.value(target).data());
                let dp: Vec<T> = pv.iter().zip(tv).map(|(p, t)| T::of(k * (p.f64() - t.f64()))).collect();
                let shape = self.shape(pred);
                let dt: Vec<T> = dp.iter().map(|&v| -v).collect();
                out.push((pred, Tensor::new(shape, dp)?));
                out.push((target, Tensor::new(shape, dt)?));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, f: impl Fn(usize) -> f64) -> Tensor<f64> {
        let mut i = 0;
        Tensor::from_fn(shape, |_| {
            i += 1;
            f(i)
        })
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(Shape::new(1, 1, 5, 5), |i| i as f64));
        let mut k = Tensor::zeros(Shape::new(1, 1, 3, 3));
        k.set([0, 0, 1, 1], 1.0);
        let w = g.input(k);
        let y = g.conv3x3(x, w, None, 1).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn stride_two_shape_and_deconv_doubling() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(Shape::new(1, 1, 4, 4)));
        let w = g.input(Tensor::zeros(Shape::new(1, 1, 3, 3)));
        let y = g.conv3x3(x, w, None, 2).unwrap();
        assert_eq!(g.shape(y), Shape::new(1, 1, 2, 2));
        let d = g.input(Tensor::zeros(Shape::new(1, 1, 4, 4)));
        let z = g.deconv4x4_s2(y, d, None).unwrap();
        assert_eq!(g.shape(z), Shape::new(1, 1, 4, 4));
    }

    #[test]
    fn deconv_input_gradient_is_mirrored_convolution() {
        let x0 = t(Shape::new(2, 3, 3, 5), |i| (i as f64 * 0.3).sin());
        let w0 = t(Shape::new(3, 4, 4, 4), |i| (i as f64 * 0.7).cos());
        let dy = t(Shape::new(2, 4, 6, 10), |i| (i as f64 * 0.11).sin());
        let mut g = Graph::<f64>::new();
        let x = g.param(x0);
        let w = g.input(w0.clone());
        let y = g.deconv4x4_s2(x, w, None).unwrap();
        // mse against y - dy·n/2 has output gradient exactly dy
        let half_n = dy.len() as f64 / 2.0;
        let shifted = Tensor::new(
            dy.shape(),
            g.value(y).data().iter().zip(dy.data()).map(|(v, d)| v - d * half_n).collect(),
        )
        .unwrap();
        let target = g.input(shifted);
        let l = g.mse_loss(y, target).unwrap();
        g.backward(l).unwrap();
        let mirrored = kernels::conv_forward(&dy, &w0, None, 2, 1).unwrap();
        assert!(g.grad(x).unwrap().max_abs_diff(&mirrored) < 1e-9);
    }

    #[test]
    fn batchnorm_train_normalizes_and_eval_is_identity() {
        let x0 = t(Shape::new(4, 2, 3, 3), |i| (i as f64 * 1.7).sin() * 3.0 + 1.0);
        let mut g = Graph::<f64>::new();
        let x = g.input(x0.clone());
        let gamma = g.input(Tensor::filled(Shape::new(1, 2, 1, 1), 1.0));
        let beta = g.input(Tensor::zeros(Shape::new(1, 2, 1, 1)));
        let mut st = BnState::new(2);
        let y = g.batchnorm(x, gamma, beta, &mut st, Mode::Train).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| (0..9).map(move |p| (n, p)))
                .map(|(n, p)| g.value(y).get([n, c, p / 3, p % 3]))
                .collect();
            let mean = vals.iter().sum::<f64>() / 36.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 36.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
        assert!(st.running_mean.iter().any(|&m| m != 0.0));

        let mut fresh = BnState::new(2);
        let z = g.batchnorm(x, gamma, beta, &mut fresh, Mode::Eval).unwrap();
        assert!(g.value(z).max_abs_diff(&x0) < 1e-4);
        assert_eq!(fresh, BnState::new(2));
    }

    #[test]
    fn batchnorm_rejects_single_value_channels() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(Shape::new(1, 2, 1, 1)));
        let gamma = g.input(Tensor::filled(Shape::new(1, 2, 1, 1), 1.0));
        let beta = g.input(Tensor::zeros(Shape::new(1, 2, 1, 1)));
        let mut st = BnState::new(2);
        assert!(matches!(
            g.batchnorm(x, gamma, beta, &mut st, Mode::Train),
            Err(Error::Domain(_))
        ));
        assert!(g.batchnorm(x, gamma, beta, &mut st, Mode::Eval).is_ok());
    }

    #[test]
    fn relu_concat_and_slice() {
        let mut g = Graph::<f64>::new();
        let neg = g.input(Tensor::filled(Shape::new(1, 2, 2, 2), -1.0));
        let r = g.relu(neg);
        assert!(g.value(r).data().iter().all(|&v| v == 0.0));
        let pos = g.input(t(Shape::new(1, 3, 2, 2), |i| i as f64));
        let r = g.relu(pos);
        assert_eq!(g.value(r), g.value(pos));

        let a = g.param(t(Shape::new(2, 3, 2, 2), |i| i as f64));
        let b = g.param(t(Shape::new(2, 3, 2, 2), |i| -(i as f64)));
        let c = g.concat_c(&[a, b]).unwrap();
        assert_eq!(g.shape(c), Shape::new(2, 6, 2, 2));
        let single = g.concat_c(&[a]).unwrap();
        assert_eq!(g.value(single), g.value(a));
        let back = g.slice_c(c, 3, 3).unwrap();
        assert_eq!(g.value(back), g.value(b));
        let bad = g.input(Tensor::zeros(Shape::new(2, 1, 3, 2)));
        assert!(matches!(g.concat_c(&[a, bad]), Err(Error::Dimension(_))));
    }

    #[test]
    fn mse_values_and_gradient() {
        let mut g = Graph::<f64>::new();
        let target = g.input(t(Shape::new(1, 3, 2, 2), |i| i as f64 * 0.1));
        let same = g.param(g.value(target).clone());
        let l0 = g.mse_loss(same, target).unwrap();
        assert_eq!(g.value(l0).item(), 0.0);
        let off = g.param(g.value(target).map(|v| v + 1.0));
        let l1 = g.mse_loss(off, target).unwrap();
        assert!((g.value(l1).item() - 1.0).abs() < 1e-15);
        g.backward(l1).unwrap();
        let n = 12.0;
        assert!(g.grad(off).unwrap().data().iter().all(|&d| (d - 2.0 / n).abs() < 1e-15));
        let bad = g.input(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        assert!(matches!(g.mse_loss(bad, target), Err(Error::Dimension(_))));
    }

    #[test]
    fn mul_by_ones_and_square_rule() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(Shape::new(1, 3, 2, 2), |i| i as f64 * 0.5 - 2.0));
        let ones = g.input(Tensor::filled(Shape::new(1, 1, 1, 1), 1.0));
        let p = g.mul_elem(a, ones).unwrap();
        assert_eq!(g.value(p), g.value(a));
        let sq = g.mul_elem(a, a).unwrap();
        let zero = g.input(Tensor::zeros(g.shape(sq)));
        let l = g.mse_loss(sq, zero).unwrap();
        g.backward(l).unwrap();
        let av = g.value(a).clone();
        let grad = g.grad(a).unwrap();
        for (d, &x) in grad.data().iter().zip(av.data()) {
            // dl/dsq = 2·sq/n and dsq/da = 2a
            let expect = 2.0 * x * x / 12.0 * 2.0 * x;
            assert!((d - expect).abs() < 1e-12);
        }
        let bad = g.input(Tensor::zeros(Shape::new(1, 2, 2, 2)));
        assert!(matches!(g.mul_elem(a, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn nan_surfaces_at_the_loss() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(Shape::new(1, 1, 1, 2), vec![f32::NAN, 0.0]).unwrap());
        let y = g.input(Tensor::zeros(Shape::new(1, 1, 1, 2)));
        assert!(matches!(g.mse_loss(x, y), Err(Error::NonFinite(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }
}
