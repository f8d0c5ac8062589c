//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive operation in creation order. Each
//! record keeps its forward value, its inputs and whatever it needs to map an
//! output gradient back onto those inputs. [`Graph::backward`] walks the tape
//! in reverse and accumulates gradients additively; [`Graph::zero_grad`]
//! clears them so the same tape can be differentiated again.
//!
//! A graph is owned by one thread. Data-parallel training builds one graph
//! per sample and sums the resulting parameter gradients.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, Tap};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-6;
const SOFT_DICE_SMOOTH: f64 = 1.0;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Sum(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        x: Var,
        rows: Vec<Tap>,
        cols: Vec<Tap>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        target: Vec<f64>,
        prob_fg: Vec<f64>,
    },
    SoftDice {
        logits: Var,
        target: Vec<f64>,
        prob_fg: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
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

    /// Adds an input tensor to the tape.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Drops every accumulated gradient and re-arms [`Graph::backward`].
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---------------------------------------------------------------------
    // elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape(), data)?
        } else {
            let shape = broadcast_shape(ta.shape(), tb.shape())?;
            let ia = broadcast_index(ta.shape(), &shape);
            let ib = broadcast_index(tb.shape(), &shape);
            let data = ia
                .iter()
                .zip(&ib)
                .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
                .collect();
            Tensor::new(&shape, data)?
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, op))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::Scale(a, factor))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(stable_sigmoid);
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::Relu(a))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            ([m, k1], [k2, n]) if k1 == k2 => (*m, *k1, *n),
            (sa, sb) => {
                return Err(Error::shape(format!(
                    "matmul needs [M,K]·[K,N], got {sa:?} and {sb:?}"
                )))
            }
        };
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), (k, 1), tb.data(), (n, 1), 0.0, &mut out, (n, 1));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, rg, Op::MatMul(a, b)))
    }

    // ---------------------------------------------------------------------
    // convolutional primitives

    /// Stride-1 dense convolution (cross-correlation, no kernel flip).
    ///
    /// `x` is `N×Cin×H×W`, `w` is `Cout×Cin×K×K`, `b` is `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, k, k2) = self.value(w).dims4()?;
        if k != k2 {
            return Err(Error::shape(format!("conv kernel must be square, got {k}×{k2}")));
        }
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d input has {cin} channels but kernel {:?} expects {wcin}",
                self.shape(w)
            )));
        }
        self.check_bias(b, cout)?;
        let g = conv_geom(cin, h, wd, k, pad)?;
        let (ho, wo) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; n * cout * ho * wo];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for (s, dst) in out.chunks_mut(cout * ho * wo).enumerate() {
                let src = &xv[s * cin * h * wd..(s + 1) * cin * h * wd];
                kernels::conv2d_forward(g, src, wv, cout, bv, dst);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        let value = Tensor::new(&[n, cout, ho, wo], out)?;
        Ok(self.push(value, rg, Op::Conv2d { x, w, b, pad }))
    }

    /// Per-channel convolution; `w` is `C×1×K×K`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (wc, one, k, k2) = self.value(w).dims4()?;
        if wc != c || one != 1 || k != k2 {
            return Err(Error::shape(format!(
                "depthwise kernel must be {c}×1×K×K for {c} input channels, got {:?}",
                self.shape(w)
            )));
        }
        self.check_bias(b, c)?;
        let g = conv_geom(1, h, wd, k, pad)?;
        let (ho, wo) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; n * c * ho * wo];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for (s, dst) in out.chunks_mut(c * ho * wo).enumerate() {
                let src = &xv[s * c * h * wd..(s + 1) * c * h * wd];
                kernels::depthwise_forward(c, g, src, wv, bv, dst);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(value, rg, Op::Depthwise { x, w, b, pad }))
    }

    fn check_bias(&self, b: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [channels] {
                return Err(Error::shape(format!(
                    "bias shape {:?} does not match {channels} output channels",
                    self.shape(b)
                )));
            }
        }
        Ok(())
    }

    /// 2×2 max pooling with stride 2. Ties resolve to the first maximal
    /// element in row-major order, which also receives the whole gradient.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "max-pool needs even spatial dims, got {h}×{w}"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..ho {
                for xx in 0..wo {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for idx in [
                        base + 2 * y * w + 2 * xx + 1,
                        base + (2 * y + 1) * w + 2 * xx,
                        base + (2 * y + 1) * w + 2 * xx + 1,
                    ] {
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let rg = self.requires_grad(x);
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(value, rg, Op::MaxPool { x, argmax }))
    }

    /// Bilinear ×2 upsampling, half-pixel convention with edge clamping.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let rows = kernels::bilinear_taps(h, 2 * h);
        let cols = kernels::bilinear_taps(w, 2 * w);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * 4 * h * w];
        for (p, dst) in out.chunks_mut(4 * h * w).enumerate() {
            kernels::resample_plane(&src[p * h * w..(p + 1) * h * w], h, w, &rows, &cols, dst);
        }
        let rg = self.requires_grad(x);
        let value = Tensor::new(&[n, c, 2 * h, 2 * w], out)?;
        Ok(self.push(value, rg, Op::Upsample { x, rows, cols }))
    }

    /// Layer normalization across channels at every spatial position, with a
    /// learnable per-channel scale `gamma` and shift `beta`.
    pub fn layer_norm_channels(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "layer norm affine params must be [{c}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let hw = h * w;
        let src = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; n * hw];
        let mut out = vec![0.0; src.len()];
        let mut mean = vec![0.0; hw];
        let mut var = vec![0.0; hw];
        for s in 0..n {
            let base = s * c * hw;
            mean.fill(0.0);
            var.fill(0.0);
            for ch in 0..c {
                for (m, v) in mean.iter_mut().zip(&src[base + ch * hw..][..hw]) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= c as f64);
            for ch in 0..c {
                for ((acc, v), m) in var.iter_mut().zip(&src[base + ch * hw..][..hw]).zip(&mean) {
                    *acc += (v - m) * (v - m);
                }
            }
            let istd = &mut inv_std[s * hw..(s + 1) * hw];
            for (i, v) in istd.iter_mut().zip(&var) {
                *i = 1.0 / (v / c as f64 + LAYER_NORM_EPS).sqrt();
            }
            for ch in 0..c {
                let off = base + ch * hw;
                for p in 0..hw {
                    let xh = (src[off + p] - mean[p]) * istd[p];
                    xhat[off + p] = xh;
                    out[off + p] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let value = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Concatenates along axis 1. All parts must agree on every other axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let ref_shape = self.shape(first).to_vec();
        if ref_shape.len() < 2 {
            return Err(Error::shape(format!("concat needs rank >= 2, got {ref_shape:?}")));
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != ref_shape.len() || s[0] != ref_shape[0] || s[2..] != ref_shape[2..] {
                return Err(Error::shape(format!(
                    "cannot concat {s:?} with {ref_shape:?} along channels"
                )));
            }
            channels += s[1];
        }
        let outer = ref_shape[0];
        let inner: usize = ref_shape[2..].iter().product();
        let mut out = Vec::with_capacity(outer * channels * inner);
        for s in 0..outer {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[s * c * inner..(s + 1) * c * inner]);
            }
        }
        let mut shape = ref_shape;
        shape[1] = channels;
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(&shape, out)?, rg, Op::Concat(parts.to_vec())))
    }

    /// Channels `start..start+len` along axis 1.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || len == 0 || start + len > shape[1] {
            return Err(Error::shape(format!(
                "channel slice {start}..{} out of range for {shape:?}",
                start + len
            )));
        }
        let (outer, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for s in 0..outer {
            out.extend_from_slice(&src[(s * c + start) * inner..(s * c + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[1] = len;
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(&out_shape, out)?, rg, Op::Slice { x, start }))
    }

    /// Splits axis 1 into `parts` equal chunks.
    pub fn split_channels(&mut self, x: Var, parts: usize) -> Result<Vec<Var>> {
        let c = self.shape(x).get(1).copied().unwrap_or(0);
        if parts == 0 || c % parts != 0 {
            return Err(Error::shape(format!(
                "cannot split {c} channels into {parts} equal parts"
            )));
        }
        let len = c / parts;
        (0..parts).map(|i| self.slice_channels(x, i * len, len)).collect()
    }

    // ---------------------------------------------------------------------
    // losses over two-channel logits (channel 0 = foreground)

    fn fg_probs(&self, logits: Var, target: &[f64]) -> Result<(usize, usize, Vec<f64>)> {
        let (n, c, h, w) = self.value(logits).dims4()?;
        if c != 2 {
            return Err(Error::shape(format!("loss expects 2 logit channels, got {c}")));
        }
        let hw = h * w;
        if target.len() != n * hw {
            return Err(Error::shape(format!(
                "target has {} pixels, logits {:?} need {}",
                target.len(),
                self.shape(logits),
                n * hw
            )));
        }
        let l = self.value(logits).data();
        let mut p = Vec::with_capacity(n * hw);
        for s in 0..n {
            let fg = &l[s * 2 * hw..][..hw];
            let bg = &l[(s * 2 + 1) * hw..][..hw];
            p.extend(fg.iter().zip(bg).map(|(a, b)| stable_sigmoid(a - b)));
        }
        Ok((n, hw, p))
    }

    /// Mean per-pixel softmax cross-entropy against a binary target
    /// (`1.0` = foreground).
    pub fn cross_entropy(&mut self, logits: Var, target: &[f64]) -> Result<Var> {
        let (n, hw, prob_fg) = self.fg_probs(logits, target)?;
        let l = self.value(logits).data();
        let mut total = 0.0;
        for s in 0..n {
            for p in 0..hw {
                let (a, b) = (l[s * 2 * hw + p], l[(s * 2 + 1) * hw + p]);
                // -log softmax of the target class, computed as softplus
                let margin = if target[s * hw + p] > 0.5 { b - a } else { a - b };
                total += softplus(margin);
            }
        }
        let value = Tensor::scalar(total / (n * hw) as f64);
        let rg = self.requires_grad(logits);
        Ok(self.push(
            value,
            rg,
            Op::CrossEntropy {
                logits,
                target: target.to_vec(),
                prob_fg,
            },
        ))
    }

    /// Soft-Dice loss on the foreground probability, averaged over samples:
    /// `1 - (2·Σpt + 1) / (Σp + Σt + 1)`.
    pub fn soft_dice(&mut self, logits: Var, target: &[f64]) -> Result<Var> {
        let (n, hw, prob_fg) = self.fg_probs(logits, target)?;
        let mut total = 0.0;
        for s in 0..n {
            let (p, t) = (&prob_fg[s * hw..][..hw], &target[s * hw..][..hw]);
            let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
            let denom: f64 = p.iter().sum::<f64>() + t.iter().sum::<f64>();
            total += 1.0 - (2.0 * inter + SOFT_DICE_SMOOTH) / (denom + SOFT_DICE_SMOOTH);
        }
        let value = Tensor::scalar(total / n as f64);
        let rg = self.requires_grad(logits);
        Ok(self.push(
            value,
            rg,
            Op::SoftDice {
                logits,
                target: target.to_vec(),
                prob_fg,
            },
        ))
    }

    // ---------------------------------------------------------------------
    // reverse pass

    /// Back-propagates from a one-element `loss`.
    ///
    /// Errors if `loss` is not scalar, or if gradients from a previous call
    /// have not been cleared with [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autograd(
                "backward called twice without zero_grad".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Autograd(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::ones_like(self.value(loss)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_backward(i, g.data());
            self.nodes[i].grad = Some(g);
            for (v, d) in contributions {
                self.accumulate(v, d);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(&delta) {
                    *a += b;
                }
            }
            None => {
                node.grad = Some(
                    Tensor::new(node.value.shape(), delta).expect("gradient matches value shape"),
                );
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn zeros_for(&self, v: Var) -> Vec<f64> {
        vec![0.0; self.value(v).numel()]
    }

    /// Gradients of node `i`'s inputs given its output gradient `g`.
    fn local_backward(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    res.push((*a, reduce_broadcast(g, out_shape, self.shape(*a))));
                }
                if self.wants(*b) {
                    let mut d = reduce_broadcast(g, out_shape, self.shape(*b));
                    if sign < 0.0 {
                        d.iter_mut().for_each(|v| *v = -*v);
                    }
                    res.push((*b, d));
                }
            }
            Op::Mul(a, b) => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if !self.wants(this) {
                        continue;
                    }
                    let ov = self.value(other);
                    let full: Vec<f64> = if ov.shape() == out_shape {
                        g.iter().zip(ov.data()).map(|(x, y)| x * y).collect()
                    } else {
                        broadcast_index(ov.shape(), out_shape)
                            .iter()
                            .zip(g)
                            .map(|(&j, gv)| gv * ov.data()[j])
                            .collect()
                    };
                    res.push((this, reduce_broadcast(&full, out_shape, self.shape(this))));
                }
            }
            Op::Scale(a, f) => {
                if self.wants(*a) {
                    res.push((*a, g.iter().map(|v| v * f).collect()));
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    // dA = G·Bᵀ
                    let mut d = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, (n, 1), tb.data(), (1, n), 0.0, &mut d, (k, 1));
                    res.push((*a, d));
                }
                if self.wants(*b) {
                    // dB = Aᵀ·G
                    let mut d = vec![0.0; k * n];
                    kernels::gemm(k, m, n, ta.data(), (1, k), g, (n, 1), 0.0, &mut d, (n, 1));
                    res.push((*b, d));
                }
            }
            Op::Sigmoid(a) => {
                if self.wants(*a) {
                    let y = node.value.data();
                    res.push((*a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()));
                }
            }
            Op::Tanh(a) => {
                if self.wants(*a) {
                    let y = node.value.data();
                    res.push((*a, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect()));
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let x = self.value(*a).data();
                    res.push((
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                            .collect(),
                    ));
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    res.push((*a, vec![g[0]; self.value(*a).numel()]));
                }
            }
            Op::Conv2d { x, w, b, pad } => {
                let (n, cin, h, wd) = self.value(*x).dims4().expect("recorded 4-D");
                let (cout, _, k, _) = self.value(*w).dims4().expect("recorded 4-D");
                let geom = ConvGeom { cin, h, w: wd, k, pad: *pad };
                let plane = geom.out_h() * geom.out_w();
                let mut dx = self.wants(*x).then(|| self.zeros_for(*x));
                let mut dw = self.wants(*w).then(|| self.zeros_for(*w));
                let mut db = b.filter(|b| self.wants(*b)).map(|b| self.zeros_for(b));
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                for s in 0..n {
                    let in_len = cin * h * wd;
                    kernels::conv2d_backward(
                        geom,
                        &xv[s * in_len..(s + 1) * in_len],
                        wv,
                        cout,
                        &g[s * cout * plane..(s + 1) * cout * plane],
                        dx.as_mut().map(|d| &mut d[s * in_len..(s + 1) * in_len]),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                }
                res.extend(dx.map(|d| (*x, d)));
                res.extend(dw.map(|d| (*w, d)));
                if let (Some(b), Some(d)) = (b, db) {
                    res.push((*b, d));
                }
            }
            Op::Depthwise { x, w, b, pad } => {
                let (n, c, h, wd) = self.value(*x).dims4().expect("recorded 4-D");
                let k = self.shape(*w)[2];
                let geom = ConvGeom { cin: 1, h, w: wd, k, pad: *pad };
                let plane = geom.out_h() * geom.out_w();
                let mut dx = self.wants(*x).then(|| self.zeros_for(*x));
                let mut dw = self.wants(*w).then(|| self.zeros_for(*w));
                let mut db = b.filter(|b| self.wants(*b)).map(|b| self.zeros_for(b));
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                for s in 0..n {
                    let in_len = c * h * wd;
                    kernels::depthwise_backward(
                        c,
                        geom,
                        &xv[s * in_len..(s + 1) * in_len],
                        wv,
                        &g[s * c * plane..(s + 1) * c * plane],
                        dx.as_mut().map(|d| &mut d[s * in_len..(s + 1) * in_len]),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                }
                res.extend(dx.map(|d| (*x, d)));
                res.extend(dw.map(|d| (*w, d)));
                if let (Some(b), Some(d)) = (b, db) {
                    res.push((*b, d));
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.wants(*x) {
                    let mut d = self.zeros_for(*x);
                    for (gv, &idx) in g.iter().zip(argmax) {
                        d[idx as usize] += gv;
                    }
                    res.push((*x, d));
                }
            }
            Op::Upsample { x, rows, cols } => {
                if self.wants(*x) {
                    let (_, _, h, w) = self.value(*x).dims4().expect("recorded 4-D");
                    let mut d = self.zeros_for(*x);
                    for (p, dst) in d.chunks_mut(h * w).enumerate() {
                        let gp = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                        kernels::resample_plane_backward(gp, w, rows, cols, dst);
                    }
                    res.push((*x, d));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = node.value.dims4().expect("recorded 4-D");
                let hw = h * w;
                let gv = self.value(*gamma).data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            for p in 0..hw {
                                dg[ch] += g[off + p] * xhat[off + p];
                                dbeta[ch] += g[off + p];
                            }
                        }
                    }
                    if self.wants(*gamma) {
                        res.push((*gamma, dg));
                    }
                    if self.wants(*beta) {
                        res.push((*beta, dbeta));
                    }
                }
                if self.wants(*x) {
                    let mut d = vec![0.0; g.len()];
                    let mut sum_d = vec![0.0; hw];
                    let mut sum_dx = vec![0.0; hw];
                    for s in 0..n {
                        sum_d.fill(0.0);
                        sum_dx.fill(0.0);
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            for p in 0..hw {
                                let dxh = g[off + p] * gv[ch];
                                sum_d[p] += dxh;
                                sum_dx[p] += dxh * xhat[off + p];
                            }
                        }
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            for p in 0..hw {
                                let dxh = g[off + p] * gv[ch];
                                d[off + p] = inv_std[s * hw + p] / c as f64
                                    * (c as f64 * dxh - sum_d[p] - xhat[off + p] * sum_dx[p]);
                            }
                        }
                    }
                    res.push((*x, d));
                }
            }
            Op::Concat(parts) => {
                let outer = out_shape[0];
                let total_c = out_shape[1];
                let inner: usize = out_shape[2..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(outer * c * inner);
                        for s in 0..outer {
                            let start = (s * total_c + offset) * inner;
                            d.extend_from_slice(&g[start..start + c * inner]);
                        }
                        res.push((p, d));
                    }
                    offset += c;
                }
            }
            Op::Slice { x, start } => {
                if self.wants(*x) {
                    let src_shape = self.shape(*x);
                    let (outer, c) = (src_shape[0], src_shape[1]);
                    let len = out_shape[1];
                    let inner: usize = src_shape[2..].iter().product();
                    let mut d = self.zeros_for(*x);
                    for s in 0..outer {
                        let dst = (s * c + start) * inner;
                        d[dst..dst + len * inner]
                            .copy_from_slice(&g[s * len * inner..(s + 1) * len * inner]);
                    }
                    res.push((*x, d));
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                prob_fg,
            } => {
                if self.wants(*logits) {
                    let (n, _, h, w) = self.value(*logits).dims4().expect("recorded 4-D");
                    let hw = h * w;
                    let scale = g[0] / (n * hw) as f64;
                    let mut d = self.zeros_for(*logits);
                    for s in 0..n {
                        for p in 0..hw {
                            let diff = (prob_fg[s * hw + p] - target[s * hw + p]) * scale;
                            d[s * 2 * hw + p] = diff;
                            d[(s * 2 + 1) * hw + p] = -diff;
                        }
                    }
                    res.push((*logits, d));
                }
            }
            Op::SoftDice {
                logits,
                target,
                prob_fg,
            } => {
                if self.wants(*logits) {
                    let (n, _, h, w) = self.value(*logits).dims4().expect("recorded 4-D");
                    let hw = h * w;
                    let mut d = self.zeros_for(*logits);
                    for s in 0..n {
                        let (p, t) = (&prob_fg[s * hw..][..hw], &target[s * hw..][..hw]);
                        let num: f64 =
                            2.0 * p.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() + SOFT_DICE_SMOOTH;
                        let den: f64 =
                            p.iter().sum::<f64>() + t.iter().sum::<f64>() + SOFT_DICE_SMOOTH;
                        let scale = g[0] / n as f64;
                        for q in 0..hw {
                            // d(1 - num/den)/dp
                            let dldp = -(2.0 * t[q] * den - num) / (den * den) * scale;
                            let dpdz = p[q] * (1.0 - p[q]);
                            d[s * 2 * hw + q] = dldp * dpdz;
                            d[(s * 2 + 1) * hw + q] = -dldp * dpdz;
                        }
                    }
                    res.push((*logits, d));
                }
            }
        }
        res
    }
}

fn conv_geom(cin: usize, h: usize, w: usize, k: usize, pad: usize) -> Result<ConvGeom> {
    if k == 0 || h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::shape(format!(
            "kernel {k}×{k} with padding {pad} does not fit a {h}×{w} input"
        )));
    }
    Ok(ConvGeom { cin, h, w, k, pad })
}

pub(crate) fn stable_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^v)` without overflow.
fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// Broadcast result of two shapes; shorter shapes are left-padded with ones.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        std::iter::repeat_n(1, rank - s.len()).chain(s.iter().copied()).collect()
    };
    let (pa, pb) = (pad(a), pad(b));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            (x, y) if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(Error::shape(format!(
                "shapes {a:?} and {b:?} are not broadcast-compatible"
            ))),
        })
        .collect()
}

/// For every element of `out` (row-major), the flat index of the element of
/// a tensor of shape `src` that broadcasts onto it.
fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let padded: Vec<usize> = std::iter::repeat_n(1, rank - src.len())
        .chain(src.iter().copied())
        .collect();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    let numel: usize = out.iter().product();
    let mut idx = vec![0usize; rank];
    let mut res = Vec::with_capacity(numel);
    let mut flat = 0;
    for _ in 0..numel {
        res.push(flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out[d] {
                break;
            }
            flat -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    res
}

/// Sums a gradient of shape `out` down to the broadcast source shape `src`.
fn reduce_broadcast(g: &[f64], out: &[usize], src: &[usize]) -> Vec<f64> {
    if out == src {
        return g.to_vec();
    }
    let mut d = vec![0.0; src.iter().product()];
    for (gv, j) in g.iter().zip(broadcast_index(src, out)) {
        d[j] += gv;
    }
    d
}
