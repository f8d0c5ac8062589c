//! Convolutional building blocks.
//!
//! Layers own no tensors directly. Their parameters live in a
//! [`ParamStore`] under stable dotted names (`enc1.block0.expand.weight`),
//! and a forward pass reads them through a [`Bound`] view that maps every
//! parameter onto a leaf of the current [`Graph`].

use std::ops::Index;

use rand::Rng as _;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named parameter collection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Scalar count over parameters whose name does not end in `.bias`
    /// or `.beta`.
    pub fn num_weight_scalars(&self) -> usize {
        self.iter()
            .filter(|(n, _)| !n.ends_with(".bias") && !n.ends_with(".beta"))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Puts every parameter on the graph as a leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| g.leaf(t.clone(), trainable))
                .collect(),
        }
    }

    /// Collects the gradients of a bound store after `backward`, with zeros
    /// for parameters the loss did not reach.
    pub fn gradients(&self, g: &Graph, bound: &Bound) -> Vec<Tensor> {
        self.tensors
            .iter()
            .zip(&bound.vars)
            .map(|(t, v)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros_like(t)))
            .collect()
    }
}

/// Graph handles for every parameter of a [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Parameter initializer: fan-in scaled uniform weights (bound
/// `sqrt(1/fan_in)`) drawn from a per-parameter stream, zero biases.
#[derive(Clone, Copy, Debug)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    pub fn uniform(&self, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = (1.0 / fan_in as f64).sqrt();
        let mut r = rng::stream(self.seed, name);
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| r.gen_range(-bound..bound)).collect();
        Tensor::new(shape, data).expect("shape and data agree")
    }
}

fn check_channels(g: &Graph, x: Var, expected: usize, layer: &str) -> Result<()> {
    let c = g.shape(x).get(1).copied();
    if c != Some(expected) {
        return Err(Error::shape(format!(
            "{layer} expects {expected} input channels, got input {:?}",
            g.shape(x)
        )));
    }
    Ok(())
}

/// Standard stride-1 convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl Conv2d {
    /// A "same"-padded convolution; `kernel` must be odd.
    pub fn same(
        store: &mut ParamStore,
        init: Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel, got {kernel}");
        let wname = format!("{name}.weight");
        let weight = init.uniform(
            &wname,
            &[out_channels, in_channels, kernel, kernel],
            in_channels * kernel * kernel,
        );
        Self {
            weight: store.add(wname, weight),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
            padding: (kernel - 1) / 2,
        }
    }

    pub fn pointwise(
        store: &mut ParamStore,
        init: Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        Self::same(store, init, name, in_channels, out_channels, 1)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        check_channels(g, x, self.in_channels, "conv2d")?;
        g.conv2d(x, p[self.weight], Some(p[self.bias]), self.padding)
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }
}

/// Depthwise `K×K` filtering followed by a `1×1` pointwise channel mix.
#[derive(Clone, Debug)]
pub struct DepthwiseSeparable {
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub pointwise: ParamId,
    pub pointwise_bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl DepthwiseSeparable {
    pub fn same(
        store: &mut ParamStore,
        init: Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel, got {kernel}");
        let dname = format!("{name}.depthwise.weight");
        let pname = format!("{name}.pointwise.weight");
        let dw = init.uniform(&dname, &[in_channels, 1, kernel, kernel], kernel * kernel);
        let pw = init.uniform(&pname, &[out_channels, in_channels, 1, 1], in_channels);
        Self {
            depthwise: store.add(dname, dw),
            depthwise_bias: store.add(format!("{name}.depthwise.bias"), Tensor::zeros(&[in_channels])),
            pointwise: store.add(pname, pw),
            pointwise_bias: store.add(
                format!("{name}.pointwise.bias"),
                Tensor::zeros(&[out_channels]),
            ),
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        check_channels(g, x, self.in_channels, "depthwise-separable conv")?;
        let pad = (self.kernel - 1) / 2;
        let d = g.depthwise_conv2d(x, p[self.depthwise], Some(p[self.depthwise_bias]), pad)?;
        g.conv2d(d, p[self.pointwise], Some(p[self.pointwise_bias]), 0)
    }

    /// `K²·C_in + C_in·C_out`, biases excluded.
    pub fn weight_count(&self) -> usize {
        self.kernel * self.kernel * self.in_channels + self.in_channels * self.out_channels
    }

    /// The dense `C_out×C_in×K×K` kernel and bias computing the same map.
    pub fn equivalent_dense(&self, store: &ParamStore) -> (Tensor, Tensor) {
        let (cin, cout, k) = (self.in_channels, self.out_channels, self.kernel);
        let dw = store.get(self.depthwise).data();
        let db = store.get(self.depthwise_bias).data();
        let pw = store.get(self.pointwise).data();
        let pb = store.get(self.pointwise_bias).data();
        let mut kernel = vec![0.0; cout * cin * k * k];
        let mut bias = pb.to_vec();
        for co in 0..cout {
            for ci in 0..cin {
                let mix = pw[co * cin + ci];
                bias[co] += mix * db[ci];
                for t in 0..k * k {
                    kernel[(co * cin + ci) * k * k + t] = mix * dw[ci * k * k + t];
                }
            }
        }
        (
            Tensor::new(&[cout, cin, k, k], kernel).expect("sized above"),
            Tensor::new(&[cout], bias).expect("sized above"),
        )
    }
}

/// A `K×K` channel-changing convolution that is either depthwise-separable
/// or dense, depending on the build's ablation switch.
#[derive(Clone, Debug)]
pub enum SpatialConv {
    Separable(DepthwiseSeparable),
    Dense(Conv2d),
}

impl SpatialConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        separable: bool,
    ) -> Self {
        if separable {
            Self::Separable(DepthwiseSeparable::same(
                store,
                init,
                name,
                in_channels,
                out_channels,
                kernel,
            ))
        } else {
            Self::Dense(Conv2d::same(store, init, name, in_channels, out_channels, kernel))
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        match self {
            Self::Separable(l) => l.forward(g, p, x),
            Self::Dense(l) => l.forward(g, p, x),
        }
    }

    pub fn weight_count(&self) -> usize {
        match self {
            Self::Separable(l) => l.weight_count(),
            Self::Dense(l) => l.weight_count(),
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Self::Separable(l) => l.out_channels,
            Self::Dense(l) => l.out_channels,
        }
    }
}

/// Expand (1×1, ×r) → channel layer norm → ReLU → depthwise K×K → ReLU →
/// project (1×1, back to C), added to the input.
#[derive(Clone, Debug)]
pub struct InvertedBottleneck {
    pub expand: Conv2d,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub project: Conv2d,
    pub channels: usize,
    pub hidden: usize,
    pub kernel: usize,
}

impl InvertedBottleneck {
    pub fn new(
        store: &mut ParamStore,
        init: Init,
        name: &str,
        channels: usize,
        expansion: usize,
        kernel: usize,
    ) -> Self {
        let hidden = channels * expansion;
        let expand = Conv2d::pointwise(store, init, &format!("{name}.expand"), channels, hidden);
        let norm_gamma = store.add(format!("{name}.norm.gamma"), Tensor::ones(&[hidden]));
        let norm_beta = store.add(format!("{name}.norm.beta"), Tensor::zeros(&[hidden]));
        let dname = format!("{name}.depthwise.weight");
        let dw = init.uniform(&dname, &[hidden, 1, kernel, kernel], kernel * kernel);
        let depthwise = store.add(dname, dw);
        let depthwise_bias = store.add(format!("{name}.depthwise.bias"), Tensor::zeros(&[hidden]));
        let project = Conv2d::pointwise(store, init, &format!("{name}.project"), hidden, channels);
        Self {
            expand,
            norm_gamma,
            norm_beta,
            depthwise,
            depthwise_bias,
            project,
            channels,
            hidden,
            kernel,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        check_channels(g, x, self.channels, "inverted bottleneck")?;
        let e = self.expand.forward(g, p, x)?;
        let n = g.layer_norm_channels(e, p[self.norm_gamma], p[self.norm_beta])?;
        let a = g.relu(n);
        let pad = (self.kernel - 1) / 2;
        let d = g.depthwise_conv2d(a, p[self.depthwise], Some(p[self.depthwise_bias]), pad)?;
        let a = g.relu(d);
        let proj = self.project.forward(g, p, a)?;
        g.add(x, proj)
    }

    pub fn weight_count(&self) -> usize {
        self.expand.weight_count()
            + self.hidden
            + self.hidden * self.kernel * self.kernel
            + self.project.weight_count()
    }
}

/// Max pooling, as a free function for symmetry with the layers above.
pub fn maxpool2x2(g: &mut Graph, x: Var) -> Result<Var> {
    g.maxpool2x2(x)
}

pub fn bilinear_upsample2x(g: &mut Graph, x: Var) -> Result<Var> {
    g.upsample2x(x)
}

/// Pointwise projection to two logits per pixel (foreground, background).
pub fn pointwise_head(store: &mut ParamStore, init: Init, name: &str, in_channels: usize) -> Conv2d {
    Conv2d::pointwise(store, init, name, in_channels, 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(store: &ParamStore, x: Tensor, f: impl Fn(&mut Graph, &Bound, Var) -> Result<Var>) -> Tensor {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(x);
        let y = f(&mut g, &p, xv).unwrap();
        g.value(y).clone()
    }

    fn zero_all(store: &mut ParamStore) {
        for t in store.tensors_mut() {
            t.data_mut().fill(0.0);
        }
    }

    #[test]
    fn conv_counts_neighbours_with_same_padding() {
        let mut store = ParamStore::new();
        let conv = Conv2d::same(&mut store, Init { seed: 1 }, "c", 1, 1, 3);
        store.get_mut(conv.weight).data_mut().fill(1.0);
        let y = run(&store, Tensor::ones(&[1, 1, 3, 3]), |g, p, x| conv.forward(g, p, x));
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn one_by_one_identity_passes_through() {
        let mut store = ParamStore::new();
        let conv = Conv2d::pointwise(&mut store, Init { seed: 1 }, "c", 3, 3);
        let w = store.get_mut(conv.weight).data_mut();
        w.fill(0.0);
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let x = Init { seed: 9 }.uniform("x", &[2, 3, 4, 5], 1);
        let y = run(&store, x.clone(), |g, p, v| conv.forward(g, p, v));
        assert_eq!(y, x);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut store = ParamStore::new();
        let conv = Conv2d::same(&mut store, Init { seed: 1 }, "c", 2, 4, 3);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        assert!(conv.forward(&mut g, &p, x).is_err());
    }

    #[test]
    fn separable_with_delta_and_identity_is_identity() {
        let mut store = ParamStore::new();
        let l = DepthwiseSeparable::same(&mut store, Init { seed: 3 }, "s", 3, 3, 7);
        zero_all(&mut store);
        for c in 0..3 {
            store.get_mut(l.depthwise).data_mut()[c * 49 + 24] = 1.0;
            store.get_mut(l.pointwise).data_mut()[c * 3 + c] = 1.0;
        }
        let x = Init { seed: 4 }.uniform("x", &[1, 3, 9, 9], 1);
        let y = run(&store, x.clone(), |g, p, v| l.forward(g, p, v));
        assert_eq!(y, x);
    }

    #[test]
    fn separable_parameter_economics() {
        let mut store = ParamStore::new();
        let l = DepthwiseSeparable::same(&mut store, Init { seed: 3 }, "s", 16, 32, 7);
        let enumerated = store.get(l.depthwise).numel() + store.get(l.pointwise).numel();
        assert_eq!(enumerated, 784 + 512);
        assert_eq!(l.weight_count(), 1296);
        assert_eq!(store.num_weight_scalars(), 1296);

        let mut dense = ParamStore::new();
        let d = Conv2d::same(&mut dense, Init { seed: 3 }, "d", 16, 32, 7);
        assert_eq!(dense.get(d.weight).numel(), 25088);
    }

    #[test]
    fn separable_equals_composed_dense_conv() {
        let mut store = ParamStore::new();
        let l = DepthwiseSeparable::same(&mut store, Init { seed: 11 }, "s", 3, 4, 5);
        // non-zero biases so the bias folding is exercised too
        for (i, v) in store.get_mut(l.depthwise_bias).data_mut().iter_mut().enumerate() {
            *v = 0.1 * i as f64 - 0.05;
        }
        store.get_mut(l.pointwise_bias).data_mut()[2] = 0.3;
        let (kernel, bias) = l.equivalent_dense(&store);
        let x = Init { seed: 12 }.uniform("x", &[1, 3, 8, 8], 1);
        let sep = run(&store, x.clone(), |g, p, v| l.forward(g, p, v));

        let mut g = Graph::new();
        let xv = g.constant(x);
        let kv = g.constant(kernel);
        let bv = g.constant(bias);
        let dense = g.conv2d(xv, kv, Some(bv), 2).unwrap();
        for (a, b) in sep.data().iter().zip(g.value(dense).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn bottleneck_with_zero_weights_is_residual_identity() {
        let mut store = ParamStore::new();
        let b = InvertedBottleneck::new(&mut store, Init { seed: 5 }, "b", 4, 4, 7);
        zero_all(&mut store);
        let x = Init { seed: 6 }.uniform("x", &[2, 4, 8, 8], 1);
        let y = run(&store, x.clone(), |g, p, v| b.forward(g, p, v));
        assert_eq!(y, x);
    }

    #[test]
    fn bottleneck_preserves_shape() {
        let mut store = ParamStore::new();
        let b = InvertedBottleneck::new(&mut store, Init { seed: 5 }, "b", 16, 4, 7);
        let x = Init { seed: 6 }.uniform("x", &[2, 16, 32, 32], 1);
        let y = run(&store, x, |g, p, v| b.forward(g, p, v));
        assert_eq!(y.shape(), &[2, 16, 32, 32]);
        assert_eq!(b.weight_count(), store.num_weight_scalars());
    }

    #[test]
    fn zero_head_gives_even_odds() {
        let mut store = ParamStore::new();
        let head = pointwise_head(&mut store, Init { seed: 1 }, "head", 5);
        zero_all(&mut store);
        let y = run(&store, Tensor::ones(&[1, 5, 3, 3]), |g, p, x| head.forward(g, p, x));
        assert_eq!(y.shape(), &[1, 2, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_identity_passthrough() {
        let mut store = ParamStore::new();
        let head = pointwise_head(&mut store, Init { seed: 1 }, "head", 2);
        store.get_mut(head.weight).data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let x = Init { seed: 2 }.uniform("x", &[1, 2, 3, 3], 1);
        let y = run(&store, x.clone(), |g, p, v| head.forward(g, p, v));
        assert_eq!(y, x);
    }

    #[test]
    fn same_padding_preserves_every_size() {
        let mut store = ParamStore::new();
        let conv = Conv2d::same(&mut store, Init { seed: 1 }, "c", 1, 1, 7);
        let sep = DepthwiseSeparable::same(&mut store, Init { seed: 1 }, "s", 1, 2, 7);
        for h in 8..=64 {
            for w in 8..=64 {
                let mut g = Graph::new();
                let p = store.bind(&mut g, false);
                let x = g.constant(Tensor::zeros(&[1, 1, h, w]));
                let a = conv.forward(&mut g, &p, x).unwrap();
                let b = sep.forward(&mut g, &p, x).unwrap();
                assert_eq!(g.shape(a)[2..], [h, w]);
                assert_eq!(g.shape(b)[2..], [h, w]);
            }
        }
    }

    #[test]
    fn upsample_constant_and_single_pixel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 2, 3, 5], 0.7));
        let y = bilinear_upsample2x(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 6, 10]);
        assert!(g.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let one = g.constant(Tensor::full(&[1, 1, 1, 1], -3.0));
        let y = bilinear_upsample2x(&mut g, one).unwrap();
        assert_eq!(g.value(y).data(), &[-3.0; 4]);
    }

    #[test]
    fn maxpool_picks_window_max() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = maxpool2x2(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
    }
}
