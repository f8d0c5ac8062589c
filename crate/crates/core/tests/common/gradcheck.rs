//! Central finite differences against the tape gradients.

use casunext::attention::AttentionGate;
use casunext::layers::{Bound, Conv2d, DepthwiseSeparable, Init, InvertedBottleneck, ParamStore};
use casunext::{Graph, ModelConfig, Network, Tensor, Var};
use rand::seq::index::sample;

const STEP: f64 = 1e-6;

pub struct Case {
    pub name: &'static str,
    pub tolerance: f64,
    /// Worst relative error over the checked tensors.
    pub run: fn() -> f64,
}

pub fn random(seed: u64, shape: &[usize]) -> Tensor {
    Init { seed }.uniform("x", shape, 1)
}

/// `‖a − b‖ / (‖a‖ + ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na + nb == 0.0 {
        0.0
    } else {
        diff / (na + nb)
    }
}

/// Reduces an arbitrary output to a scalar with fixed random weights so
/// every output element contributes a distinct amount.
fn project(g: &mut Graph, out: Var, seed: u64) -> Var {
    let r = g.constant(random(seed ^ 0xabc, g.shape(out)));
    let prod = g.mul(out, r).unwrap();
    g.sum(prod)
}

/// Worst relative error of the gradients of `f` with respect to each input.
/// An all-zero numeric gradient counts as a failure.
pub fn check_fn(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        let l = project(&mut g, out, 7);
        g.value(l).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let l = project(&mut g, out, 7);
    g.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros_like(&inputs[k]));
        let mut numeric = Vec::with_capacity(inputs[k].numel());
        for i in 0..inputs[k].numel() {
            let mut ts = inputs.to_vec();
            ts[k].data_mut()[i] += STEP;
            let plus = eval(&ts);
            ts[k].data_mut()[i] -= 2.0 * STEP;
            let minus = eval(&ts);
            numeric.push((plus - minus) / (2.0 * STEP));
        }
        if numeric.iter().all(|&v| v == 0.0) {
            return f64::INFINITY;
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    worst
}

/// Relative error of the gradients of a parameterized module with respect
/// to its input and parameters. With `sample_size`, only that many random
/// coordinates per tensor are compared.
pub fn check_module(
    store: &ParamStore,
    x: &Tensor,
    sample_size: Option<usize>,
    forward: impl Fn(&mut Graph, &Bound, Var) -> Var,
) -> f64 {
    let eval = |store: &ParamStore, x: &Tensor| {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = forward(&mut g, &p, xv);
        let l = project(&mut g, out, 11);
        g.value(l).item()
    };
    let mut g = Graph::new();
    let p = store.bind(&mut g, true);
    let xv = g.param(x.clone());
    let out = forward(&mut g, &p, xv);
    let l = project(&mut g, out, 11);
    g.backward(l).unwrap();

    let mut analytic = vec![g.grad(xv).unwrap().clone()];
    analytic.extend(store.gradients(&g, &p));
    let mut rng = casunext::rng::stream(5, "coords");
    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    for (k, grad) in analytic.iter().enumerate() {
        let n = grad.numel();
        let coords: Vec<usize> = match sample_size {
            Some(s) if s < n => sample(&mut rng, n, s).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let bump = |delta: f64| {
                if k == 0 {
                    let mut xx = x.clone();
                    xx.data_mut()[i] += delta;
                    eval(store, &xx)
                } else {
                    let mut s = store.clone();
                    s.tensors_mut()[k - 1].data_mut()[i] += delta;
                    eval(&s, x)
                }
            };
            all_n.push((bump(STEP) - bump(-STEP)) / (2.0 * STEP));
            all_a.push(grad.data()[i]);
        }
    }
    relative_error(&all_a, &all_n)
}

fn elementwise() -> f64 {
    let a = random(1, &[2, 3, 2, 2]);
    let b = random(2, &[2, 3, 2, 2]);
    let bias = random(3, &[1, 3, 1, 1]);
    let m = random(4, &[3, 4]);
    let n = random(5, &[4, 2]);
    [
        check_fn(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]).unwrap()),
        check_fn(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]).unwrap()),
        check_fn(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]).unwrap()),
        check_fn(&[a.clone(), bias.clone()], |g, v| g.add(v[0], v[1]).unwrap()),
        check_fn(&[a.clone(), bias], |g, v| g.mul(v[0], v[1]).unwrap()),
        check_fn(&[a.clone()], |g, v| g.sigmoid(v[0])),
        check_fn(&[a.clone()], |g, v| g.tanh(v[0])),
        check_fn(&[a.clone()], |g, v| g.relu(v[0])),
        check_fn(&[a.clone()], |g, v| g.mean(v[0])),
        check_fn(&[a], |g, v| g.scale(v[0], -2.5)),
        check_fn(&[m, n], |g, v| g.matmul(v[0], v[1]).unwrap()),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

fn dense_conv() -> f64 {
    let x = random(1, &[2, 3, 6, 5]);
    let w = random(2, &[4, 3, 3, 3]);
    let b = random(3, &[4]);
    let w7 = random(4, &[2, 3, 7, 7]);
    check_fn(&[x.clone(), w, b], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1).unwrap())
        .max(check_fn(&[x, w7], |g, v| g.conv2d(v[0], v[1], None, 3).unwrap()))
}

fn depthwise_conv() -> f64 {
    let x = random(1, &[2, 3, 6, 6]);
    let w = random(2, &[3, 1, 5, 5]);
    let b = random(3, &[3]);
    check_fn(&[x, w, b], |g, v| g.depthwise_conv2d(v[0], v[1], Some(v[2]), 2).unwrap())
}

fn max_pool() -> f64 {
    check_fn(&[random(1, &[2, 2, 6, 8])], |g, v| g.maxpool2x2(v[0]).unwrap())
}

fn bilinear_upsample() -> f64 {
    check_fn(&[random(1, &[2, 2, 3, 4])], |g, v| g.upsample2x(v[0]).unwrap())
}

fn layer_norm() -> f64 {
    let x = random(1, &[2, 4, 3, 3]);
    let gamma = random(2, &[4]);
    let beta = random(3, &[4]);
    check_fn(&[x, gamma, beta], |g, v| g.layer_norm_channels(v[0], v[1], v[2]).unwrap())
}

fn channel_ops() -> f64 {
    let a = random(1, &[2, 2, 3, 3]);
    let b = random(2, &[2, 3, 3, 3]);
    let c = random(3, &[1, 6, 2, 2]);
    [
        check_fn(&[a, b.clone()], |g, v| g.concat_channels(&[v[0], v[1]]).unwrap()),
        check_fn(&[b], |g, v| g.slice_channels(v[0], 1, 2).unwrap()),
        check_fn(&[c], |g, v| {
            let parts = g.split_channels(v[0], 3).unwrap();
            let t = g.mul(parts[0], parts[2]).unwrap();
            g.add(t, parts[1]).unwrap()
        }),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

fn losses() -> f64 {
    let logits = random(1, &[2, 2, 4, 4]);
    let target: Vec<f64> = (0..32).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect();
    check_fn(&[logits.clone()], |g, v| g.cross_entropy(v[0], &target).unwrap())
        .max(check_fn(&[logits], |g, v| g.soft_dice(v[0], &target).unwrap()))
}

fn conv_layer() -> f64 {
    let mut store = ParamStore::new();
    let conv = Conv2d::same(&mut store, Init { seed: 1 }, "c", 3, 4, 3);
    check_module(&store, &random(9, &[2, 3, 5, 5]), None, |g, p, x| conv.forward(g, p, x).unwrap())
}

fn separable_layer() -> f64 {
    let mut store = ParamStore::new();
    let conv = DepthwiseSeparable::same(&mut store, Init { seed: 1 }, "ds", 3, 5, 7);
    check_module(&store, &random(9, &[2, 3, 8, 8]), None, |g, p, x| conv.forward(g, p, x).unwrap())
}

fn bottleneck_block() -> f64 {
    let mut store = ParamStore::new();
    let block = InvertedBottleneck::new(&mut store, Init { seed: 1 }, "ib", 3, 4, 7);
    check_module(&store, &random(9, &[2, 3, 8, 8]), None, |g, p, x| block.forward(g, p, x).unwrap())
}

fn attention_gate() -> f64 {
    let mut store = ParamStore::new();
    let gate = AttentionGate::new(&mut store, Init { seed: 1 }, "ag", 3, 2);
    // x2 rides along as a pseudo-parameter so both inputs are checked
    let x2 = store.add("x2", random(10, &[2, 2, 6, 6]));
    check_module(&store, &random(9, &[2, 3, 3, 3]), None, |g, p, x1| {
        gate.forward(g, p, x1, p[x2]).unwrap()
    })
}

fn reduced_network(attention: bool, separable: bool) -> f64 {
    let net = Network::build(&ModelConfig {
        input_size: 16,
        width_multiplier: 0.25,
        use_attention: attention,
        use_depthwise: separable,
        seed: 4,
        ..ModelConfig::default()
    })
    .unwrap();
    check_module(net.params(), &random(9, &[1, 1, 16, 16]), Some(6), |g, p, x| {
        net.forward(g, p, x).unwrap()
    })
}

pub const CASES: &[Case] = &[
    Case { name: "elementwise", tolerance: 1e-4, run: elementwise },
    Case { name: "conv2d", tolerance: 1e-4, run: dense_conv },
    Case { name: "depthwise conv2d", tolerance: 1e-4, run: depthwise_conv },
    Case { name: "max-pool", tolerance: 1e-4, run: max_pool },
    Case { name: "bilinear upsample", tolerance: 1e-4, run: bilinear_upsample },
    Case { name: "channel layer norm", tolerance: 1e-4, run: layer_norm },
    Case { name: "channel concat/slice/split", tolerance: 1e-4, run: channel_ops },
    Case { name: "cross-entropy and soft dice", tolerance: 1e-4, run: losses },
    Case { name: "conv layer", tolerance: 1e-4, run: conv_layer },
    Case { name: "depthwise-separable layer", tolerance: 1e-4, run: separable_layer },
    Case { name: "inverted bottleneck", tolerance: 1e-4, run: bottleneck_block },
    Case { name: "attention gate", tolerance: 1e-4, run: attention_gate },
    Case { name: "reduced network", tolerance: 1e-3, run: || reduced_network(true, true) },
    Case {
        name: "reduced network, plain skips and dense convs",
        tolerance: 1e-3,
        run: || reduced_network(false, false),
    },
];
