//! The attention gate evaluated one pixel at a time with plain `f64`
//! arithmetic.

use casunext::attention::AttentionGate;
use casunext::layers::{Init, ParamStore};
use casunext::{Graph, Tensor};
use rand::Rng;

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Half-pixel bilinear doubling of one `n×n` plane, written out directly.
pub fn upsample_plane(src: &[f64], n: usize) -> Vec<f64> {
    let m = 2 * n;
    let coord = |i: usize| {
        let s = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = vec![0.0; m * m];
    for r in 0..m {
        let (r0, r1, fr) = coord(r);
        for c in 0..m {
            let (c0, c1, fc) = coord(c);
            let top = src[r0 * n + c0] * (1.0 - fc) + src[r0 * n + c1] * fc;
            let bottom = src[r1 * n + c0] * (1.0 - fc) + src[r1 * n + c1] * fc;
            out[r * m + c] = top * (1.0 - fr) + bottom * fr;
        }
    }
    out
}

struct Scalars {
    w1: [f64; 3],
    b1: [f64; 3],
    w2: f64,
    b2: f64,
    w3: f64,
    b3: f64,
}

/// `z` for single-channel inputs.
fn scalar_trace(p: &Scalars, x1: &[f64], n: usize, x2: &[f64]) -> Vec<f64> {
    let u = upsample_plane(x1, n);
    let mut y = Vec::with_capacity(u.len());
    for (&ui, &xi) in u.iter().zip(x2) {
        let c1 = p.w1[0] * ui + p.b1[0];
        let c2 = p.w1[1] * ui + p.b1[1];
        let c3 = p.w1[2] * ui + p.b1[2];
        let s = p.w2 * (c1 + xi) + p.b2;
        let y1 = s * xi;
        let y2 = sigmoid(c2) * c3.tanh();
        let gate = sigmoid(y1 + y2);
        y.push(p.w3 * gate + p.b3);
    }
    y.into_iter().chain(u).collect()
}

/// Worst absolute difference between the graph and the scalar trace over
/// `count` random single-channel instances with `n×n` high-level input.
pub fn worst_error(count: usize, n: usize, seed: u64) -> f64 {
    let mut rng = casunext::rng::stream(seed, "gate-oracle");
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let mut store = ParamStore::new();
        let gate = AttentionGate::new(&mut store, Init { seed: 0 }, "ag", 1, 1);
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
        }
        let get = |id| store.get(id).data().to_vec();
        let (w1, b1) = (get(gate.w1.weight), get(gate.w1.bias));
        let p = Scalars {
            w1: [w1[0], w1[1], w1[2]],
            b1: [b1[0], b1[1], b1[2]],
            w2: get(gate.w2.weight)[0],
            b2: get(gate.w2.bias)[0],
            w3: get(gate.w3.weight)[0],
            b3: get(gate.w3.bias)[0],
        };
        let x1: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x2: Vec<f64> = (0..4 * n * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let expected = scalar_trace(&p, &x1, n, &x2);

        let mut g = Graph::new();
        let bound = store.bind(&mut g, false);
        let v1 = g.constant(Tensor::new(&[1, 1, n, n], x1).unwrap());
        let v2 = g.constant(Tensor::new(&[1, 1, 2 * n, 2 * n], x2).unwrap());
        let z = gate.forward(&mut g, &bound, v1, v2).unwrap();
        assert_eq!(g.shape(z), &[1, 2, 2 * n, 2 * n]);
        for (a, b) in g.value(z).data().iter().zip(&expected) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// With every parameter zero, `z` must equal `concat(0, upsample(x1))`
/// exactly.
pub fn zero_parameters_give_plain_concat(seed: u64) -> bool {
    let mut store = ParamStore::new();
    let gate = AttentionGate::new(&mut store, Init { seed }, "ag", 3, 2);
    for t in store.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    let x1 = Init { seed: seed + 1 }.uniform("x1", &[2, 3, 4, 4], 1);
    let x2 = Init { seed: seed + 2 }.uniform("x2", &[2, 2, 8, 8], 1);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let v1 = g.constant(x1.clone());
    let v2 = g.constant(x2);
    let z = gate.forward(&mut g, &p, v1, v2).unwrap();
    let mut expected = vec![0.0; 2 * 5 * 64];
    for n in 0..2 {
        for c in 0..3 {
            let plane = &x1.data()[(n * 3 + c) * 16..][..16];
            let up = upsample_plane(plane, 4);
            expected[(n * 5 + 2 + c) * 64..][..64].copy_from_slice(&up);
        }
    }
    g.value(z).data() == expected.as_slice()
}
