mod common;

use casunext::{Graph, Tensor};
use common::gate_oracle::{upsample_plane, worst_error, zero_parameters_give_plain_concat};

#[test]
fn matches_scalar_trace_on_two_by_two_outputs() {
    let worst = worst_error(200, 1, 1);
    assert!(worst <= 1e-12, "max abs error {worst:e}");
}

#[test]
fn matches_scalar_trace_on_four_by_four_outputs() {
    let worst = worst_error(100, 2, 2);
    assert!(worst <= 1e-12, "max abs error {worst:e}");
}

#[test]
fn zero_parameters_reduce_to_concat() {
    for seed in 0..5 {
        assert!(zero_parameters_give_plain_concat(seed));
    }
}

#[test]
fn upsample_oracle_agrees_with_graph() {
    let src: Vec<f64> = (0..9).map(|v| (v * v) as f64 * 0.1).collect();
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[1, 1, 3, 3], src.clone()).unwrap());
    let u = g.upsample2x(x).unwrap();
    for (a, b) in g.value(u).data().iter().zip(upsample_plane(&src, 3)) {
        assert!((a - b).abs() <= 1e-15);
    }
}
