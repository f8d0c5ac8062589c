mod common;

use casunext::image::Mask;
use common::metric_oracle::{check_pair, random_pairs};
use proptest::prelude::*;

fn mask_pair() -> impl Strategy<Value = (Mask, Mask)> {
    (1usize..=32, 1usize..=32, 0u8..4, 0u8..4).prop_flat_map(|(h, w, kp, kt)| {
        let n = h * w;
        (
            proptest::collection::vec(any::<bool>(), n),
            proptest::collection::vec(any::<bool>(), n),
        )
            .prop_map(move |(p, t)| {
                // kind 0 forces an empty mask, kind 1 a full one
                let shape = |kind: u8, bits: Vec<bool>| match kind {
                    0 => vec![false; bits.len()],
                    1 => vec![true; bits.len()],
                    _ => bits,
                };
                (
                    Mask::new(h, w, shape(kp, p)).unwrap(),
                    Mask::new(h, w, shape(kt, t)).unwrap(),
                )
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn metrics_match_set_counting((pred, truth) in mask_pair()) {
        check_pair(&pred, &truth).map_err(TestCaseError::fail)?;
    }
}

#[test]
fn edge_cases_by_enumeration() {
    for (h, w) in [(1, 1), (1, 5), (4, 1), (32, 32)] {
        let e = Mask::empty(h, w);
        let f = Mask::full(h, w);
        let checker = Mask::from_fn(h, w, |r, c| (r + c) % 2 == 0);
        for a in [&e, &f, &checker] {
            for b in [&e, &f, &checker] {
                check_pair(a, b).unwrap();
            }
        }
    }
    // every pair of 2×2 masks
    for a in 0u32..16 {
        for b in 0u32..16 {
            let pa = Mask::from_fn(2, 2, |r, c| a >> (2 * r + c) & 1 == 1);
            let pb = Mask::from_fn(2, 2, |r, c| b >> (2 * r + c) & 1 == 1);
            check_pair(&pa, &pb).unwrap();
        }
    }
}

#[test]
fn seeded_random_pairs() {
    for (a, b) in random_pairs(200, 3) {
        check_pair(&a, &b).unwrap();
    }
}
