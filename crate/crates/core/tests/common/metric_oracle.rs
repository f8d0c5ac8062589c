//! Metrics recomputed from set sizes.

use casunext::image::Mask;
use casunext::metrics::{self, ConfusionCounts};
use rand::Rng;

struct Sets {
    pred: u64,
    truth: u64,
    both: u64,
    neither: u64,
}

fn count_sets(pred: &Mask, truth: &Mask) -> Sets {
    let mut s = Sets {
        pred: 0,
        truth: 0,
        both: 0,
        neither: 0,
    };
    for r in 0..pred.height() {
        for c in 0..pred.width() {
            let (p, t) = (pred.get(r, c), truth.get(r, c));
            s.pred += p as u64;
            s.truth += t as u64;
            s.both += (p && t) as u64;
            s.neither += (!p && !t) as u64;
        }
    }
    s
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Compares every metric with the set-size oracle. Fractions and values
/// must match exactly; the Dice–IoU identity to 1e-12.
pub fn check_pair(pred: &Mask, truth: &Mask) -> Result<(), String> {
    let s = count_sets(pred, truth);
    let total = (pred.height() * pred.width()) as u64;
    let union = s.pred + s.truth - s.both;
    let counts = ConfusionCounts::from_masks(pred, truth).map_err(|e| e.to_string())?;
    let fail = |what: &str| Err(format!("{what} differs on a {}×{} pair", pred.height(), pred.width()));

    if counts.total() != total {
        return fail("pixel total");
    }
    if counts.dice_fraction() != (2 * s.both, s.pred + s.truth) {
        return fail("dice fraction");
    }
    if counts.iou_fractions() != [(s.both, union), (s.neither, total - s.both)] {
        return fail("iou fractions");
    }
    if counts.sensitivity_fraction() != (s.both, s.truth) {
        return fail("sensitivity fraction");
    }
    let dice = ratio(2 * s.both, s.pred + s.truth);
    let miou = (ratio(s.both, union) + ratio(s.neither, total - s.both)) / 2.0;
    let sens = ratio(s.both, s.truth);
    if metrics::dice(pred, truth).unwrap() != dice {
        return fail("dice");
    }
    if metrics::miou(pred, truth).unwrap() != miou {
        return fail("miou");
    }
    if metrics::sensitivity(pred, truth).unwrap() != sens {
        return fail("sensitivity");
    }
    let iou = counts.iou_foreground();
    if (dice - 2.0 * iou / (1.0 + iou)).abs() > 1e-12 {
        return fail("dice-iou identity");
    }
    if ![dice, miou, sens].iter().all(|v| (0.0..=1.0).contains(v)) {
        return fail("range");
    }
    Ok(())
}

/// `count` random pairs with sides 1..=32; a quarter of the masks are
/// forced empty and a quarter full.
pub fn random_pairs(count: usize, seed: u64) -> Vec<(Mask, Mask)> {
    let mut rng = casunext::rng::stream(seed, "mask-pairs");
    (0..count)
        .map(|_| {
            let h = rng.gen_range(1..=32);
            let w = rng.gen_range(1..=32);
            let density: f64 = rng.gen();
            let make = |rng: &mut casunext::rng::Rng| match rng.gen_range(0..4) {
                0 => Mask::empty(h, w),
                1 => Mask::full(h, w),
                _ => {
                    let bits = (0..h * w).map(|_| rng.gen_bool(density)).collect();
                    Mask::new(h, w, bits).unwrap()
                }
            };
            let a = make(&mut rng);
            let b = make(&mut rng);
            (a, b)
        })
        .collect()
}
