//! End-to-end acceptance checks. Each test writes one `PASS`/`FAIL` line to
//! stderr (uncaptured) before asserting, so a full run lists every outcome.
//!
//! The phantom-training, ablation and robustness checks share one trained
//! cascade; with a single test thread it is built once, by whichever of
//! them runs first.

mod common;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use casunext::ablation::{self, AblationReport, Variant};
use casunext::cascade::GeometrySpec;
use casunext::image::Mask;
use casunext::layers::{Conv2d, DepthwiseSeparable, Init, ParamStore};
use casunext::phantom::{self, PhantomSpec, Regime};
use casunext::train::{self, CascadeEvaluation, ExperimentData, Role, TrainConfig};
use casunext::{ModelConfig, Network};

const LOC_DICE_MIN: f64 = 0.85;
const SEG_DICE_MIN: f64 = 0.90;
const TRAINING_BUDGET_SECS: f64 = 15.0 * 60.0;
const CASCADE_MARGIN: f64 = 0.02;
const REGIME_GAP_MAX: f64 = 0.05;

fn report(name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "[{verdict}] {name}: {detail}");
}

#[test]
fn gradient_suite() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut worst_small: f64 = 0.0;
    let mut worst_net: f64 = 0.0;
    for case in common::gradcheck::CASES {
        let err = (case.run)();
        if case.tolerance > 1e-4 {
            worst_net = worst_net.max(err);
        } else {
            worst_small = worst_small.max(err);
        }
        if !(err < case.tolerance) {
            failures.push(format!("{} {err:.2e}", case.name));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 60.0;
    report(
        "gradient suite",
        pass,
        &format!(
            "{} cases, worst layer error {worst_small:.2e} (< 1e-4), worst network error \
             {worst_net:.2e} (< 1e-3), {secs:.1}s (< 60s){}",
            common::gradcheck::CASES.len(),
            if failures.is_empty() { String::new() } else { format!(", failing: {}", failures.join("; ")) }
        ),
    );
    assert!(pass);
}

#[test]
fn attention_gate_oracle() {
    let instances = 200;
    let worst = common::gate_oracle::worst_error(instances, 1, 17);
    let zero_ok = (0..5).all(common::gate_oracle::zero_parameters_give_plain_concat);
    let pass = worst <= 1e-12 && zero_ok;
    report(
        "attention gate oracle",
        pass,
        &format!(
            "{instances} single-channel 2×2 instances, max abs error {worst:.1e} (<= 1e-12), \
             zero-parameter concat exact: {zero_ok}"
        ),
    );
    assert!(pass);
}

#[test]
fn metric_oracle() {
    let mut pairs = common::metric_oracle::random_pairs(300, 23);
    for (h, w) in [(1, 1), (7, 3), (32, 32)] {
        for a in [Mask::empty(h, w), Mask::full(h, w)] {
            for b in [Mask::empty(h, w), Mask::full(h, w)] {
                pairs.push((a.clone(), b));
            }
        }
    }
    let empty_or_full = pairs
        .iter()
        .filter(|(a, b)| [a, b].iter().any(|m| m.is_empty_mask() || m.count() == m.data().len()))
        .count();
    let failures: Vec<String> = pairs
        .iter()
        .filter_map(|(a, b)| common::metric_oracle::check_pair(a, b).err())
        .collect();
    let pass = failures.is_empty();
    report(
        "metric oracle",
        pass,
        &format!(
            "{} pairs ({empty_or_full} with an empty or full mask), exact fractions and values, \
             dice-iou identity to 1e-12{}",
            pairs.len(),
            failures.first().map(|f| format!(", first failure: {f}")).unwrap_or_default()
        ),
    );
    assert!(pass);
}

#[test]
fn separable_economics() {
    let mut store = ParamStore::new();
    let separable = DepthwiseSeparable::same(&mut store, Init { seed: 0 }, "ds", 16, 32, 7);
    let dense = Conv2d::same(&mut store, Init { seed: 0 }, "dense", 16, 32, 7);
    let enumerated = |prefix: &str| -> usize {
        store
            .iter()
            .filter(|(n, _)| n.starts_with(prefix) && !n.ends_with(".bias"))
            .map(|(_, t)| t.numel())
            .sum()
    };
    let (sep_n, dense_n) = (enumerated("ds."), enumerated("dense."));
    let build = |sep: bool| {
        Network::build(&ModelConfig {
            use_depthwise: sep,
            ..ModelConfig::default()
        })
        .unwrap()
        .params()
        .num_weight_scalars()
    };
    let (net_sep, net_dense) = (build(true), build(false));
    let pass = sep_n == 1296
        && dense_n == 25088
        && separable.weight_count() == sep_n
        && dense.weight_count() == dense_n
        && net_sep < net_dense;
    report(
        "depthwise-separable economics",
        pass,
        &format!(
            "K=7 16->32: {sep_n} vs {dense_n} weights (expect 1296 vs 25088); \
             network {net_sep} vs {net_dense} weights"
        ),
    );
    assert!(pass);
}

/// The trained desk-scale cascade and its held-out evaluation.
struct Trained {
    data: ExperimentData,
    train_cfg: TrainConfig,
    loc: Network,
    seg: Network,
    seg_model: ModelConfig,
    eval: CascadeEvaluation,
    loc_epochs: usize,
    seg_epochs: usize,
    seconds: f64,
}

fn desk_models() -> (ModelConfig, ModelConfig) {
    let base = ModelConfig {
        width_multiplier: 0.25,
        ..ModelConfig::default()
    };
    let geo = GeometrySpec::desk();
    (
        ModelConfig {
            input_size: geo.resize_to,
            ..base.clone()
        },
        ModelConfig {
            input_size: geo.crop_to,
            ..base
        },
    )
}

fn trained() -> &'static Trained {
    static TRAINED: OnceLock<Trained> = OnceLock::new();
    TRAINED.get_or_init(|| {
        let start = Instant::now();
        let samples = phantom::generate(&PhantomSpec::default()).expect("phantoms");
        let train_cfg = TrainConfig::desk();
        let data = ExperimentData::new(&samples, &GeometrySpec::desk(), &train_cfg).expect("data");
        let (loc_model, seg_model) = desk_models();
        let (loc, _) = train::train_role(&data, &loc_model, &train_cfg, Role::Loc, |_| {}).expect("loc");
        let (seg, _) = train::train_role(&data, &seg_model, &train_cfg, Role::Seg, |_| {}).expect("seg");
        let eval = train::evaluate_cascade(&loc, &seg, &data).expect("evaluation");
        Trained {
            loc_epochs: train_cfg.epochs_loc,
            seg_epochs: train_cfg.epochs_seg,
            data,
            train_cfg,
            loc,
            seg,
            seg_model,
            eval,
            seconds: start.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn phantom_training() {
    let t = trained();
    let loc = t.eval.localization.mean.dice;
    let crop = t.eval.crop_truth_center.mean.dice;
    let crop_pred = t.eval.crop_predicted_center.mean.dice;
    let covered = t.eval.window_coverage.iter().filter(|&&c| c >= 0.99).count();
    let pass = loc >= LOC_DICE_MIN && crop >= SEG_DICE_MIN && t.seconds < TRAINING_BUDGET_SECS;
    report(
        "phantom training",
        pass,
        &format!(
            "loc dice {loc:.4} after {} epochs (>= {LOC_DICE_MIN}), seg crop dice {crop:.4} after {} \
             epochs (>= {SEG_DICE_MIN}; {crop_pred:.4} at predicted centres), {:.0}s (< {:.0}s); \
             windows covering >= 99% of the brain: {covered}/{}, fallbacks {}",
            t.loc_epochs,
            t.seg_epochs,
            t.seconds,
            TRAINING_BUDGET_SECS,
            t.eval.window_coverage.len(),
            t.eval.fallbacks
        ),
    );
    assert!(pass);
}

#[test]
fn cascade_ablation() {
    let t = trained();
    let rep: AblationReport = ablation::ablate(
        &t.data,
        &t.loc,
        &t.seg_model,
        &t.train_cfg,
        &[(Variant::Full, &t.seg)],
    )
    .expect("ablation");
    let dice = |v| rep.row(v).map(|r| r.dice).unwrap_or(f64::NAN);
    let (full, without) = (dice(Variant::Full), dice(Variant::WithoutCascade));
    let pass = rep.rows.len() == 4 && full - without >= CASCADE_MARGIN;
    report(
        "cascade ablation",
        pass,
        &format!(
            "full {full:.4} vs without cascade {without:.4}, gain {:+.4} (>= {CASCADE_MARGIN}); \
             without attention {:.4}, without depthwise {:.4}; {} rows",
            full - without,
            dice(Variant::WithoutAttention),
            dice(Variant::WithoutDepthwise),
            rep.rows.len()
        ),
    );
    let mut err = std::io::stderr().lock();
    let _ = write!(err, "{}", rep.table());
    drop(err);
    assert!(pass);
}

#[test]
fn robustness_regimes() {
    let t = trained();
    let d = |r| t.eval.regime_dice(r).unwrap_or(f64::NAN);
    let (clean, artifact, abnormal) = (d(Regime::Clean), d(Regime::Artifact), d(Regime::Abnormal));
    let pass = clean - artifact <= REGIME_GAP_MAX && clean - abnormal <= REGIME_GAP_MAX;
    report(
        "robustness regimes",
        pass,
        &format!(
            "held-out dice clean {clean:.4}, artifact {artifact:.4}, abnormal {abnormal:.4}, \
             distractor {:.4}; allowed shortfall {REGIME_GAP_MAX}",
            d(Regime::Distractor)
        ),
    );
    assert!(pass);
}

/// A small but complete run: generate, train both stages, checkpoint and
/// evaluate. Returns every checkpoint file and the metrics JSON.
fn small_run(dir: &Path) -> (Vec<(String, Vec<u8>)>, String) {
    let spec = PhantomSpec {
        count: 20,
        frame_size: 64,
        seed: 31,
        ..PhantomSpec::default()
    };
    let geo = GeometrySpec {
        edge_crop: 96,
        resize_to: 64,
        crop_to: 32,
    };
    let cfg = TrainConfig {
        epochs_loc: 2,
        epochs_seg: 2,
        seed: 31,
        ..TrainConfig::desk()
    };
    let samples = phantom::generate(&spec).unwrap();
    let data = ExperimentData::new(&samples, &geo, &cfg).unwrap();
    let base = ModelConfig {
        width_multiplier: 0.25,
        seed: 31,
        ..ModelConfig::default()
    };
    let loc_model = ModelConfig { input_size: 64, ..base.clone() };
    let seg_model = ModelConfig { input_size: 32, ..base };
    let (loc, _) = train::train_role(&data, &loc_model, &cfg, Role::Loc, |_| {}).unwrap();
    let (seg, _) = train::train_role(&data, &seg_model, &cfg, Role::Seg, |_| {}).unwrap();
    loc.save(&dir.join("loc")).unwrap();
    seg.save(&dir.join("seg")).unwrap();
    let eval = train::evaluate_cascade(&loc, &seg, &data).unwrap();
    let mut files = Vec::new();
    for sub in ["loc", "seg"] {
        let mut names: Vec<_> = fs::read_dir(dir.join(sub))
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().to_string())
            .collect();
        names.sort();
        for n in names {
            let bytes = fs::read(dir.join(sub).join(&n)).unwrap();
            files.push((format!("{sub}/{n}"), bytes));
        }
    }
    (files, serde_json::to_string(&eval).unwrap())
}

#[test]
fn determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (files_a, metrics_a) = small_run(a.path());
    let (files_b, metrics_b) = small_run(b.path());
    let same_files = files_a == files_b;
    let same_metrics = metrics_a == metrics_b;
    let pass = same_files && same_metrics && !files_a.is_empty();
    report(
        "determinism",
        pass,
        &format!(
            "two runs: {} checkpoint files bitwise identical: {same_files}, metric JSON identical: \
             {same_metrics}",
            files_a.len()
        ),
    );
    assert!(pass);
}
