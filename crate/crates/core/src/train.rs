//! Mini-batch training with Adam, validation-based checkpoint selection and
//! held-out evaluation of the two cascade stages.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::cascade::{self, GeometrySpec, LabeledImage};
use crate::error::{Error, Result};
use crate::image::Mask;
use crate::layers::ParamStore;
use crate::metrics::{ConfusionCounts, MetricsReport, SampleMetrics};
use crate::net::Network;
use crate::par;
use crate::phantom::{Regime, SegSample, Split};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Dice,
    /// Cross-entropy plus soft Dice, weighted equally.
    Combined,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Loc,
    Seg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_loc: usize,
    pub epochs_seg: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub loss: LossKind,
    /// Fraction of the training split held back for checkpoint selection.
    pub validation_fraction: f64,
    /// Add zoomed ground-truth crops to the localization training set.
    pub refeed: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            epochs_loc: 20,
            epochs_seg: 40,
            batch_size: 2,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            loss: LossKind::Combined,
            validation_fraction: 0.1,
            refeed: true,
            seed: 0,
        }
    }

    pub fn paper() -> Self {
        Self {
            epochs_loc: 100,
            epochs_seg: 300,
            ..Self::desk()
        }
    }

    pub fn epochs(&self, role: Role) -> usize {
        match role {
            Role::Loc => self.epochs_loc,
            Role::Seg => self.epochs_seg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs_loc == 0 || self.epochs_seg == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("validation_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
            step: 0,
            m: params.tensors().iter().map(Tensor::zeros_like).collect(),
            v: params.tensors().iter().map(Tensor::zeros_like).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Loss and parameter gradients for one example.
pub fn sample_gradients(
    net: &Network,
    example: &LabeledImage,
    loss: LossKind,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let p = net.params().bind(&mut g, true);
    let x = g.constant(example.image.to_tensor());
    let logits = net.forward(&mut g, &p, x)?;
    let target = example.mask.as_f64();
    let l = match loss {
        LossKind::CrossEntropy => g.cross_entropy(logits, &target)?,
        LossKind::Dice => g.soft_dice(logits, &target)?,
        LossKind::Combined => {
            let ce = g.cross_entropy(logits, &target)?;
            let dice = g.soft_dice(logits, &target)?;
            g.add(ce, dice)?
        }
    };
    g.backward(l)?;
    Ok((g.value(l).item(), net.params().gradients(&g, &p)))
}

/// Mean loss and gradient over `batch`, reduced in input order.
pub fn batch_gradients(
    net: &Network,
    batch: &[&LabeledImage],
    loss: LossKind,
) -> Result<(f64, Vec<Tensor>)> {
    let per_sample = par::map(batch, |ex| sample_gradients(net, ex, loss));
    let mut total = 0.0;
    let mut sum: Option<Vec<Tensor>> = None;
    for r in per_sample {
        let (l, grads) = r?;
        total += l;
        match &mut sum {
            None => sum = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.add_assign(g)?;
                }
            }
        }
    }
    let n = batch.len() as f64;
    let mut grads = sum.ok_or_else(|| Error::config("empty batch"))?;
    for t in &mut grads {
        t.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    Ok((total / n, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_dice: Option<f64>,
    pub val_miou: Option<f64>,
    pub wall_time: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_dice: Option<f64>,
}

/// Predicted masks for `examples`.
pub fn predict_masks(net: &Network, examples: &[LabeledImage]) -> Result<Vec<Mask>> {
    par::map(examples, |ex| {
        Mask::from_logits(&net.predict_logits(&ex.image.to_tensor())?, 0)
    })
    .into_iter()
    .collect()
}

/// Per-sample metrics of `net` on `examples`.
pub fn evaluate(net: &Network, examples: &[LabeledImage]) -> Result<MetricsReport> {
    let preds = predict_masks(net, examples)?;
    MetricsReport::from_pairs(
        examples
            .iter()
            .zip(&preds)
            .map(|(ex, p)| (ex.id.as_str(), p, &ex.mask)),
    )
}

/// Trains `net` for `epochs` on `train`, keeping the parameters of the epoch
/// with the best validation Dice (the last epoch if `val` is empty).
/// `on_epoch` sees each log entry as it is produced.
pub fn train(
    net: &mut Network,
    train: &[LabeledImage],
    val: &[LabeledImage],
    cfg: &TrainConfig,
    epochs: usize,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if epochs == 0 {
        return Err(Error::config("epochs must be positive"));
    }
    let size = net.config().input_size;
    if let Some(ex) = train
        .iter()
        .chain(val)
        .find(|ex| ex.image.height() != size || ex.image.width() != size)
    {
        return Err(Error::shape(format!(
            "network input is {size}×{size}, example {} is {}×{}",
            ex.id,
            ex.image.height(),
            ex.image.width()
        )));
    }

    let start = Instant::now();
    let mut opt = Adam::new(net.params(), cfg);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(epochs);
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    for epoch in 1..=epochs {
        let mut r = rng::stream(cfg.seed, &format!("train/epoch{epoch}"));
        order.shuffle(&mut r);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledImage> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = batch_gradients(net, &batch, cfg.loss)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::NonFinite(format!(
                    "loss {loss} at epoch {epoch} on batch starting with {}",
                    batch[0].id
                )));
            }
            opt.step(net.params_mut(), &grads);
            loss_sum += loss * chunk.len() as f64;
        }
        let (val_dice, val_miou) = if val.is_empty() {
            (None, None)
        } else {
            let report = evaluate(net, val)?;
            (Some(report.mean.dice), Some(report.mean.miou))
        };
        let entry = EpochLog {
            epoch,
            loss: loss_sum / train.len() as f64,
            val_dice,
            val_miou,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} val dice {}",
            entry.loss,
            val_dice.map_or("-".into(), |d| format!("{d:.4}"))
        );
        on_epoch(&entry);
        log.push(entry);
        let score = val_dice.unwrap_or(f64::NEG_INFINITY);
        if val.is_empty() || best.as_ref().map_or(true, |(b, _, _)| score > *b) {
            best = Some((score, epoch, net.params().tensors().to_vec()));
        }
    }
    let (score, best_epoch, tensors) = best.expect("at least one epoch ran");
    net.params_mut().tensors_mut().clone_from_slice(&tensors);
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_dice: score.is_finite().then_some(score),
    })
}

/// Phantoms preprocessed to network frames and divided into training,
/// validation and held-out test sets.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub geometry: GeometrySpec,
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    /// Raw held-out samples, parallel to `test`.
    pub test_samples: Vec<SegSample>,
}

impl ExperimentData {
    /// The validation subset is drawn from the training split with a seeded
    /// shuffle; the test split is only used for held-out metrics.
    pub fn new(samples: &[SegSample], geo: &GeometrySpec, cfg: &TrainConfig) -> Result<Self> {
        geo.validate()?;
        let train_samples: Vec<SegSample> = samples
            .iter()
            .filter(|s| s.split == Split::Train)
            .cloned()
            .collect();
        let test_samples: Vec<SegSample> = samples
            .iter()
            .filter(|s| s.split == Split::Test)
            .cloned()
            .collect();
        let mut frames = cascade::frame_examples(&train_samples, geo)?;
        let n_val = (frames.len() as f64 * cfg.validation_fraction).round() as usize;
        let mut r = rng::stream(cfg.seed, "validation");
        frames.shuffle(&mut r);
        let train = frames.split_off(n_val);
        Ok(Self {
            geometry: *geo,
            train,
            val: frames,
            test: cascade::frame_examples(&test_samples, geo)?,
            test_samples,
        })
    }

    /// Localization training set, with zoomed copies when refeeding.
    pub fn loc_train(&self, cfg: &TrainConfig) -> Vec<LabeledImage> {
        if cfg.refeed {
            cascade::refeed_samples(&self.train, &self.geometry)
        } else {
            self.train.clone()
        }
    }
}

/// Trains a network of `config` for `role`. Localization and full-frame
/// networks see whole frames; cascade fine networks see ground-truth
/// centred crops.
pub fn train_role(
    data: &ExperimentData,
    config: &crate::net::ModelConfig,
    cfg: &TrainConfig,
    role: Role,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(Network, TrainOutcome)> {
    let mut net = Network::build(config)?;
    let (train_set, val_set) = match role {
        Role::Loc => (data.loc_train(cfg), data.val.clone()),
        Role::Seg if config.use_cascade => (
            cascade::crop_examples(&data.train, &data.geometry),
            cascade::crop_examples(&data.val, &data.geometry),
        ),
        Role::Seg => (data.train.clone(), data.val.clone()),
    };
    let outcome = train(&mut net, &train_set, &val_set, cfg, cfg.epochs(role), on_epoch)?;
    Ok((net, outcome))
}

/// Held-out evaluation of a trained cascade.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeEvaluation {
    /// Localization masks against the full-frame truth.
    pub localization: MetricsReport,
    /// Pasted-back fine masks against the full-frame truth.
    pub full_frame: MetricsReport,
    /// Fine masks inside windows centred on the predicted localization.
    pub crop_predicted_center: MetricsReport,
    /// Fine masks inside windows centred on the ground truth.
    pub crop_truth_center: MetricsReport,
    /// Fraction of truth pixels inside the predicted window, per sample.
    pub window_coverage: Vec<f64>,
    pub fallbacks: usize,
    pub regimes: Vec<Regime>,
}

impl CascadeEvaluation {
    /// Mean full-frame Dice over test samples of `regime`.
    pub fn regime_dice(&self, regime: Regime) -> Option<f64> {
        mean_where(&self.full_frame.per_sample, &self.regimes, regime)
    }
}

fn mean_where(samples: &[SampleMetrics], regimes: &[Regime], regime: Regime) -> Option<f64> {
    let picked: Vec<f64> = samples
        .iter()
        .zip(regimes)
        .filter(|(_, &r)| r == regime)
        .map(|(s, _)| s.dice)
        .collect();
    (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
}

fn sample_metrics(id: &str, pred: &Mask, truth: &Mask) -> Result<SampleMetrics> {
    let counts = ConfusionCounts::from_masks(pred, truth)?;
    Ok(SampleMetrics {
        id: id.to_string(),
        dice: counts.dice(),
        miou: counts.miou(),
        sensitivity: counts.sensitivity(),
        counts,
    })
}

pub fn evaluate_cascade(loc: &Network, seg: &Network, data: &ExperimentData) -> Result<CascadeEvaluation> {
    let geo = &data.geometry;
    let rows = par::map_range(data.test.len(), |i| -> Result<_> {
        let ex = &data.test[i];
        let raw = &data.test_samples[i].image;
        let res = cascade::run_cascade(loc, seg, raw, geo)?;
        let truth_window = cascade::compute_center(&ex.mask, geo.crop_to);
        let at_truth = cascade::run_fine_stage(seg, raw, truth_window, geo)?;
        let inside = ex
            .mask
            .data()
            .iter()
            .enumerate()
            .filter(|&(k, &b)| b && res.window.contains(k / ex.mask.width(), k % ex.mask.width()))
            .count();
        let coverage = if ex.mask.count() == 0 {
            1.0
        } else {
            inside as f64 / ex.mask.count() as f64
        };
        Ok((
            sample_metrics(&ex.id, &res.loc_mask, &ex.mask)?,
            sample_metrics(&ex.id, &res.fine_mask_full, &ex.mask)?,
            sample_metrics(&ex.id, &res.fine_mask_crop, &res.window.crop_mask(&ex.mask))?,
            sample_metrics(&ex.id, &at_truth.fine_mask_crop, &truth_window.crop_mask(&ex.mask))?,
            coverage,
            res.window.fallback,
        ))
    });
    let (mut loc_m, mut full, mut crop_p, mut crop_t) = (vec![], vec![], vec![], vec![]);
    let (mut coverage, mut fallbacks) = (vec![], 0);
    for row in rows {
        let (a, b, c, d, cov, fb) = row?;
        loc_m.push(a);
        full.push(b);
        crop_p.push(c);
        crop_t.push(d);
        coverage.push(cov);
        fallbacks += fb as usize;
    }
    Ok(CascadeEvaluation {
        localization: MetricsReport::from_samples(loc_m),
        full_frame: MetricsReport::from_samples(full),
        crop_predicted_center: MetricsReport::from_samples(crop_p),
        crop_truth_center: MetricsReport::from_samples(crop_t),
        window_coverage: coverage,
        fallbacks,
        regimes: data.test_samples.iter().map(|s| s.regime).collect(),
    })
}

/// Held-out full-frame metrics of a single-stage network.
pub fn evaluate_full_frame(seg: &Network, data: &ExperimentData) -> Result<MetricsReport> {
    evaluate(seg, &data.test)
}
