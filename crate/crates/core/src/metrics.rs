//! Overlap metrics: Dice, mean IoU over {foreground, background}, and
//! foreground sensitivity, all derived from pixel confusion counts.
//!
//! Zero denominators follow fixed conventions: Dice is 1 when both masks are
//! empty, a class with no predicted and no true pixels has IoU 1, and
//! sensitivity is 1 when the truth is empty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Mask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn from_masks(pred: &Mask, truth: &Mask) -> Result<Self> {
        if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
            return Err(Error::shape(format!(
                "prediction is {}×{}, truth is {}×{}",
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            )));
        }
        let mut c = Self::default();
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }

    /// Dice as an integer fraction `2·TP / (2·TP + FP + FN)`.
    pub fn dice_fraction(&self) -> (u64, u64) {
        (2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    /// Foreground and background IoU fractions.
    pub fn iou_fractions(&self) -> [(u64, u64); 2] {
        [
            (self.tp, self.tp + self.fp + self.fn_),
            (self.tn, self.tn + self.fn_ + self.fp),
        ]
    }

    pub fn sensitivity_fraction(&self) -> (u64, u64) {
        (self.tp, self.tp + self.fn_)
    }

    pub fn dice(&self) -> f64 {
        ratio_or_one(self.dice_fraction())
    }

    pub fn iou_foreground(&self) -> f64 {
        ratio_or_one(self.iou_fractions()[0])
    }

    pub fn miou(&self) -> f64 {
        let [fg, bg] = self.iou_fractions();
        (ratio_or_one(fg) + ratio_or_one(bg)) / 2.0
    }

    pub fn sensitivity(&self) -> f64 {
        ratio_or_one(self.sensitivity_fraction())
    }
}

fn ratio_or_one((num, den): (u64, u64)) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn dice(pred: &Mask, truth: &Mask) -> Result<f64> {
    Ok(ConfusionCounts::from_masks(pred, truth)?.dice())
}

/// Mean IoU over the two classes (foreground, background).
pub fn miou(pred: &Mask, truth: &Mask) -> Result<f64> {
    Ok(ConfusionCounts::from_masks(pred, truth)?.miou())
}

pub fn sensitivity(pred: &Mask, truth: &Mask) -> Result<f64> {
    Ok(ConfusionCounts::from_masks(pred, truth)?.sensitivity())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub dice: f64,
    pub miou: f64,
    pub sensitivity: f64,
    pub counts: ConfusionCounts,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub dice: f64,
    pub miou: f64,
    pub sensitivity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_sample: Vec<SampleMetrics>,
    /// Mean of the per-sample metrics.
    pub mean: MetricSummary,
    /// Metrics of the summed confusion counts.
    pub pooled: MetricSummary,
    pub totals: ConfusionCounts,
}

impl MetricsReport {
    pub fn from_pairs<'a>(
        pairs: impl IntoIterator<Item = (&'a str, &'a Mask, &'a Mask)>,
    ) -> Result<Self> {
        let per_sample = pairs
            .into_iter()
            .map(|(id, pred, truth)| {
                let counts = ConfusionCounts::from_masks(pred, truth)?;
                Ok(SampleMetrics {
                    id: id.to_string(),
                    dice: counts.dice(),
                    miou: counts.miou(),
                    sensitivity: counts.sensitivity(),
                    counts,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_samples(per_sample))
    }

    pub fn from_samples(per_sample: Vec<SampleMetrics>) -> Self {
        let n = per_sample.len().max(1) as f64;
        let mean = MetricSummary {
            dice: per_sample.iter().map(|s| s.dice).sum::<f64>() / n,
            miou: per_sample.iter().map(|s| s.miou).sum::<f64>() / n,
            sensitivity: per_sample.iter().map(|s| s.sensitivity).sum::<f64>() / n,
        };
        let totals = per_sample
            .iter()
            .fold(ConfusionCounts::default(), |acc, s| acc.merge(&s.counts));
        let pooled = MetricSummary {
            dice: totals.dice(),
            miou: totals.miou(),
            sensitivity: totals.sensitivity(),
        };
        Self {
            per_sample,
            mean,
            pooled,
            totals,
        }
    }

    /// Aligned plain-text table: one row per sample and a mean row.
    pub fn table(&self) -> String {
        let mut out = format!("{:<16} {:>8} {:>8} {:>8}\n", "id", "dice", "miou", "sens");
        for s in &self.per_sample {
            out.push_str(&format!(
                "{:<16} {:>8.4} {:>8.4} {:>8.4}\n",
                s.id, s.dice, s.miou, s.sensitivity
            ));
        }
        out.push_str(&format!(
            "{:<16} {:>8.4} {:>8.4} {:>8.4}\n",
            "mean", self.mean.dice, self.mean.miou, self.mean.sensitivity
        ));
        out
    }
}
