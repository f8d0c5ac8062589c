//! Component ablations of the fine network, all evaluated on held-out
//! full frames against the same localization network.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::net::{ModelConfig, Network};
use crate::train::{self, ExperimentData, Role, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    WithoutAttention,
    WithoutDepthwise,
    WithoutCascade,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::WithoutAttention,
        Variant::WithoutDepthwise,
        Variant::WithoutCascade,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutAttention => "without_attention",
            Variant::WithoutDepthwise => "without_depthwise",
            Variant::WithoutCascade => "without_cascade",
        }
    }

    /// The fine-network configuration of this variant. Without the cascade
    /// the network sees whole `frame`-sized inputs.
    pub fn apply(self, base: &ModelConfig, frame: usize) -> ModelConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::WithoutAttention => cfg.use_attention = false,
            Variant::WithoutDepthwise => cfg.use_depthwise = false,
            Variant::WithoutCascade => {
                cfg.use_cascade = false;
                cfg.input_size = frame;
            }
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub dice: f64,
    pub miou: f64,
    pub sensitivity: f64,
    pub weights: usize,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<18} {:>7} {:>8} {:>8} {:>8} {:>9}\n",
            "variant", "epochs", "dice", "miou", "sens", "weights"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<18} {:>7} {:>8.4} {:>8.4} {:>8.4} {:>9}\n",
                r.variant.name(),
                r.epochs,
                r.dice,
                r.miou,
                r.sensitivity,
                r.weights
            ));
        }
        out
    }
}

/// Trains and evaluates every variant. `loc` is shared by the cascade rows;
/// `trained` supplies fine networks that already exist, keyed by variant.
pub fn ablate(
    data: &ExperimentData,
    loc: &Network,
    base: &ModelConfig,
    cfg: &TrainConfig,
    trained: &[(Variant, &Network)],
) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(4);
    for variant in Variant::ALL {
        let model = variant.apply(base, data.geometry.resize_to);
        let owned;
        let net = match trained.iter().find(|(v, _)| *v == variant) {
            Some((_, net)) => *net,
            None => {
                let start = Instant::now();
                owned = train::train_role(data, &model, cfg, Role::Seg, |_| {})?.0;
                log::info!(
                    "{} trained in {:.1}s",
                    variant.name(),
                    start.elapsed().as_secs_f64()
                );
                &owned
            }
        };
        let report = if model.use_cascade {
            train::evaluate_cascade(loc, net, data)?.full_frame
        } else {
            train::evaluate_full_frame(net, data)?
        };
        rows.push(AblationRow {
            variant,
            dice: report.mean.dice,
            miou: report.mean.miou,
            sensitivity: report.mean.sensitivity,
            weights: net.weight_count(),
            epochs: cfg.epochs_seg,
        });
    }
    Ok(AblationReport { rows })
}
