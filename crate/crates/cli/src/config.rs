use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use casunext::ablation::Variant;
use casunext::cascade::GeometrySpec;
use casunext::phantom::PhantomSpec;
use casunext::train::{Role, TrainConfig};
use casunext::ModelConfig;
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    Attention,
    Depthwise,
    Cascade,
}

impl Ablation {
    pub fn variant(self) -> Variant {
        match self {
            Ablation::None => Variant::Full,
            Ablation::Attention => Variant::WithoutAttention,
            Ablation::Depthwise => Variant::WithoutDepthwise,
            Ablation::Cascade => Variant::WithoutCascade,
        }
    }
}

/// Everything a run depends on. `model` is shared by both networks; input
/// sizes come from `geometry`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub geometry: GeometrySpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn for_scale(scale: Scale) -> Self {
        match scale {
            Scale::Desk => Self {
                seed: 0,
                phantom: PhantomSpec::default(),
                geometry: GeometrySpec::desk(),
                model: ModelConfig {
                    width_multiplier: 0.25,
                    ..ModelConfig::default()
                },
                train: TrainConfig::desk(),
            },
            Scale::Paper => Self {
                seed: 0,
                phantom: PhantomSpec {
                    frame_size: 512,
                    ..PhantomSpec::default()
                },
                geometry: GeometrySpec::paper(),
                model: ModelConfig::default(),
                train: TrainConfig::paper(),
            },
        }
    }

    /// Scale defaults, overlaid with `file` if given, with `seed` copied
    /// into every component.
    pub fn resolve(scale: Scale, file: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let base = Self::for_scale(scale);
        let mut cfg = match file {
            None => base,
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                let overlay: toml::Table = toml::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?;
                let mut merged = toml::Table::try_from(&base)?;
                merge(&mut merged, overlay);
                merged
                    .try_into()
                    .with_context(|| format!("invalid config {}", path.display()))?
            }
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.phantom.seed = cfg.seed;
        cfg.model.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.geometry.validate()?;
        self.train.validate()?;
        self.model_for(Role::Loc, Ablation::None).validate()?;
        self.model_for(Role::Seg, Ablation::None).validate()?;
        Ok(())
    }

    /// Network configuration for `role`; the ablation only affects the
    /// fine network.
    pub fn model_for(&self, role: Role, ablation: Ablation) -> ModelConfig {
        match role {
            Role::Loc => ModelConfig {
                input_size: self.geometry.resize_to,
                ..self.model.clone()
            },
            Role::Seg => {
                let base = ModelConfig {
                    input_size: self.geometry.crop_to,
                    ..self.model.clone()
                };
                ablation.variant().apply(&base, self.geometry.resize_to)
            }
        }
    }

    pub fn set_epochs(&mut self, role: Option<Role>, epochs: usize) -> Result<()> {
        if epochs == 0 {
            bail!("--epochs must be positive");
        }
        match role {
            Some(Role::Loc) => self.train.epochs_loc = epochs,
            Some(Role::Seg) => self.train.epochs_seg = epochs,
            None => {
                self.train.epochs_loc = epochs;
                self.train.epochs_seg = epochs;
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
