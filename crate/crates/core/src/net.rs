//! The encoder/decoder network used for both cascade stages.
//!
//! Topology, for channel schedule `C[0..4]` and stage depths `D[0..4]`:
//!
//! * stem: dense `K×K` conv, `1 -> C[0]`, ReLU
//! * encoder stage `i`: `K×K` spatial conv raising channels to `C[i]`,
//!   `D[i]` inverted-bottleneck blocks, then 2×2 max-pool. The pre-pool
//!   activation is the stage's skip output.
//! * decoder stage `i` (deepest first): attention gate (or plain
//!   upsample+concat) of the running map with skip `i`, then a `K×K`
//!   spatial conv down to `C[i]` channels, ReLU
//! * head: 1×1 conv to two logits (foreground, background)
//!
//! The spatial convs are depthwise-separable unless the build disables it.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{self, AttentionGate};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{Bound, Conv2d, Init, InvertedBottleneck, ParamStore, SpatialConv};
use crate::tensor::Tensor;

pub const BASE_CHANNELS: [usize; 4] = [16, 32, 64, 128];
pub const STAGE_DEPTHS: [usize; 4] = [1, 1, 3, 1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Side length of the square input.
    pub input_size: usize,
    pub stem_kernel: usize,
    /// Kernel of every depthwise / spatial conv after the stem.
    pub kernel: usize,
    pub base_channels: [usize; 4],
    pub width_multiplier: f64,
    pub stage_depths: [usize; 4],
    pub expansion_ratio: usize,
    pub use_attention: bool,
    pub use_depthwise: bool,
    /// Read by the cascade pipeline; the network itself ignores it.
    pub use_cascade: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 128,
            stem_kernel: 7,
            kernel: 7,
            base_channels: BASE_CHANNELS,
            width_multiplier: 1.0,
            stage_depths: STAGE_DEPTHS,
            expansion_ratio: 4,
            use_attention: true,
            use_depthwise: true,
            use_cascade: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Channels per stage after applying the width multiplier.
    pub fn channel_schedule(&self) -> [usize; 4] {
        self.base_channels
            .map(|c| ((c as f64 * self.width_multiplier).round() as usize).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return Err(Error::config(format!(
                "input_size must be a positive multiple of 16, got {}",
                self.input_size
            )));
        }
        for (what, k) in [("stem_kernel", self.stem_kernel), ("kernel", self.kernel)] {
            if k % 2 == 0 {
                return Err(Error::config(format!("{what} must be odd, got {k}")));
            }
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::config("width_multiplier must be positive"));
        }
        let ch = self.channel_schedule();
        if ch.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "channel schedule {ch:?} must be strictly increasing"
            )));
        }
        if self.expansion_ratio == 0 {
            return Err(Error::config("expansion_ratio must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    entry: SpatialConv,
    blocks: Vec<InvertedBottleneck>,
}

#[derive(Clone, Debug)]
enum Skip {
    Gate(AttentionGate),
    Plain,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    skip: Skip,
    fuse: SpatialConv,
}

/// Handles to the main activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: Var,
    /// Pre-pool output of each encoder stage (the skip sources).
    pub encoder: Vec<Var>,
    pub bottleneck: Var,
    /// Output of each decoder stage, indexed like the encoder.
    pub decoder: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    params: ParamStore,
    stem: Conv2d,
    encoder: Vec<EncoderStage>,
    decoder: Vec<DecoderStage>,
    head: Conv2d,
}

impl Network {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let init = Init { seed: config.seed };
        let ch = config.channel_schedule();
        let k = config.kernel;
        let sep = config.use_depthwise;
        let mut params = ParamStore::new();

        let stem = Conv2d::same(&mut params, init, "stem", 1, ch[0], config.stem_kernel);
        let mut encoder = Vec::with_capacity(4);
        let mut prev = ch[0];
        for (i, (&c, &depth)) in ch.iter().zip(&config.stage_depths).enumerate() {
            let name = format!("enc{i}");
            let entry = SpatialConv::new(&mut params, init, &format!("{name}.entry"), prev, c, k, sep);
            let blocks = (0..depth)
                .map(|b| {
                    InvertedBottleneck::new(
                        &mut params,
                        init,
                        &format!("{name}.block{b}"),
                        c,
                        config.expansion_ratio,
                        k,
                    )
                })
                .collect();
            encoder.push(EncoderStage { entry, blocks });
            prev = c;
        }
        let mut decoder = Vec::with_capacity(4);
        for i in 0..4 {
            let name = format!("dec{i}");
            let high = if i == 3 { ch[3] } else { ch[i + 1] };
            let skip = if config.use_attention {
                Skip::Gate(AttentionGate::new(&mut params, init, &format!("{name}.gate"), high, ch[i]))
            } else {
                Skip::Plain
            };
            let fuse = SpatialConv::new(
                &mut params,
                init,
                &format!("{name}.fuse"),
                high + ch[i],
                ch[i],
                k,
                sep,
            );
            decoder.push(DecoderStage { skip, fuse });
        }
        let head = crate::layers::pointwise_head(&mut params, init, "head", ch[0]);
        Ok(Self {
            config: config.clone(),
            params,
            stem,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Weight count of the spatial/separable convolutions, gates, blocks,
    /// stem and head; equals the store's non-bias scalar count.
    pub fn weight_count(&self) -> usize {
        let enc: usize = self
            .encoder
            .iter()
            .map(|s| s.entry.weight_count() + s.blocks.iter().map(|b| b.weight_count()).sum::<usize>())
            .sum();
        let dec: usize = self
            .decoder
            .iter()
            .map(|s| {
                s.fuse.weight_count()
                    + match &s.skip {
                        Skip::Gate(g) => g.weight_count(),
                        Skip::Plain => 0,
                    }
            })
            .sum();
        self.stem.weight_count() + enc + dec + self.head.weight_count()
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_traced(g, p, x)?.logits)
    }

    pub fn forward_traced(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<ForwardTrace> {
        let (_, c, h, w) = g.value(x).dims4()?;
        let s = self.config.input_size;
        if c != 1 || h != s || w != s {
            return Err(Error::shape(format!(
                "network expects N×1×{s}×{s} input, got {:?}",
                g.shape(x)
            )));
        }
        let stem = self.stem.forward(g, p, x)?;
        let mut cur = g.relu(stem);
        let mut skips = Vec::with_capacity(4);
        for stage in &self.encoder {
            cur = stage.entry.forward(g, p, cur)?;
            for block in &stage.blocks {
                cur = block.forward(g, p, cur)?;
            }
            skips.push(cur);
            cur = g.maxpool2x2(cur)?;
        }
        let bottleneck = cur;
        let mut decoded = vec![bottleneck; 4];
        for i in (0..4).rev() {
            let stage = &self.decoder[i];
            let z = match &stage.skip {
                Skip::Gate(gate) => gate.forward(g, p, cur, skips[i])?,
                Skip::Plain => attention::plain_skip(g, cur, skips[i])?,
            };
            let fused = stage.fuse.forward(g, p, z)?;
            cur = g.relu(fused);
            decoded[i] = cur;
        }
        let logits = self.head.forward(g, p, cur)?;
        Ok(ForwardTrace {
            logits,
            encoder: skips,
            bottleneck,
            decoder: decoded,
        })
    }

    /// Inference without gradient tracking. `x` is `N×1×S×S`.
    pub fn predict_logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &p, xv)?;
        Ok(g.value(y).clone())
    }

    /// SHA-256 over parameter names and their serialized tensors.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.iter() {
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update(t.to_bytes());
        }
        hex(&h.finalize())
    }

    /// Writes one tensor file per parameter plus `manifest.toml`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut files = BTreeMap::new();
        for (name, t) in self.params.iter() {
            let file = format!("{name}.tensor");
            fs::write(dir.join(&file), t.to_bytes())?;
            files.insert(name.to_string(), file);
        }
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            checksum: self.content_hash(),
            config: self.config.clone(),
            tensors: self
                .params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.into(),
                    file: files[name].clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::format(e.to_string()))?;
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: CheckpointManifest =
            toml::from_str(&text).map_err(|e| Error::format(format!("checkpoint manifest: {e}")))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::format(format!(
                "unsupported checkpoint format {:?}",
                manifest.format
            )));
        }
        let mut net = Self::build(&manifest.config)?;
        if manifest.tensors.len() != net.params.len() {
            return Err(Error::format(format!(
                "checkpoint lists {} tensors, config builds {}",
                manifest.tensors.len(),
                net.params.len()
            )));
        }
        for entry in &manifest.tensors {
            let id = net
                .params
                .find(&entry.name)
                .ok_or_else(|| Error::format(format!("unknown parameter {}", entry.name)))?;
            let file = fs::File::open(dir.join(&entry.file))?;
            let t = Tensor::read_from(BufReader::new(file))?;
            if t.shape() != net.params.get(id).shape() {
                return Err(Error::format(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    entry.name,
                    t.shape(),
                    net.params.get(id).shape()
                )));
            }
            *net.params.get_mut(id) = t;
        }
        if net.content_hash() != manifest.checksum {
            return Err(Error::format("checkpoint checksum mismatch"));
        }
        Ok(net)
    }
}

const CHECKPOINT_FORMAT: &str = "casunext-checkpoint-v1";
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    checksum: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
