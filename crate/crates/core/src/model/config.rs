use serde::{Deserialize, Serialize};

use crate::preprocess::ChannelStats;
use crate::{Error, Result};

/// Dimension of the shared image/text embedding space.
pub const EMBED_DIM: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    PretrainedCompatible,
    Toy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
}

impl VisionConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patches plus the class token.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextConfig {
    pub context_length: usize,
    pub vocab_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub preset: Preset,
    pub vision: VisionConfig,
    pub text: TextConfig,
    pub embed_dim: usize,
}

impl EncoderConfig {
    /// ViT-B/32 image tower and 12-layer text tower.
    pub fn pretrained_compatible() -> Self {
        Self {
            preset: Preset::PretrainedCompatible,
            vision: VisionConfig {
                image_size: 224,
                patch_size: 32,
                width: 768,
                depth: 12,
                heads: 12,
            },
            text: TextConfig {
                context_length: 77,
                vocab_size: 49408,
                width: 512,
                depth: 12,
                heads: 8,
            },
            embed_dim: EMBED_DIM,
        }
    }

    /// Small randomly initialized towers for tests and desk-scale runs.
    pub fn toy() -> Self {
        Self {
            preset: Preset::Toy,
            vision: VisionConfig {
                image_size: 224,
                patch_size: 32,
                width: 32,
                depth: 2,
                heads: 2,
            },
            text: TextConfig {
                context_length: 77,
                vocab_size: 4096,
                width: 32,
                depth: 2,
                heads: 2,
            },
            embed_dim: EMBED_DIM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = &self.vision;
        let t = &self.text;
        if v.patch_size == 0 || !v.image_size.is_multiple_of(v.patch_size) {
            return Err(Error::invalid(format!(
                "image size {} is not divisible by patch size {}",
                v.image_size, v.patch_size
            )));
        }
        if self.embed_dim != EMBED_DIM {
            return Err(Error::invalid(format!("embed_dim must be {EMBED_DIM}, got {}", self.embed_dim)));
        }
        for (name, w, h, d) in [("vision", v.width, v.heads, v.depth), ("text", t.width, t.heads, t.depth)] {
            if w == 0 || h == 0 || w % h != 0 || d == 0 {
                return Err(Error::invalid(format!("{name} width {w} must be a positive multiple of heads {h}")));
            }
        }
        if t.context_length < 2 || t.vocab_size < 3 {
            return Err(Error::invalid("text context must hold at least 2 tokens and vocab at least 3"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub scale: f64,
    pub dropout: f64,
    /// Standard deviation of the Gaussian `A` init; `1/√d_in` when absent.
    pub init_std: Option<f64>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 2,
            scale: 1.0,
            dropout: 0.25,
            init_std: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MilKind {
    /// `wᵀ tanh(V h)`.
    Plain,
    /// `wᵀ (tanh(V h) ⊙ σ(U h))`.
    Gated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MilConfig {
    pub hidden: usize,
    pub kind: MilKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RiskInput {
    /// Post-projection embeddings.
    Projected,
    /// Encoder features before projection.
    Encoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// Optional hidden layer inside each projection head.
    pub projection_hidden: Option<usize>,
    pub risk_input: RiskInput,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            projection_hidden: None,
            risk_input: RiskInput::Projected,
        }
    }
}

/// Which parameters are optimized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TuningMode {
    /// Every parameter, no adapters.
    Full,
    /// Frozen encoders; pooling, projections, heads and temperature only.
    Probe,
    /// Frozen encoders with trainable low-rank adapters on q/k/v.
    Lora,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub lora: LoraConfig,
    pub mil: MilConfig,
    pub heads: HeadConfig,
    pub tuning: TuningMode,
    pub initial_temperature: f64,
    pub channel_stats: ChannelStats,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig) -> Self {
        let hidden = match encoder.preset {
            Preset::PretrainedCompatible => 128,
            Preset::Toy => 16,
        };
        Self {
            encoder,
            lora: LoraConfig::default(),
            mil: MilConfig {
                hidden,
                kind: MilKind::Plain,
            },
            heads: HeadConfig::default(),
            tuning: TuningMode::Lora,
            initial_temperature: 0.03,
            channel_stats: ChannelStats::default(),
        }
    }

    pub fn toy() -> Self {
        Self::new(EncoderConfig::toy())
    }

    pub fn pretrained_compatible() -> Self {
        Self::new(EncoderConfig::pretrained_compatible())
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.tuning == TuningMode::Lora {
            if self.lora.rank == 0 {
                return Err(Error::invalid("adapter rank must be at least 1"));
            }
            if !(0.0..1.0).contains(&self.lora.dropout) || !self.lora.scale.is_finite() {
                return Err(Error::invalid("adapter dropout must lie in [0, 1) and scale be finite"));
            }
        }
        if self.mil.hidden == 0 {
            return Err(Error::invalid("attention pooling hidden size must be positive"));
        }
        if !(self.initial_temperature.is_finite() && self.initial_temperature > 0.0) {
            return Err(Error::invalid("initial temperature must be positive"));
        }
        if self.channel_stats.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("channel std must be positive"));
        }
        Ok(())
    }
}
