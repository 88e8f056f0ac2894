//! Run configuration read from a single TOML document.
//!
//! Precedence for every key: command-line flag, then config file, then the
//! built-in default. The global seed additionally falls back to the
//! `NODULECLIP_SEED` environment variable before its default of 0.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use noduleclip_core::evaluate::EvaluationConfig;
use noduleclip_core::model::{BaseSource, Preset, TokenizerSpec};
use noduleclip_core::preprocess::ChannelStats;
use noduleclip_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "NODULECLIP_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed shared by every subcommand.
    pub seed: Option<u64>,
    pub synth: SynthSection,
    pub preprocess: PreprocessSection,
    pub train: TrainSection,
    pub infer: InferSection,
    pub zeroshot: ZeroShotSection,
    pub evaluate: EvaluateSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub output: Option<PathBuf>,
    /// Default 64.
    pub n_patients: usize,
    /// Fraction of label-1 patients. Default 0.4.
    pub prevalence: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = noduleclip_core::synth::SynthConfig::default();
        Self {
            output: None,
            n_patients: d.n_patients,
            prevalence: d.prevalence,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessSection {
    pub manifest: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Side of each model-ready view. Default 224.
    pub image_size: usize,
    /// Default: the pretrained image encoder's statistics.
    pub channel_stats: ChannelStats,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        Self {
            manifest: None,
            output: None,
            image_size: 224,
            channel_stats: ChannelStats::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub manifest: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    /// Default `toy`.
    pub preset: Preset,
    /// Default: random initialization seeded with the global seed.
    pub base: Option<BaseSource>,
    /// Default `toy`.
    pub tokenizer: TokenizerSpec,
    /// Optimizer, loss, sampling and augmentation settings. `seed` comes
    /// from the global seed.
    pub params: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            manifest: None,
            run_dir: None,
            preset: Preset::Toy,
            base: None,
            tokenizer: TokenizerSpec::Toy,
            params: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferSection {
    /// A completed `train` run directory.
    pub train_run: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    /// Optional `preprocess` output. Missing or stale entries are
    /// recomputed from the volumes.
    pub stacks: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZeroShotSection {
    pub train_run: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub stacks: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    /// Which fold's checkpoint to query. Default 0.
    pub fold: usize,
    /// Score with temperature 1 instead of the learned one. Default false.
    pub unit_temperature: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    /// Patient-level prediction CSV from `infer`.
    pub predictions: Option<PathBuf>,
    /// Manifest supplying the labels.
    pub manifest: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    /// Bootstrap draws, confidence level and recall targets. `seed` comes
    /// from the global seed.
    pub params: EvaluationConfig,
}

/// Keys that must not be set inside a section because the global seed owns them.
const SHADOWED_SEEDS: [(&str, &str); 2] = [("train", "params"), ("evaluate", "params")];

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let table: toml::Table = toml::from_str(text)?;
        for (section, sub) in SHADOWED_SEEDS {
            let set = table
                .get(section)
                .and_then(|s| s.get(sub))
                .and_then(|s| s.get("seed"))
                .is_some();
            if set {
                bail!("`{section}.{sub}.seed` is not allowed; set the top-level `seed` instead");
            }
        }
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// Flag, then config, then `NODULECLIP_SEED`, then 0.
    pub fn resolve_seed(&self, flag: Option<u64>) -> anyhow::Result<u64> {
        resolve_seed(flag, self.seed, std::env::var(SEED_ENV).ok().as_deref())
    }

    /// The effective configuration as a loadable document. Section seeds
    /// are dropped since the global seed owns them.
    pub fn to_toml(&self) -> anyhow::Result<String> {
        let mut table = toml::Table::try_from(self)?;
        for (section, sub) in SHADOWED_SEEDS {
            if let Some(t) = table
                .get_mut(section)
                .and_then(|s| s.get_mut(sub))
                .and_then(|s| s.as_table_mut())
            {
                t.remove("seed");
            }
        }
        Ok(toml::to_string(&table)?)
    }
}

pub fn resolve_seed(flag: Option<u64>, config: Option<u64>, env: Option<&str>) -> anyhow::Result<u64> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| anyhow!("{SEED_ENV}=`{v}` is not an unsigned integer")),
        None => Ok(0),
    }
}

/// A required path, from the flag or the config.
pub fn require(value: &Option<PathBuf>, key: &str, flag: &str) -> anyhow::Result<PathBuf> {
    value
        .clone()
        .ok_or_else(|| anyhow!("missing `{key}`; set it in the config or pass {flag}"))
}
