use std::collections::HashMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::{MilKind, ModelConfig, RiskInput, TuningMode};
use crate::autodiff::Matrix;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Encoder weights of the (pre)trained towers.
    Base,
    Adapter,
    Mil,
    Projection,
    RiskHead,
    Temperature,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Gaussian with the given standard deviation.
    Normal(f64),
    /// The configured initial temperature, stored as its logarithm.
    LogTemperature,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: (usize, usize),
    pub kind: ParamKind,
    pub trainable: bool,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.0 * self.shape.1
    }
}

pub const ADAPTER_TARGETS: [&str; 3] = ["q", "k", "v"];

struct LayoutBuilder<'a> {
    cfg: &'a ModelConfig,
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder<'_> {
    fn push(&mut self, name: String, shape: (usize, usize), kind: ParamKind, init: Init) {
        let trainable = match (kind, self.cfg.tuning) {
            (ParamKind::Base, TuningMode::Full) => true,
            (ParamKind::Base, _) => false,
            _ => true,
        };
        self.specs.push(ParamSpec {
            name,
            shape,
            kind,
            trainable,
            init,
        });
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize, kind: ParamKind, bias: bool) {
        self.push(
            format!("{prefix}.weight"),
            (d_out, d_in),
            kind,
            Init::Normal(1.0 / (d_in as f64).sqrt()),
        );
        if bias {
            self.push(format!("{prefix}.bias"), (1, d_out), kind, Init::Zeros);
        }
    }

    fn layer_norm(&mut self, prefix: &str, width: usize) {
        self.push(format!("{prefix}.weight"), (1, width), ParamKind::Base, Init::Ones);
        self.push(format!("{prefix}.bias"), (1, width), ParamKind::Base, Init::Zeros);
    }

    fn tower(&mut self, tower: &str, prefix: &str, width: usize, depth: usize) {
        let lora = self.cfg.tuning == TuningMode::Lora;
        let r = self.cfg.lora.rank;
        for l in 0..depth {
            let p = format!("{prefix}transformer.resblocks.{l}");
            self.layer_norm(&format!("{p}.ln_1"), width);
            for t in ADAPTER_TARGETS {
                self.linear(&format!("{p}.attn.{t}_proj"), width, width, ParamKind::Base, true);
                if lora {
                    let std = self.cfg.lora.init_std.unwrap_or(1.0 / (width as f64).sqrt());
                    let a = format!("lora.{tower}.{l}.{t}");
                    self.push(format!("{a}.A"), (r, width), ParamKind::Adapter, Init::Normal(std));
                    self.push(format!("{a}.B"), (width, r), ParamKind::Adapter, Init::Zeros);
                }
            }
            self.linear(&format!("{p}.attn.out_proj"), width, width, ParamKind::Base, true);
            self.layer_norm(&format!("{p}.ln_2"), width);
            self.linear(&format!("{p}.mlp.c_fc"), width, 4 * width, ParamKind::Base, true);
            self.linear(&format!("{p}.mlp.c_proj"), 4 * width, width, ParamKind::Base, true);
        }
    }
}

/// Full parameter layout implied by a config, computed without allocating
/// any tensor.
pub fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut b = LayoutBuilder { cfg, specs: Vec::new() };
    let v = cfg.encoder.vision;
    let t = cfg.encoder.text;
    let embed = cfg.encoder.embed_dim;

    b.push(
        "visual.conv1.weight".into(),
        (v.width, v.patch_dim()),
        ParamKind::Base,
        Init::Normal(1.0 / (v.patch_dim() as f64).sqrt()),
    );
    let emb_std = 1.0 / (v.width as f64).sqrt();
    b.push("visual.class_embedding".into(), (1, v.width), ParamKind::Base, Init::Normal(emb_std));
    b.push(
        "visual.positional_embedding".into(),
        (v.tokens(), v.width),
        ParamKind::Base,
        Init::Normal(emb_std),
    );
    b.layer_norm("visual.ln_pre", v.width);
    b.tower("visual", "visual.", v.width, v.depth);
    b.layer_norm("visual.ln_post", v.width);

    b.push("token_embedding.weight".into(), (t.vocab_size, t.width), ParamKind::Base, Init::Normal(0.02));
    b.push(
        "positional_embedding".into(),
        (t.context_length, t.width),
        ParamKind::Base,
        Init::Normal(0.01),
    );
    b.tower("text", "", t.width, t.depth);
    b.layer_norm("ln_final", t.width);

    let h = cfg.mil.hidden;
    b.linear("mil.attention_v", v.width, h, ParamKind::Mil, true);
    if cfg.mil.kind == MilKind::Gated {
        b.linear("mil.attention_u", v.width, h, ParamKind::Mil, true);
    }
    b.linear("mil.attention_w", h, 1, ParamKind::Mil, true);

    for (branch, d_in) in [("image", v.width), ("text", t.width)] {
        match cfg.heads.projection_hidden {
            Some(hidden) => {
                b.linear(&format!("proj.{branch}.hidden"), d_in, hidden, ParamKind::Projection, true);
                b.linear(&format!("proj.{branch}.out"), hidden, embed, ParamKind::Projection, true);
            }
            None => b.linear(&format!("proj.{branch}.out"), d_in, embed, ParamKind::Projection, true),
        }
    }
    for (branch, d_in) in [("image", v.width), ("text", t.width)] {
        let d = match cfg.heads.risk_input {
            RiskInput::Projected => embed,
            RiskInput::Encoder => d_in,
        };
        b.linear(&format!("head.{branch}"), d, 2, ParamKind::RiskHead, true);
    }
    b.push("logit.log_tau".into(), (1, 1), ParamKind::Temperature, Init::LogTemperature);
    b.specs
}

/// `(trainable, total)` scalar counts.
pub fn count_params(specs: &[ParamSpec]) -> (usize, usize) {
    specs.iter().fold((0, 0), |(tr, tot), s| {
        (tr + if s.trainable { s.numel() } else { 0 }, tot + s.numel())
    })
}

pub fn trainable_fraction(specs: &[ParamSpec]) -> f64 {
    let (tr, tot) = count_params(specs);
    if tot == 0 {
        0.0
    } else {
        tr as f64 / tot as f64
    }
}

/// Every parameter of a model, keyed by name, with storage shared with any
/// autodiff graph it is bound into.
#[derive(Clone, Debug)]
pub struct ParamStore {
    specs: Vec<ParamSpec>,
    values: Vec<Arc<Matrix>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    /// Random initialization. Base tensors draw from one ChaCha stream and
    /// everything else from another, so the base is identical across tuning
    /// modes for a given seed.
    pub fn initialize(specs: Vec<ParamSpec>, initial_temperature: f64, seed: u64) -> Self {
        Self::init_inner(specs, initial_temperature, seed, true)
    }

    /// Like [`ParamStore::initialize`] but leaves base tensors zeroed, for
    /// bases loaded from an archive afterwards.
    pub fn initialize_non_base(specs: Vec<ParamSpec>, initial_temperature: f64, seed: u64) -> Self {
        Self::init_inner(specs, initial_temperature, seed, false)
    }

    fn init_inner(specs: Vec<ParamSpec>, initial_temperature: f64, seed: u64, random_base: bool) -> Self {
        let mut base_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut other_rng = ChaCha8Rng::seed_from_u64(seed);
        other_rng.set_stream(1);
        let values = specs
            .iter()
            .map(|s| {
                let rng = if s.kind == ParamKind::Base { &mut base_rng } else { &mut other_rng };
                if s.kind == ParamKind::Base && !random_base {
                    return Arc::new(Array2::zeros(s.shape));
                }
                let m = match s.init {
                    Init::Zeros => Array2::zeros(s.shape),
                    Init::Ones => Array2::ones(s.shape),
                    Init::Normal(std) => {
                        let n = Normal::new(0.0, std).expect("finite std");
                        Array2::from_shape_simple_fn(s.shape, || n.sample(rng))
                    }
                    Init::LogTemperature => Array2::from_elem(s.shape, initial_temperature.ln()),
                };
                Arc::new(m)
            })
            .collect();
        Self::from_parts(specs, values)
    }

    pub(crate) fn from_parts(specs: Vec<ParamSpec>, values: Vec<Arc<Matrix>>) -> Self {
        let index = specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        Self { specs, values, index }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Matrix>> {
        self.position(name)
            .map(|i| &self.values[i])
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, i: usize) -> &Arc<Matrix> {
        &self.values[i]
    }

    /// Replaces a value, checking its shape.
    pub fn set(&mut self, name: &str, value: Matrix) -> Result<()> {
        let i = self
            .position(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        if value.dim() != self.specs[i].shape {
            return Err(Error::shape(format!(
                "{name}: expected {:?}, got {:?}",
                self.specs[i].shape,
                value.dim()
            )));
        }
        self.values[i] = Arc::new(value);
        Ok(())
    }

    /// Mutable access for optimizer updates; clones if a graph still shares
    /// the tensor.
    pub fn value_mut(&mut self, i: usize) -> &mut Matrix {
        Arc::make_mut(&mut self.values[i])
    }

    pub fn trainable_fraction(&self) -> f64 {
        trainable_fraction(&self.specs)
    }

    /// SHA-256 over names, shapes and bit patterns of the selected tensors.
    pub fn fingerprint(&self, select: impl Fn(&ParamSpec) -> bool) -> String {
        let mut h = Sha256::new();
        for (s, v) in self.specs.iter().zip(&self.values) {
            if !select(s) {
                continue;
            }
            h.update(s.name.as_bytes());
            h.update((s.shape.0 as u64).to_le_bytes());
            h.update((s.shape.1 as u64).to_le_bytes());
            for x in v.iter() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn base_fingerprint(&self) -> String {
        self.fingerprint(|s| s.kind == ParamKind::Base)
    }
}
