//! Dual-encoder network with low-rank adapters, attention pooling over nine
//! views, projection heads into a shared 256-d space and two risk heads.
//!
//! Parameters live in a [`ParamStore`] keyed by upstream-style names so that
//! converted pretrained weights load by name. Forward passes are built on the
//! autodiff graph; the value-level methods on [`ModelBundle`] wrap them in
//! evaluation mode.

pub mod archive;
mod config;
pub mod network;
pub mod params;
pub mod tokenizer;

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::RngCore;
use serde::{Deserialize, Serialize};

pub use config::*;
pub use network::{Branch, Dropout, VIEWS_PER_NODULE};
pub use params::{layout, trainable_fraction, ParamKind, ParamSpec, ParamStore};
pub use tokenizer::{truncate_tokens, Tokenizer, TokenizerSpec};

use crate::autodiff::{Graph, Matrix};
use crate::objective::Temperature;
use crate::preprocess::ViewStack;
use crate::{Error, Result};
use archive::{DType, Tensor};
use network::Binder;

/// Where the frozen encoder weights come from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BaseSource {
    /// Seeded random initialization.
    Random { seed: u64 },
    /// Tensor archive converted from an upstream checkpoint.
    Archive { path: PathBuf, seed: u64 },
}

/// A single low-rank adapter detached from the store.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    /// `r × d_in`.
    pub a: Matrix,
    /// `d_out × r`.
    pub b: Matrix,
    pub scale: f64,
    pub dropout: f64,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.nrows()
    }
}

/// `x Wᵀ + bias + scale · (drop(x) Aᵀ) Bᵀ` for a batch of row vectors.
/// Dropout touches only the adapter path and only when `rng` is given.
pub fn lora_forward(
    x: &Matrix,
    weight: &Matrix,
    bias: Option<&Array1<f64>>,
    adapter: &LoraAdapter,
    rng: Dropout,
) -> Result<Matrix> {
    let (d_out, d_in) = weight.dim();
    if x.ncols() != d_in
        || adapter.a.ncols() != d_in
        || adapter.b.nrows() != d_out
        || adapter.b.ncols() != adapter.a.nrows()
        || bias.is_some_and(|b| b.len() != d_out)
    {
        return Err(Error::shape(format!(
            "lora_forward: x {:?}, W {:?}, A {:?}, B {:?}",
            x.dim(),
            weight.dim(),
            adapter.a.dim(),
            adapter.b.dim()
        )));
    }
    let mut y = x.dot(&weight.t());
    if let Some(b) = bias {
        y += b;
    }
    let input = match rng {
        Some(rng) if adapter.dropout > 0.0 => x * &network::dropout_mask(x.dim(), adapter.dropout, rng),
        _ => x.clone(),
    };
    let delta = input.dot(&adapter.a.t()).dot(&adapter.b.t()) * adapter.scale;
    Ok(y + delta)
}

/// Eval-mode outputs of the image branch for one nodule.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageOutput {
    /// Projected (unnormalized) 256-d embedding.
    pub embedding: Array1<f64>,
    pub logits: [f64; 2],
    /// Softmax probability of the malignant class.
    pub probability: f64,
    pub mil_weights: Vec<f64>,
}

/// Bookkeeping stored next to a checkpoint's tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointInfo {
    pub fold_index: Option<usize>,
    pub epoch: usize,
    pub val_auroc: Option<f64>,
    /// Serialized trainer RNG, when saved mid-run.
    pub rng_state: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    model: ModelConfig,
    tokenizer: TokenizerSpec,
    base: BaseSource,
    base_fingerprint: String,
    info: CheckpointInfo,
}

pub const CHECKPOINT_META: &str = "checkpoint.toml";
pub const CHECKPOINT_TENSORS: &str = "trainable.ncta";

/// Rows evaluated per graph in the batched eval helpers.
const EVAL_CHUNK: usize = 16;

#[derive(Clone, Debug)]
pub struct ModelBundle {
    config: ModelConfig,
    params: ParamStore,
    tokenizer: Tokenizer,
    tokenizer_spec: TokenizerSpec,
    base: BaseSource,
}

fn softmax2(l: [f64; 2]) -> f64 {
    1.0 / (1.0 + (l[0] - l[1]).exp())
}

impl ModelBundle {
    pub fn new(config: ModelConfig, base: BaseSource, tokenizer_spec: TokenizerSpec) -> Result<Self> {
        config.validate()?;
        let tokenizer = Tokenizer::from_spec(&tokenizer_spec, config.encoder.text.vocab_size)?;
        let specs = layout(&config);
        let params = match &base {
            BaseSource::Random { seed } => ParamStore::initialize(specs, config.initial_temperature, *seed),
            BaseSource::Archive { path, seed } => {
                let mut store = ParamStore::initialize_non_base(specs, config.initial_temperature, *seed);
                load_pretrained(&mut store, &archive::load_archive(path)?)?;
                store
            }
        };
        Ok(Self {
            config,
            params,
            tokenizer,
            tokenizer_spec,
            base,
        })
    }

    /// Toy towers with a seeded random base.
    pub fn toy(seed: u64) -> Result<Self> {
        Self::new(ModelConfig::toy(), BaseSource::Random { seed }, TokenizerSpec::Toy)
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

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn base_source(&self) -> &BaseSource {
        &self.base
    }

    pub fn temperature(&self) -> Temperature {
        let lt = self.params.get("logit.log_tau").expect("temperature parameter")[[0, 0]];
        Temperature::from_log(lt)
    }

    pub fn trainable_parameter_fraction(&self) -> f64 {
        self.params.trainable_fraction()
    }

    pub fn base_fingerprint(&self) -> String {
        self.params.base_fingerprint()
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        self.tokenizer.encode(text, self.config.encoder.text.context_length)
    }

    /// Extracts one adapter, or `None` when adapters are not configured.
    pub fn adapter(&self, tower: &str, layer: usize, target: &str) -> Option<LoraAdapter> {
        let a = self.params.get(&format!("lora.{tower}.{layer}.{target}.A")).ok()?;
        let b = self.params.get(&format!("lora.{tower}.{layer}.{target}.B")).ok()?;
        Some(LoraAdapter {
            a: (**a).clone(),
            b: (**b).clone(),
            scale: self.config.lora.scale,
            dropout: self.config.lora.dropout,
        })
    }

    /// Per-view encoder features (`9·n × width`) for a batch of stacks.
    pub fn encode_views_batch(&self, stacks: &[&ViewStack]) -> Result<Matrix> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params);
        let v = network::vision_tower(&mut g, &mut b, &self.config, stacks, None)?;
        Ok(g.value(v).clone())
    }

    /// Nine feature rows, in view order.
    pub fn encode_views(&self, stack: &ViewStack) -> Result<Matrix> {
        self.encode_views_batch(&[stack])
    }

    /// Attention pooling of nine view features into one vector plus weights.
    pub fn mil_aggregate(&self, view_features: &Matrix) -> Result<(Array1<f64>, Array1<f64>)> {
        if view_features.nrows() != VIEWS_PER_NODULE {
            return Err(Error::shape(format!(
                "expected {VIEWS_PER_NODULE} view features, got {}",
                view_features.nrows()
            )));
        }
        if view_features.ncols() != self.config.encoder.vision.width {
            return Err(Error::shape("view feature width does not match the vision encoder"));
        }
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params);
        let f = g.constant(view_features.clone());
        let (pooled, weights) = network::mil_pool(&mut g, &mut b, &self.config, f)?;
        Ok((g.value(pooled).row(0).to_owned(), g.value(weights).row(0).to_owned()))
    }

    /// Final text features for many token sequences; long sequences are
    /// truncated keeping the end token.
    pub fn encode_texts(&self, sequences: &[Vec<u32>]) -> Result<Matrix> {
        let ctx = self.config.encoder.text.context_length;
        let eot = self.tokenizer.eot();
        let seqs: Vec<Vec<u32>> = sequences.iter().map(|s| truncate_tokens(s, ctx, eot)).collect();
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params);
        let t = network::text_tower(&mut g, &mut b, &self.config, &seqs, None)?;
        Ok(g.value(t).clone())
    }

    pub fn encode_text(&self, ids: &[u32]) -> Result<Array1<f64>> {
        Ok(self.encode_texts(&[ids.to_vec()])?.row(0).to_owned())
    }

    fn feature_var(&self, feature: &Array1<f64>) -> Matrix {
        feature.view().insert_axis(Axis(0)).to_owned()
    }

    pub fn project(&self, branch: Branch, feature: &Array1<f64>) -> Result<Array1<f64>> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params);
        let x = g.constant(self.feature_var(feature));
        let y = network::project(&mut g, &mut b, &self.config, branch, x)?;
        Ok(g.value(y).row(0).to_owned())
    }

    /// Two logits from the branch's risk head; feed it whatever the
    /// configured `risk_input` names.
    pub fn predict_risk(&self, branch: Branch, feature: &Array1<f64>) -> Result<[f64; 2]> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params);
        let x = g.constant(self.feature_var(feature));
        let y = network::risk_logits(&mut g, &mut b, branch, x)?;
        let v = g.value(y);
        Ok([v[[0, 0]], v[[0, 1]]])
    }

    pub fn malignancy_probability(logits: [f64; 2]) -> f64 {
        softmax2(logits)
    }

    /// Eval-mode image branch for many nodules.
    pub fn image_outputs(&self, stacks: &[&ViewStack]) -> Result<Vec<ImageOutput>> {
        let mut out = Vec::with_capacity(stacks.len());
        for chunk in stacks.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let mut b = Binder::new(&self.params);
            let h = network::image_branch(&mut g, &mut b, &self.config, chunk, None)?;
            let (emb, logits, w) = (g.value(h.embedding), g.value(h.logits), g.value(h.mil_weights));
            for i in 0..chunk.len() {
                let l = [logits[[i, 0]], logits[[i, 1]]];
                out.push(ImageOutput {
                    embedding: emb.row(i).to_owned(),
                    logits: l,
                    probability: softmax2(l),
                    mil_weights: w.row(i).to_vec(),
                });
            }
        }
        Ok(out)
    }

    /// Projected text embeddings (`n × 256`) for raw strings.
    pub fn text_embeddings(&self, texts: &[String]) -> Result<Matrix> {
        let d = self.config.encoder.embed_dim;
        let mut out = Array2::zeros((texts.len(), d));
        let mut row = 0;
        for chunk in texts.chunks(EVAL_CHUNK) {
            let seqs: Vec<Vec<u32>> = chunk.iter().map(|t| self.tokenize(t)).collect();
            let mut g = Graph::new();
            let mut b = Binder::new(&self.params);
            let h = network::text_branch(&mut g, &mut b, &self.config, &seqs, None)?;
            let e = g.value(h.embedding);
            out.slice_mut(ndarray::s![row..row + chunk.len(), ..]).assign(e);
            row += chunk.len();
        }
        Ok(out)
    }

    pub fn save_checkpoint(&self, dir: &Path, info: &CheckpointInfo) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = CheckpointMeta {
            model: self.config,
            tokenizer: self.tokenizer_spec.clone(),
            base: self.base.clone(),
            base_fingerprint: self.base_fingerprint(),
            info: info.clone(),
        };
        let text = toml::to_string(&meta).map_err(|e| Error::format(e.to_string()))?;
        let meta_path = dir.join(CHECKPOINT_META);
        fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
        let tensors: Vec<Tensor> = self
            .params
            .specs()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.trainable)
            .map(|(i, s)| Tensor {
                name: s.name.clone(),
                shape: vec![s.shape.0, s.shape.1],
                data: self.params.value(i).iter().copied().collect(),
            })
            .collect();
        archive::save_archive(&dir.join(CHECKPOINT_TENSORS), &tensors, DType::F64)
    }

    /// Rebuilds the base from its recorded source, verifies its fingerprint
    /// and restores every trainable tensor.
    pub fn load_checkpoint(dir: &Path) -> Result<(Self, CheckpointInfo)> {
        let meta_path = dir.join(CHECKPOINT_META);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta = toml::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", meta_path.display())))?;
        let mut bundle = Self::new(meta.model, meta.base, meta.tokenizer)?;
        let tensors = archive::load_archive(&dir.join(CHECKPOINT_TENSORS))?;
        let expected = bundle.params.specs().iter().filter(|s| s.trainable).count();
        if tensors.len() != expected {
            return Err(Error::format(format!(
                "checkpoint holds {} tensors, config expects {expected}",
                tensors.len()
            )));
        }
        for t in tensors {
            let i = bundle
                .params
                .position(&t.name)
                .ok_or_else(|| Error::format(format!("checkpoint tensor `{}` not in model", t.name)))?;
            let spec = &bundle.params.specs()[i];
            if !spec.trainable || t.shape != [spec.shape.0, spec.shape.1] {
                return Err(Error::format(format!("checkpoint tensor `{}` does not match the config", t.name)));
            }
            let m = Array2::from_shape_vec(spec.shape, t.data).map_err(|e| Error::shape(e.to_string()))?;
            bundle.params.set(&t.name, m)?;
        }
        if bundle.config.tuning != TuningMode::Full && bundle.base_fingerprint() != meta.base_fingerprint {
            return Err(Error::invalid("base weights differ from the ones the checkpoint was trained on"));
        }
        Ok((bundle, meta.info))
    }

    /// Dropout source for training-mode forwards.
    pub fn dropout<'a>(rng: &'a mut dyn RngCore) -> Dropout<'a> {
        Some(rng)
    }
}

/// Copies base tensors from an upstream-style archive. Fused attention input
/// projections are split into q/k/v; tensors the model has no slot for are
/// ignored. Returns the ignored names.
pub fn load_pretrained(store: &mut ParamStore, tensors: &[Tensor]) -> Result<Vec<String>> {
    let mut ignored = Vec::new();
    let mut filled = vec![false; store.len()];
    let mut assign = |store: &mut ParamStore, name: &str, data: Vec<f64>| -> Result<()> {
        let i = store.position(name).expect("checked by caller");
        let shape = store.specs()[i].shape;
        if data.len() != shape.0 * shape.1 {
            return Err(Error::shape(format!(
                "pretrained `{name}` has {} values, model expects {shape:?}",
                data.len()
            )));
        }
        store.set(name, Array2::from_shape_vec(shape, data).expect("length checked"))?;
        filled[i] = true;
        Ok(())
    };
    for t in tensors {
        if let Some(prefix) = t.name.strip_suffix(".attn.in_proj_weight").or(t.name.strip_suffix(".attn.in_proj_bias")) {
            let suffix = if t.name.ends_with("weight") { "weight" } else { "bias" };
            let names: Vec<String> = ["q", "k", "v"]
                .iter()
                .map(|q| format!("{prefix}.attn.{q}_proj.{suffix}"))
                .collect();
            if !names.iter().all(|n| store.contains(n)) {
                ignored.push(t.name.clone());
                continue;
            }
            if t.data.len() % 3 != 0 {
                return Err(Error::shape(format!("`{}` does not split into three projections", t.name)));
            }
            let third = t.data.len() / 3;
            for (k, n) in names.iter().enumerate() {
                assign(store, n, t.data[k * third..(k + 1) * third].to_vec())?;
            }
            continue;
        }
        match store.position(&t.name) {
            Some(i) if store.specs()[i].kind == ParamKind::Base => assign(store, &t.name, t.data.clone())?,
            _ => ignored.push(t.name.clone()),
        }
    }
    let missing: Vec<&str> = store
        .specs()
        .iter()
        .zip(&filled)
        .filter(|(s, f)| s.kind == ParamKind::Base && !**f)
        .map(|(s, _)| s.name.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::format(format!(
            "pretrained archive lacks {} base tensors, e.g. `{}`",
            missing.len(),
            missing[0]
        )));
    }
    Ok(ignored)
}

#[cfg(test)]
mod tests;
