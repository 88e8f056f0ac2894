//! Graph construction for both towers, adapters, pooling and heads.

use ndarray::{s, Array2};
use rand::{Rng, RngCore};

use super::config::{LoraConfig, MilKind, ModelConfig, RiskInput};
use super::params::ParamStore;
use crate::autodiff::{Graph, Matrix, Var};
use crate::preprocess::ViewStack;
use crate::{Error, Result};

pub const VIEWS_PER_NODULE: usize = 9;

/// Source of dropout masks; `None` means evaluation mode.
pub type Dropout<'a> = Option<&'a mut dyn RngCore>;

/// Shortens the borrow so one dropout source can feed several layers.
pub fn reborrow<'b>(rng: &'b mut Dropout<'_>) -> Dropout<'b> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Image,
    Text,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Image => "image",
            Branch::Text => "text",
        }
    }
}

/// Lazily binds store tensors into one graph, at most once each.
pub struct Binder<'s> {
    store: &'s ParamStore,
    vars: Vec<Option<Var>>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    pub fn param(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        let i = self
            .store
            .position(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        if let Some(v) = self.vars[i] {
            return Ok(v);
        }
        let v = g.shared_leaf(self.store.value(i).clone(), self.store.specs()[i].trainable);
        self.vars[i] = Some(v);
        Ok(v)
    }

    /// `(store index, var)` for every bound trainable tensor.
    pub fn trainable(&self) -> Vec<(usize, Var)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.filter(|_| self.store.specs()[i].trainable).map(|v| (i, v)))
            .collect()
    }
}

pub fn dropout_mask<R: Rng + ?Sized>(shape: (usize, usize), rate: f64, rng: &mut R) -> Matrix {
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_simple_fn(shape, || if rng.random_bool(rate) { 0.0 } else { keep })
}

fn linear(g: &mut Graph, b: &mut Binder, x: Var, prefix: &str) -> Result<Var> {
    let w = b.param(g, &format!("{prefix}.weight"))?;
    let bias = if b.has(&format!("{prefix}.bias")) {
        Some(b.param(g, &format!("{prefix}.bias"))?)
    } else {
        None
    };
    if g.shape(x).1 != g.shape(w).1 {
        return Err(Error::shape(format!(
            "{prefix}: input width {} vs weight {:?}",
            g.shape(x).1,
            g.shape(w)
        )));
    }
    Ok(g.linear(x, w, bias))
}

fn layer_norm(g: &mut Graph, b: &mut Binder, x: Var, prefix: &str) -> Result<Var> {
    let gamma = b.param(g, &format!("{prefix}.weight"))?;
    let beta = b.param(g, &format!("{prefix}.bias"))?;
    Ok(g.layer_norm(x, gamma, beta))
}

/// Base projection plus the low-rank adapter path when `adapter` names one
/// present in the store: `x Wᵀ + b + scale · (drop(x) Aᵀ) Bᵀ`.
pub fn lora_linear(
    g: &mut Graph,
    b: &mut Binder,
    lora: &LoraConfig,
    x: Var,
    base: &str,
    adapter: &str,
    rng: Dropout,
) -> Result<Var> {
    let y = linear(g, b, x, base)?;
    if !b.has(&format!("{adapter}.A")) {
        return Ok(y);
    }
    let a = b.param(g, &format!("{adapter}.A"))?;
    let bm = b.param(g, &format!("{adapter}.B"))?;
    let input = match rng {
        Some(rng) if lora.dropout > 0.0 => {
            let mask = g.constant(dropout_mask(g.shape(x), lora.dropout, rng));
            g.mul(x, mask)
        }
        _ => x,
    };
    let h = g.matmul_bt(input, a);
    let delta = g.matmul_bt(h, bm);
    let delta = g.scale(delta, lora.scale);
    Ok(g.add(y, delta))
}

#[allow(clippy::too_many_arguments)]
fn residual_block(
    g: &mut Graph,
    b: &mut Binder,
    cfg: &ModelConfig,
    mut x: Var,
    tower: &str,
    prefix: &str,
    layer: usize,
    heads: usize,
    segments: &[usize],
    causal: bool,
    mut rng: Dropout,
) -> Result<Var> {
    let p = format!("{prefix}transformer.resblocks.{layer}");
    let h = layer_norm(g, b, x, &format!("{p}.ln_1"))?;
    let mut qkv = [h; 3];
    for (slot, t) in qkv.iter_mut().zip(super::params::ADAPTER_TARGETS) {
        *slot = lora_linear(
            g,
            b,
            &cfg.lora,
            h,
            &format!("{p}.attn.{t}_proj"),
            &format!("lora.{tower}.{layer}.{t}"),
            reborrow(&mut rng),
        )?;
    }
    let att = g.attention(qkv[0], qkv[1], qkv[2], segments, heads, causal);
    let att = linear(g, b, att, &format!("{p}.attn.out_proj"))?;
    x = g.add(x, att);
    let h = layer_norm(g, b, x, &format!("{p}.ln_2"))?;
    let h = linear(g, b, h, &format!("{p}.mlp.c_fc"))?;
    let h = g.quick_gelu(h);
    let h = linear(g, b, h, &format!("{p}.mlp.c_proj"))?;
    Ok(g.add(x, h))
}

/// Flattens every view into non-overlapping patches, one row per patch in
/// raster order, columns ordered `(channel, row, col)` to match the patch
/// embedding weight.
pub fn patchify(stacks: &[&ViewStack], image_size: usize, patch: usize) -> Result<Matrix> {
    let grid = image_size / patch;
    let n_views: usize = stacks.len() * VIEWS_PER_NODULE;
    let mut out = Array2::zeros((n_views * grid * grid, 3 * patch * patch));
    let mut row = 0;
    for stack in stacks {
        let (v, c, h, w) = stack.views.dim();
        if v != VIEWS_PER_NODULE {
            return Err(Error::shape(format!("expected {VIEWS_PER_NODULE} views, got {v}")));
        }
        if c != 3 || h != image_size || w != image_size {
            return Err(Error::shape(format!(
                "views are {c}×{h}×{w}, expected 3×{image_size}×{image_size}"
            )));
        }
        for view in 0..v {
            for gy in 0..grid {
                for gx in 0..grid {
                    let mut dst = out.row_mut(row);
                    let mut k = 0;
                    for ch in 0..3 {
                        let block = stack
                            .views
                            .slice(s![view, ch, gy * patch..(gy + 1) * patch, gx * patch..(gx + 1) * patch]);
                        for &val in block.iter() {
                            dst[k] = val as f64;
                            k += 1;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Class-token features after the final norm, one row per view
/// (`9·stacks` rows, view order preserved).
pub fn vision_tower(g: &mut Graph, b: &mut Binder, cfg: &ModelConfig, stacks: &[&ViewStack], mut rng: Dropout) -> Result<Var> {
    if stacks.is_empty() {
        return Err(Error::invalid("no view stacks"));
    }
    let v = cfg.encoder.vision;
    let patches = patchify(stacks, v.image_size, v.patch_size)?;
    let n_images = stacks.len() * VIEWS_PER_NODULE;
    let grid2 = v.grid() * v.grid();

    let conv = b.param(g, "visual.conv1.weight")?;
    let embedded = if g.requires_grad(conv) {
        let p = g.constant(patches);
        g.matmul_bt(p, conv)
    } else {
        let e = patches.dot(&g.value(conv).t());
        g.constant(e)
    };
    let cls = b.param(g, "visual.class_embedding")?;
    let joined = g.concat_rows(&[cls, embedded]);
    let order: Vec<usize> = (0..n_images)
        .flat_map(|i| std::iter::once(0).chain((0..grid2).map(move |j| 1 + i * grid2 + j)))
        .collect();
    let tokens = g.select_rows(joined, &order);
    let pos = b.param(g, "visual.positional_embedding")?;
    let pos = g.tile_rows(pos, n_images);
    let mut x = g.add(tokens, pos);
    x = layer_norm(g, b, x, "visual.ln_pre")?;

    let segments = vec![v.tokens(); n_images];
    for l in 0..v.depth {
        x = residual_block(g, b, cfg, x, "visual", "visual.", l, v.heads, &segments, false, reborrow(&mut rng))?;
    }
    let cls_rows: Vec<usize> = (0..n_images).map(|i| i * v.tokens()).collect();
    let x = g.select_rows(x, &cls_rows);
    layer_norm(g, b, x, "visual.ln_post")
}

/// End-token features after the final norm, one row per sequence. Each
/// sequence must already fit the context.
pub fn text_tower(g: &mut Graph, b: &mut Binder, cfg: &ModelConfig, sequences: &[Vec<u32>], mut rng: Dropout) -> Result<Var> {
    let t = cfg.encoder.text;
    if sequences.is_empty() {
        return Err(Error::invalid("no token sequences"));
    }
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut segments = Vec::with_capacity(sequences.len());
    for seq in sequences {
        if seq.is_empty() || seq.len() > t.context_length {
            return Err(Error::shape(format!(
                "token sequence length {} outside 1..={}",
                seq.len(),
                t.context_length
            )));
        }
        if let Some(bad) = seq.iter().find(|&&id| id as usize >= t.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {}", t.vocab_size)));
        }
        ids.extend(seq.iter().map(|&i| i as usize));
        positions.extend(0..seq.len());
        segments.push(seq.len());
    }
    let table = b.param(g, "token_embedding.weight")?;
    let emb = g.select_rows(table, &ids);
    let pos = b.param(g, "positional_embedding")?;
    let pos = g.select_rows(pos, &positions);
    let mut x = g.add(emb, pos);
    for l in 0..t.depth {
        x = residual_block(g, b, cfg, x, "text", "", l, t.heads, &segments, true, reborrow(&mut rng))?;
    }
    let mut ends = Vec::with_capacity(segments.len());
    let mut acc = 0;
    for len in &segments {
        acc += len;
        ends.push(acc - 1);
    }
    let x = g.select_rows(x, &ends);
    layer_norm(g, b, x, "ln_final")
}

/// Attention pooling over consecutive groups of nine view features.
/// Returns the pooled features (`bags × width`) and weights (`bags × 9`).
pub fn mil_pool(g: &mut Graph, b: &mut Binder, cfg: &ModelConfig, features: Var) -> Result<(Var, Var)> {
    let (n, _) = g.shape(features);
    if n == 0 || n % VIEWS_PER_NODULE != 0 {
        return Err(Error::shape(format!("{n} view features is not a multiple of {VIEWS_PER_NODULE}")));
    }
    let bags = n / VIEWS_PER_NODULE;
    let v = linear(g, b, features, "mil.attention_v")?;
    let mut hidden = g.tanh(v);
    if cfg.mil.kind == MilKind::Gated {
        let u = linear(g, b, features, "mil.attention_u")?;
        let gate = g.sigmoid(u);
        hidden = g.mul(hidden, gate);
    }
    let scores = linear(g, b, hidden, "mil.attention_w")?;
    let scores = g.reshape(scores, bags, VIEWS_PER_NODULE);
    let weights = g.softmax_rows(scores);
    let column = g.reshape(weights, n, 1);
    let weighted = g.mul_col(features, column);
    let pooled = g.sum_row_groups(weighted, VIEWS_PER_NODULE);
    Ok((pooled, weights))
}

pub fn project(g: &mut Graph, b: &mut Binder, cfg: &ModelConfig, branch: Branch, x: Var) -> Result<Var> {
    let name = branch.name();
    let mut h = x;
    if cfg.heads.projection_hidden.is_some() {
        h = linear(g, b, h, &format!("proj.{name}.hidden"))?;
        h = g.quick_gelu(h);
    }
    linear(g, b, h, &format!("proj.{name}.out"))
}

pub fn risk_logits(g: &mut Graph, b: &mut Binder, branch: Branch, x: Var) -> Result<Var> {
    linear(g, b, x, &format!("head.{}", branch.name()))
}

/// Handles into one forward pass of the image branch.
#[derive(Clone, Copy, Debug)]
pub struct ImageGraph {
    pub view_features: Var,
    pub pooled: Var,
    pub mil_weights: Var,
    pub embedding: Var,
    pub logits: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct TextGraph {
    pub features: Var,
    pub embedding: Var,
    pub logits: Var,
}

pub fn image_branch(g: &mut Graph, b: &mut Binder, cfg: &ModelConfig, stacks: &[&ViewStack], rng: Dropout) -> Result<ImageGraph> {
    let view_features = vision_tower(g, b, cfg, stacks, rng)?;
    let (pooled, mil_weights) = mil_pool(g, b, cfg, view_features)?;
    let embedding = project(g, b, cfg, Branch::Image, pooled)?;
    let head_in = match cfg.heads.risk_input {
        RiskInput::Projected => embedding,
        RiskInput::Encoder => pooled,
    };
    let logits = risk_logits(g, b, Branch::Image, head_in)?;
    Ok(ImageGraph {
        view_features,
        pooled,
        mil_weights,
        embedding,
        logits,
    })
}

pub fn text_branch(g: &mut Graph, b: &mut Binder, cfg: &ModelConfig, sequences: &[Vec<u32>], rng: Dropout) -> Result<TextGraph> {
    let features = text_tower(g, b, cfg, sequences, rng)?;
    let embedding = project(g, b, cfg, Branch::Text, features)?;
    let head_in = match cfg.heads.risk_input {
        RiskInput::Projected => embedding,
        RiskInput::Encoder => features,
    };
    let logits = risk_logits(g, b, Branch::Text, head_in)?;
    Ok(TextGraph {
        features,
        embedding,
        logits,
    })
}
