//! Training objective: symmetric InfoNCE alignment plus class-weighted
//! cross-entropy on the image and text risk branches.
//!
//! The graph-level functions are what the trainer differentiates; the
//! value-level wrappers build a throwaway graph and are used for evaluation
//! and tests.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, Var};
use crate::{Error, Result};

/// Paired image/text embeddings for one batch; row `i` of each side belongs
/// to nodule `i`.
#[derive(Clone, Debug)]
pub struct BatchEmbeddings {
    pub image: Matrix,
    pub text: Matrix,
    pub labels: Vec<u8>,
}

impl BatchEmbeddings {
    pub fn new(image: Matrix, text: Matrix, labels: Vec<u8>) -> Result<Self> {
        if image.dim() != text.dim() {
            return Err(Error::shape(format!(
                "image embeddings {:?} vs text embeddings {:?}",
                image.dim(),
                text.dim()
            )));
        }
        if labels.len() != image.nrows() {
            return Err(Error::shape(format!(
                "{} labels for batch of {}",
                labels.len(),
                image.nrows()
            )));
        }
        Ok(Self {
            image,
            text,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.image.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.image.nrows() == 0
    }
}

/// Softmax temperature, stored as its logarithm so any update keeps it positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    log_value: f64,
}

impl Temperature {
    pub fn new(value: f64) -> Result<Self> {
        if !(value > 0.0) || !value.is_finite() {
            return Err(Error::invalid(format!("temperature must be positive, got {value}")));
        }
        Ok(Self {
            log_value: value.ln(),
        })
    }

    pub fn from_log(log_value: f64) -> Self {
        Self { log_value }
    }

    pub fn value(self) -> f64 {
        self.log_value.exp()
    }

    pub fn log_value(self) -> f64 {
        self.log_value
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub clip: f64,
    pub ce_image: f64,
    pub ce_text: f64,
    pub class_weights: [f64; 2],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            clip: 1.0,
            ce_image: 1.0,
            ce_text: 1.0,
            class_weights: [1.0, 1.0],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.clip, self.ce_image, self.ce_text];
        if all.iter().chain(&self.class_weights).any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("loss weights must be finite and nonnegative"));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::invalid("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

/// Inverse class frequency, rescaled so the two weights average to 1.
pub fn inverse_frequency_class_weights(labels: &[u8]) -> Result<[f64; 2]> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.iter().filter(|&&l| l == 0).count();
    if pos + neg != labels.len() {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("class weights need both classes present"));
    }
    let raw = [1.0 / neg as f64, 1.0 / pos as f64];
    let mean = (raw[0] + raw[1]) / 2.0;
    Ok([raw[0] / mean, raw[1] / mean])
}

/// Cosine-similarity logits `norm(I)·norm(S)ᵀ / τ` with `τ = exp(log_tau)`.
pub fn similarity_logits(g: &mut Graph, image: Var, text: Var, log_tau: Var) -> Var {
    let i = g.l2_normalize_rows(image);
    let s = g.l2_normalize_rows(text);
    let sim = g.matmul_bt(i, s);
    let neg = g.neg(log_tau);
    let inv_tau = g.exp(neg);
    g.mul_scalar(sim, inv_tau)
}

fn diagonal_nll(g: &mut Graph, logits: Var) -> Var {
    let n = g.shape(logits).0;
    let logp = g.log_softmax_rows(logits);
    let diag: Vec<usize> = (0..n).collect();
    let picked = g.gather(logp, &diag);
    let m = g.mean(picked);
    g.neg(m)
}

/// Image-to-text InfoNCE: each image row normalizes over all text rows.
pub fn info_nce_image_graph(g: &mut Graph, logits: Var) -> Var {
    diagonal_nll(g, logits)
}

/// Text-to-image InfoNCE: each text row normalizes over all image rows.
pub fn info_nce_semantic_graph(g: &mut Graph, logits: Var) -> Var {
    let t = g.transpose(logits);
    diagonal_nll(g, t)
}

pub fn clip_loss_graph(g: &mut Graph, logits: Var) -> Var {
    let a = info_nce_image_graph(g, logits);
    let b = info_nce_semantic_graph(g, logits);
    let s = g.add(a, b);
    g.scale(s, 0.5)
}

/// Weighted mean of `-log softmax(logits)[label]`, normalized by the applied weights.
pub fn weighted_cross_entropy_graph(
    g: &mut Graph,
    logits: Var,
    labels: &[u8],
    class_weights: [f64; 2],
) -> Result<Var> {
    let (n, c) = g.shape(logits);
    if c != 2 || n != labels.len() {
        return Err(Error::shape(format!(
            "logits {:?} for {} labels",
            (n, c),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid(format!("invalid label {bad}")));
    }
    let w: Vec<f64> = labels.iter().map(|&l| class_weights[l as usize]).collect();
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("zero total weight"));
    }
    let cols: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let logp = g.log_softmax_rows(logits);
    let picked = g.gather(logp, &cols);
    let wv = g.constant(Array2::from_shape_vec((n, 1), w).expect("weight column"));
    let weighted = g.mul(picked, wv);
    let s = g.sum(weighted);
    Ok(g.scale(s, -1.0 / total))
}

/// Handles to the individual loss terms of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub clip: Var,
    pub ce_image: Var,
    pub ce_text: Var,
}

pub fn total_loss_graph(
    g: &mut Graph,
    image_emb: Var,
    text_emb: Var,
    image_logits: Var,
    text_logits: Var,
    labels: &[u8],
    log_tau: Var,
    weights: &LossWeights,
) -> Result<LossTerms> {
    weights.validate()?;
    let b = g.shape(image_emb).0;
    if b < 2 {
        return Err(Error::invalid(format!("contrastive loss needs B >= 2, got {b}")));
    }
    if g.shape(text_emb) != g.shape(image_emb)
        || g.shape(image_logits).0 != b
        || g.shape(text_logits).0 != b
    {
        return Err(Error::shape("inconsistent batch dimension across loss inputs"));
    }
    let logits = similarity_logits(g, image_emb, text_emb, log_tau);
    let clip = clip_loss_graph(g, logits);
    let ce_image = weighted_cross_entropy_graph(g, image_logits, labels, weights.class_weights)?;
    let ce_text = weighted_cross_entropy_graph(g, text_logits, labels, weights.class_weights)?;
    let a = g.scale(clip, weights.clip);
    let bterm = g.scale(ce_image, weights.ce_image);
    let c = g.scale(ce_text, weights.ce_text);
    let ab = g.add(a, bterm);
    let total = g.add(ab, c);
    Ok(LossTerms {
        total,
        clip,
        ce_image,
        ce_text,
    })
}

fn contrastive_setup(batch: &BatchEmbeddings, tau: Temperature) -> Result<(Graph, Var)> {
    if batch.len() < 2 {
        return Err(Error::invalid(format!(
            "contrastive loss needs B >= 2, got {}",
            batch.len()
        )));
    }
    let mut g = Graph::new();
    let i = g.constant(batch.image.clone());
    let s = g.constant(batch.text.clone());
    let lt = g.scalar_constant(tau.log_value());
    let logits = similarity_logits(&mut g, i, s, lt);
    Ok((g, logits))
}

pub fn info_nce_image(batch: &BatchEmbeddings, tau: Temperature) -> Result<f64> {
    let (mut g, logits) = contrastive_setup(batch, tau)?;
    let l = info_nce_image_graph(&mut g, logits);
    Ok(g.scalar(l))
}

pub fn info_nce_semantic(batch: &BatchEmbeddings, tau: Temperature) -> Result<f64> {
    let (mut g, logits) = contrastive_setup(batch, tau)?;
    let l = info_nce_semantic_graph(&mut g, logits);
    Ok(g.scalar(l))
}

pub fn clip_loss(batch: &BatchEmbeddings, tau: Temperature) -> Result<f64> {
    let (mut g, logits) = contrastive_setup(batch, tau)?;
    let l = clip_loss_graph(&mut g, logits);
    Ok(g.scalar(l))
}

pub fn weighted_cross_entropy(logits: &Matrix, labels: &[u8], class_weights: [f64; 2]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let out = weighted_cross_entropy_graph(&mut g, l, labels, class_weights)?;
    Ok(g.scalar(out))
}

pub fn total_loss(
    batch: &BatchEmbeddings,
    image_logits: &Matrix,
    text_logits: &Matrix,
    tau: Temperature,
    weights: &LossWeights,
) -> Result<f64> {
    let mut g = Graph::new();
    let i = g.constant(batch.image.clone());
    let s = g.constant(batch.text.clone());
    let il = g.constant(image_logits.clone());
    let tl = g.constant(text_logits.clone());
    let lt = g.scalar_constant(tau.log_value());
    let terms = total_loss_graph(&mut g, i, s, il, tl, &batch.labels, lt, weights)?;
    Ok(g.scalar(terms.total))
}
