//! Fold training: rare-feature sampling, AdamW over the trainable subset,
//! best-validation checkpointing and cross-validation summaries.

mod data;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{Dataset, Sample};

use crate::autodiff::{Graph, Matrix};
use crate::calibrate::{aggregate_by_patient, fit_beta_calibration, BetaCalibrator, NoduleRisk};
use crate::data_ingest::{make_patient_folds_with, CohortManifest, FoldSplit};
use crate::evaluate::auroc;
use crate::infer::infer_many;
use crate::model::network::{image_branch, text_branch, Binder, Dropout};
use crate::model::{CheckpointInfo, LoraConfig, ModelBundle, ModelConfig, ParamKind};
use crate::objective::{inverse_frequency_class_weights, total_loss_graph, LossTerms, LossWeights};
use crate::preprocess::{AugmentationConfig, ViewStack};
use crate::semantics::{FeatureValue, SemanticFeatureSet, TextAugmentConfig};
use crate::{Error, Result};

/// Lower bound on the learned temperature.
pub const MIN_TEMPERATURE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub temperature_init: f64,
    pub lora: LoraConfig,
    pub seed: u64,
    pub folds: usize,
    /// Balance outcome labels across folds.
    pub stratified_folds: bool,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    /// Loss term weights. `class_weights` is replaced by inverse training
    /// frequencies when `balance_classes` is set.
    pub loss: LossWeights,
    pub balance_classes: bool,
    /// Draw batches by rare-feature weight instead of uniformly.
    pub rare_feature_sampling: bool,
    pub augmentation: AugmentationConfig,
    pub text_augmentation: TextAugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.1,
            batch_size: 16,
            epochs: 30,
            temperature_init: 0.03,
            lora: LoraConfig::default(),
            seed: 0,
            folds: 5,
            stratified_folds: true,
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            loss: LossWeights::default(),
            balance_classes: true,
            rare_feature_sampling: true,
            augmentation: AugmentationConfig::default(),
            text_augmentation: TextAugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let [b1, b2] = self.adam_betas;
        let ok = self.learning_rate.is_finite()
            && self.learning_rate > 0.0
            && self.weight_decay.is_finite()
            && self.weight_decay >= 0.0
            && self.batch_size >= 2
            && self.temperature_init.is_finite()
            && self.temperature_init >= MIN_TEMPERATURE
            && self.folds >= 2
            && (0.0..1.0).contains(&b1)
            && (0.0..1.0).contains(&b2)
            && self.adam_eps > 0.0;
        if !ok {
            return Err(Error::invalid(format!("invalid training config {self:?}")));
        }
        self.loss.validate()?;
        self.augmentation.validate()
    }

    /// The model config with this run's adapter and temperature settings.
    pub fn apply_to(&self, model: ModelConfig) -> ModelConfig {
        ModelConfig {
            lora: self.lora,
            initial_temperature: self.temperature_init,
            ..model
        }
    }
}

/// Per-nodule draw weights with mean 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerWeights(Vec<f64>);

impl SamplerWeights {
    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Categorical feature-values of a set; each annotated margin class counts
/// on its own and diameters are skipped.
fn feature_values(set: &SemanticFeatureSet) -> Vec<String> {
    let mut out = Vec::new();
    for (f, v) in set.present() {
        match v {
            FeatureValue::Diameter(_) => {}
            FeatureValue::Class(c) => out.push(format!("{}={c}", f.table_name())),
            FeatureValue::Margins(m) => out.extend(m.iter().map(|c| format!("{}={c}", f.table_name()))),
        }
    }
    out
}

/// Weight of a nodule is the mean of `1 / count(feature = value)` over its
/// present categorical values, renormalized to mean 1. A nodule with no
/// categorical values gets the mean raw weight of the others.
pub fn build_sampler(sets: &[SemanticFeatureSet]) -> Result<SamplerWeights> {
    if sets.is_empty() {
        return Err(Error::invalid("cannot build a sampler for an empty cohort"));
    }
    let values: Vec<Vec<String>> = sets.iter().map(feature_values).collect();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for v in values.iter().flatten() {
        *counts.entry(v.as_str()).or_default() += 1;
    }
    let raw: Vec<Option<f64>> = values
        .iter()
        .map(|vs| {
            (!vs.is_empty()).then(|| vs.iter().map(|v| 1.0 / counts[v.as_str()] as f64).sum::<f64>() / vs.len() as f64)
        })
        .collect();
    let known: Vec<f64> = raw.iter().flatten().copied().collect();
    let fill = if known.is_empty() {
        1.0
    } else {
        known.iter().sum::<f64>() / known.len() as f64
    };
    let w: Vec<f64> = raw.into_iter().map(|r| r.unwrap_or(fill)).collect();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    Ok(SamplerWeights(w.into_iter().map(|x| x / mean).collect()))
}

/// Whether decoupled weight decay applies to a parameter.
fn decays(name: &str, kind: ParamKind) -> bool {
    if kind == ParamKind::Temperature || name.contains("ln_") || name.ends_with(".bias") {
        return false;
    }
    !(name.contains("embedding"))
}

/// AdamW with decoupled weight decay, one moment pair per trainable tensor.
#[derive(Clone, Debug)]
pub struct AdamW {
    betas: [f64; 2],
    eps: f64,
    weight_decay: f64,
    step: u64,
    moments: BTreeMap<usize, (Matrix, Matrix)>,
}

impl AdamW {
    pub fn new(betas: [f64; 2], eps: f64, weight_decay: f64) -> Self {
        Self {
            betas,
            eps,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update with gradients keyed by store position.
    pub fn update(&mut self, bundle: &mut ModelBundle, grads: Vec<(usize, Matrix)>, lr: f64) {
        self.step += 1;
        let [b1, b2] = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, g) in grads {
            let spec = &bundle.params().specs()[i];
            let decay = decays(&spec.name, spec.kind);
            let (m, v) = self
                .moments
                .entry(i)
                .or_insert_with(|| (Matrix::zeros(g.dim()), Matrix::zeros(g.dim())));
            m.zip_mut_with(&g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(&g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let p = bundle.params_mut().value_mut(i);
            if decay && self.weight_decay > 0.0 {
                p.mapv_inplace(|x| x * (1.0 - lr * self.weight_decay));
            }
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + self.eps);
            });
        }
    }
}

/// Builds the full training loss for one batch. Returns the loss handles and
/// the trainable leaves bound in `g`.
pub fn batch_loss(
    g: &mut Graph,
    bundle: &ModelBundle,
    stacks: &[&ViewStack],
    sequences: &[Vec<u32>],
    labels: &[u8],
    weights: &LossWeights,
    mut rng: Dropout,
) -> Result<(LossTerms, Vec<(usize, crate::autodiff::Var)>)> {
    let cfg = bundle.config();
    let mut b = Binder::new(bundle.params());
    let img = image_branch(g, &mut b, cfg, stacks, crate::model::network::reborrow(&mut rng))?;
    let txt = text_branch(g, &mut b, cfg, sequences, rng)?;
    let log_tau = b.param(g, "logit.log_tau")?;
    let terms = total_loss_graph(g, img.embedding, txt.embedding, img.logits, txt.logits, labels, log_tau, weights)?;
    Ok((terms, b.trainable()))
}

/// Bundle plus its bookkeeping.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub bundle: ModelBundle,
    pub info: CheckpointInfo,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.bundle.save_checkpoint(dir, &self.info)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (bundle, info) = ModelBundle::load_checkpoint(dir)?;
        Ok(Self { bundle, info })
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        fold: usize,
        step: usize,
        epoch: usize,
        loss: f64,
        clip: f64,
        ce_image: f64,
        ce_text: f64,
        tau: f64,
        lr: f64,
    },
    Epoch {
        fold: usize,
        epoch: usize,
        mean_loss: Option<f64>,
        val_auroc: Option<f64>,
    },
}

fn emit(log: &mut dyn Write, rec: &LogRecord) -> Result<()> {
    let line = serde_json::to_string(rec)?;
    writeln!(log, "{line}").map_err(|e| Error::io("<training log>", e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: Option<f64>,
    pub val_auroc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub checkpoint: Checkpoint,
    /// Epoch 0 is the initialization.
    pub history: Vec<EpochSummary>,
}

/// Image-branch probabilities for dataset rows, deterministic path.
pub fn predict_samples(bundle: &ModelBundle, data: &Dataset, indices: &[usize], fold_index: usize) -> Result<Vec<NoduleRisk>> {
    let size = bundle.config().encoder.vision.image_size;
    let stats = bundle.config().channel_stats;
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(16) {
        let stacks: Vec<ViewStack> = chunk
            .iter()
            .map(|&i| data.sample(i).eval_stack(size, &stats))
            .collect::<Result<_>>()?;
        let refs: Vec<&ViewStack> = stacks.iter().collect();
        for (&i, p) in chunk.iter().zip(infer_many(bundle, &refs)?) {
            let s = data.sample(i);
            out.push(NoduleRisk {
                patient_id: s.patient_id.clone(),
                nodule_id: s.nodule_id.clone(),
                probability: p,
                fold_index,
            });
        }
    }
    Ok(out)
}

/// Patient-level AUROC of max-aggregated nodule risks; `None` when only one
/// class is present.
pub fn patient_auroc(risks: &[NoduleRisk], labels: &BTreeMap<String, u8>) -> Result<Option<f64>> {
    let patients = aggregate_by_patient(risks)?;
    let y: Vec<u8> = patients
        .iter()
        .map(|p| {
            labels
                .get(&p.patient_id)
                .copied()
                .ok_or_else(|| Error::invalid(format!("no label for patient {}", p.patient_id)))
        })
        .collect::<Result<_>>()?;
    if y.iter().all(|&l| l == y[0]) {
        return Ok(None);
    }
    let s: Vec<f64> = patients.iter().map(|p| p.probability).collect();
    auroc(&s, &y).map(Some)
}

fn patient_labels(data: &Dataset) -> BTreeMap<String, u8> {
    let mut out: BTreeMap<String, u8> = BTreeMap::new();
    for s in data.samples() {
        let e = out.entry(s.patient_id.clone()).or_insert(0);
        *e = (*e).max(s.label);
    }
    out
}

fn clamp_temperature(bundle: &mut ModelBundle) -> Result<()> {
    let i = bundle
        .params()
        .position("logit.log_tau")
        .ok_or_else(|| Error::invalid("model has no temperature"))?;
    let lo = MIN_TEMPERATURE.ln();
    bundle.params_mut().value_mut(i).mapv_inplace(|x| x.max(lo));
    Ok(())
}

/// Trains one fold from `init` and returns the checkpoint of the epoch with
/// the best validation AUROC (later epochs win ties; epoch 0 is the
/// initialization). Log records go to `log` as JSON lines.
pub fn train_fold(
    split: &FoldSplit,
    config: &TrainConfig,
    init: &ModelBundle,
    data: &Dataset,
    log: &mut dyn Write,
) -> Result<FoldOutcome> {
    config.validate()?;
    let train_idx = data.indices_for(&split.train_patients);
    let val_idx = data.indices_for(&split.val_patients);
    if train_idx.len() < 2 {
        return Err(Error::invalid(format!("fold {} has fewer than 2 training nodules", split.fold_index)));
    }
    if val_idx.is_empty() {
        return Err(Error::invalid(format!("fold {} has no validation nodules", split.fold_index)));
    }
    let labels = patient_labels(data);
    let fold = split.fold_index;
    let sampler = if config.rare_feature_sampling {
        build_sampler(&train_idx.iter().map(|&i| data.sample(i).semantics.clone()).collect::<Vec<_>>())?
    } else {
        SamplerWeights::uniform(train_idx.len())
    };
    let dist = WeightedIndex::new(sampler.as_slice()).map_err(|e| Error::invalid(e.to_string()))?;
    let mut weights = config.loss;
    if config.balance_classes {
        let y: Vec<u8> = train_idx.iter().map(|&i| data.sample(i).label).collect();
        weights.class_weights = inverse_frequency_class_weights(&y)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(fold as u64);
    let mut bundle = init.clone();
    let size = bundle.config().encoder.vision.image_size;
    let stats = bundle.config().channel_stats;
    let mut opt = AdamW::new(config.adam_betas, config.adam_eps, config.weight_decay);
    let lr = config.learning_rate;

    let val_auroc = patient_auroc(&predict_samples(&bundle, data, &val_idx, fold)?, &labels)?;
    emit(log, &LogRecord::Epoch { fold, epoch: 0, mean_loss: None, val_auroc })?;
    let mut history = vec![EpochSummary { epoch: 0, mean_loss: None, val_auroc }];
    let snapshot = |bundle: &ModelBundle, epoch: usize, val_auroc: Option<f64>, rng: &ChaCha8Rng| -> Result<Checkpoint> {
        Ok(Checkpoint {
            bundle: bundle.clone(),
            info: CheckpointInfo {
                fold_index: Some(fold),
                epoch,
                val_auroc,
                rng_state: Some(serde_json::to_string(rng)?),
            },
        })
    };
    let mut best = snapshot(&bundle, 0, val_auroc, &rng)?;
    let score = |a: Option<f64>| a.unwrap_or(f64::NEG_INFINITY);

    let steps = train_idx.len().div_ceil(config.batch_size);
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let mut loss_sum = 0.0;
        for _ in 0..steps {
            step += 1;
            let picks: Vec<usize> = (0..config.batch_size).map(|_| train_idx[dist.sample(&mut rng)]).collect();
            let mut stacks = Vec::with_capacity(picks.len());
            let mut seqs = Vec::with_capacity(picks.len());
            for &i in &picks {
                let s = data.sample(i);
                stacks.push(s.train_stack(size, &stats, &config.augmentation, &mut rng)?);
                seqs.push(bundle.tokenize(&s.training_text(&config.text_augmentation, &mut rng)?));
            }
            let y: Vec<u8> = picks.iter().map(|&i| data.sample(i).label).collect();
            let refs: Vec<&ViewStack> = stacks.iter().collect();

            let mut g = Graph::new();
            let (terms, leaves) = batch_loss(
                &mut g,
                &bundle,
                &refs,
                &seqs,
                &y,
                &weights,
                Some(&mut rng as &mut dyn RngCore),
            )?;
            let (total, clip, ce_image, ce_text) =
                (g.scalar(terms.total), g.scalar(terms.clip), g.scalar(terms.ce_image), g.scalar(terms.ce_text));
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss { step, epoch, lr, clip, ce_image, ce_text });
            }
            let mut grads = g.backward(terms.total);
            let collected: Vec<(usize, Matrix)> =
                leaves.into_iter().filter_map(|(i, v)| grads.take(v).map(|gr| (i, gr))).collect();
            drop(g);
            opt.update(&mut bundle, collected, lr);
            clamp_temperature(&mut bundle)?;
            loss_sum += total;
            emit(
                log,
                &LogRecord::Step {
                    fold,
                    step,
                    epoch,
                    loss: total,
                    clip,
                    ce_image,
                    ce_text,
                    tau: bundle.temperature().value(),
                    lr,
                },
            )?;
        }
        let mean_loss = Some(loss_sum / steps as f64);
        let val_auroc = patient_auroc(&predict_samples(&bundle, data, &val_idx, fold)?, &labels)?;
        emit(log, &LogRecord::Epoch { fold, epoch, mean_loss, val_auroc })?;
        history.push(EpochSummary { epoch, mean_loss, val_auroc });
        if score(val_auroc) >= score(best.info.val_auroc) {
            best = snapshot(&bundle, epoch, val_auroc, &rng)?;
        }
    }
    Ok(FoldOutcome { checkpoint: best, history })
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub split: FoldSplit,
    pub outcome: FoldOutcome,
    /// Fitted on the fold's validation patients.
    pub calibrator: BetaCalibrator,
    pub val_predictions: Vec<NoduleRisk>,
}

#[derive(Clone, Debug)]
pub struct CvOutcome {
    pub folds: Vec<FoldResult>,
    pub summary: CvSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub val_auroc: Vec<Option<f64>>,
    /// Over folds with a defined AUROC.
    pub mean: Option<f64>,
    /// Sample standard deviation (n − 1).
    pub std: Option<f64>,
}

impl CvSummary {
    pub fn from_values(val_auroc: Vec<Option<f64>>) -> Self {
        let v: Vec<f64> = val_auroc.iter().flatten().copied().collect();
        let mean = (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let std = mean.filter(|_| v.len() > 1).map(|m| {
            (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        });
        Self { val_auroc, mean, std }
    }
}

/// Patient-level k-fold cross-validation over `manifest`, one checkpoint and
/// one calibrator per fold. A fold whose validation patients are all one
/// class gets the identity calibrator.
pub fn run_cv(
    manifest: &CohortManifest,
    data: &Dataset,
    config: &TrainConfig,
    init: &ModelBundle,
    log: &mut dyn Write,
) -> Result<CvOutcome> {
    config.validate()?;
    let n_patients = manifest.patients().len();
    if n_patients < config.folds {
        return Err(Error::invalid(format!("{n_patients} patients cannot fill {} folds", config.folds)));
    }
    let labels = patient_labels(data);
    let splits = make_patient_folds_with(manifest, config.folds, config.seed, config.stratified_folds)?;
    let mut folds = Vec::with_capacity(splits.len());
    for split in splits {
        let outcome = train_fold(&split, config, init, data, log)?;
        let val_idx = data.indices_for(&split.val_patients);
        let val_predictions = predict_samples(&outcome.checkpoint.bundle, data, &val_idx, split.fold_index)?;
        let patients = aggregate_by_patient(&val_predictions)?;
        let p: Vec<f64> = patients.iter().map(|r| r.probability).collect();
        let y: Vec<u8> = patients.iter().map(|r| labels[&r.patient_id]).collect();
        let calibrator = if y.iter().any(|&l| l != y[0]) {
            fit_beta_calibration(&p, &y)?
        } else {
            BetaCalibrator::identity()
        };
        folds.push(FoldResult {
            split,
            outcome,
            calibrator,
            val_predictions,
        });
    }
    let summary = CvSummary::from_values(folds.iter().map(|f| f.outcome.checkpoint.info.val_auroc).collect());
    Ok(CvOutcome { folds, summary })
}

#[cfg(test)]
mod tests;
