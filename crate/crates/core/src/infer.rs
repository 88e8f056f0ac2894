//! Inference: image-branch risk, calibrated fold ensembles and zero-shot
//! semantic scoring.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::calibrate::{aggregate_by_patient, ensemble, BetaCalibrator, NoduleRisk, PatientRisk};
use crate::model::ModelBundle;
use crate::objective::Temperature;
use crate::preprocess::ViewStack;
use crate::semantics::{Feature, FeatureKind, MARGIN_CLASSES};
use crate::{Error, Result};

/// Nodules per forward pass when scoring many stacks.
const CHUNK: usize = 16;

/// Malignancy probability of the image branch in eval mode.
pub fn infer_nodule(bundle: &ModelBundle, stack: &ViewStack) -> Result<f64> {
    Ok(bundle.image_outputs(&[stack])?[0].probability)
}

/// Malignancy probabilities for many stacks, in order.
pub fn infer_many(bundle: &ModelBundle, stacks: &[&ViewStack]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(stacks.len());
    for chunk in stacks.chunks(CHUNK) {
        out.extend(bundle.image_outputs(chunk)?.into_iter().map(|o| o.probability));
    }
    Ok(out)
}

/// Patient-level max, per-fold calibration, then the fold mean.
pub fn calibrated_ensemble(per_fold: &[Vec<NoduleRisk>], calibrators: &[BetaCalibrator]) -> Result<Vec<PatientRisk>> {
    if per_fold.len() != calibrators.len() {
        return Err(Error::invalid(format!(
            "{} prediction sets but {} calibrators",
            per_fold.len(),
            calibrators.len()
        )));
    }
    let calibrated: Vec<Vec<PatientRisk>> = per_fold
        .iter()
        .zip(calibrators)
        .map(|(risks, cal)| {
            Ok(aggregate_by_patient(risks)?
                .into_iter()
                .map(|p| PatientRisk {
                    probability: cal.apply(p.probability),
                    ..p
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    ensemble(&calibrated)
}

/// Candidate sentences for one semantic feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotQuery {
    pub feature: Feature,
    pub sentences: Vec<String>,
    pub classes: Vec<String>,
}

fn noun(feature: Feature) -> Option<&'static str> {
    match feature {
        Feature::Margin => Some("margin"),
        Feature::Consistency => Some("consistency"),
        Feature::Shape => Some("shape"),
        Feature::MarginConspicuity => Some("margin conspicuity"),
        _ => None,
    }
}

impl ZeroShotQuery {
    pub fn new(feature: Feature, sentences: Vec<String>, classes: Vec<String>) -> Result<Self> {
        if sentences.len() < 2 {
            return Err(Error::invalid(format!(
                "zero-shot query for `{}` needs at least 2 candidates",
                feature.table_name()
            )));
        }
        if sentences.len() != classes.len() {
            return Err(Error::shape("one class label per candidate sentence"));
        }
        Ok(Self {
            feature,
            sentences,
            classes,
        })
    }

    /// Sentences from the standard templates: "This nodule <noun> is <class>."
    /// for categorical features, "There is <feature>." against "No findings."
    /// for binary ones.
    pub fn for_feature(feature: Feature) -> Result<Self> {
        if feature.is_binary() {
            let what = feature.report_label().to_lowercase();
            return Self::new(
                feature,
                vec![format!("There is {what}."), "No findings.".into()],
                vec!["Present".into(), "Absent".into()],
            );
        }
        let classes: &[&str] = match feature.kind() {
            FeatureKind::MarginSet => &MARGIN_CLASSES,
            FeatureKind::Categorical(c) => c,
            FeatureKind::Diameter => {
                return Err(Error::invalid(format!("`{}` is continuous", feature.table_name())));
            }
        };
        let noun = noun(feature).ok_or_else(|| {
            Error::invalid(format!("no zero-shot template for `{}`", feature.table_name()))
        })?;
        Self::new(
            feature,
            classes.iter().map(|c| format!("This nodule {noun} is {}.", c.to_lowercase())).collect(),
            classes.iter().map(|c| c.to_string()).collect(),
        )
    }

    /// Every feature with a template: margin, consistency, shape, margin
    /// conspicuity and the binary findings.
    pub fn standard() -> Vec<Self> {
        Feature::ALL
            .into_iter()
            .filter(|f| f.is_binary() || noun(*f).is_some())
            .map(|f| Self::for_feature(f).expect("template exists"))
            .collect()
    }
}

fn normalized(v: ArrayView1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        &v / n
    } else {
        v.to_owned()
    }
}

/// Softmax over cosine similarities divided by `tau` (1 when `None`).
pub fn zero_shot_scores(image_embedding: &Array1<f64>, candidates: &Matrix, tau: Option<Temperature>) -> Result<Vec<f64>> {
    if candidates.nrows() < 2 {
        return Err(Error::invalid("zero-shot scoring needs at least 2 candidates"));
    }
    if candidates.ncols() != image_embedding.len() {
        return Err(Error::shape(format!(
            "image embedding has {} dims, candidates {}",
            image_embedding.len(),
            candidates.ncols()
        )));
    }
    let t = tau.map_or(1.0, |t| t.value());
    let i = normalized(image_embedding.view());
    let logits: Vec<f64> = candidates.rows().into_iter().map(|r| normalized(r).dot(&i) / t).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Text-side candidate embeddings of a query, encoded once and reused
/// across nodules.
#[derive(Clone, Debug)]
pub struct EncodedQuery {
    pub query: ZeroShotQuery,
    pub embeddings: Matrix,
}

pub fn encode_query(bundle: &ModelBundle, query: &ZeroShotQuery) -> Result<EncodedQuery> {
    Ok(EncodedQuery {
        query: query.clone(),
        embeddings: bundle.text_embeddings(&query.sentences)?,
    })
}

/// One CSV row of zero-shot output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotRow {
    pub patient_id: String,
    pub nodule_id: String,
    pub feature: String,
    pub class: String,
    pub probability: f64,
}

/// Scores every query for one nodule. `unit_temperature` swaps the learned
/// temperature for 1.
pub fn zero_shot_nodule(
    bundle: &ModelBundle,
    patient_id: &str,
    nodule_id: &str,
    image_embedding: &Array1<f64>,
    queries: &[EncodedQuery],
    unit_temperature: bool,
) -> Result<Vec<ZeroShotRow>> {
    let tau = (!unit_temperature).then(|| bundle.temperature());
    let mut rows = Vec::new();
    for q in queries {
        let p = zero_shot_scores(image_embedding, &q.embeddings, tau)?;
        rows.extend(q.query.classes.iter().zip(p).map(|(c, probability)| ZeroShotRow {
            patient_id: patient_id.to_string(),
            nodule_id: nodule_id.to_string(),
            feature: q.query.feature.table_name().to_string(),
            class: c.clone(),
            probability,
        }));
    }
    Ok(rows)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct NoduleRow {
    patient_id: String,
    nodule_id: String,
    fold: usize,
    probability: f64,
}

/// `patient_id,probability`.
pub fn write_patient_predictions(path: &Path, risks: &[PatientRisk]) -> Result<()> {
    write_rows(path, risks)
}

/// `patient_id,nodule_id,fold,probability`.
pub fn write_nodule_predictions(path: &Path, risks: &[NoduleRisk]) -> Result<()> {
    let rows: Vec<NoduleRow> = risks
        .iter()
        .map(|r| NoduleRow {
            patient_id: r.patient_id.clone(),
            nodule_id: r.nodule_id.clone(),
            fold: r.fold_index,
            probability: r.probability,
        })
        .collect();
    write_rows(path, &rows)
}

/// `patient_id,nodule_id,feature,class,probability`.
pub fn write_zero_shot(path: &Path, rows: &[ZeroShotRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn read_patient_predictions(path: &Path) -> Result<Vec<PatientRisk>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let rows: Vec<PatientRisk> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    let mut seen = BTreeMap::new();
    for p in &rows {
        if !(0.0..=1.0).contains(&p.probability) {
            return Err(Error::invalid(format!("probability {} for {} outside [0, 1]", p.probability, p.patient_id)));
        }
        if seen.insert(p.patient_id.as_str(), ()).is_some() {
            return Err(Error::invalid(format!("duplicate patient {}", p.patient_id)));
        }
    }
    Ok(rows)
}
