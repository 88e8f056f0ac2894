//! Structured semantic features, cross-schema harmonization, report rendering
//! and text augmentation.

mod augment;
mod harmonize;
mod report;

pub use augment::{augment_text, select_training_text, SynonymTable, TextAugmentConfig};
pub use harmonize::{
    aggregate_annotations, aggregate_categorical, aggregate_numeric, aggregate_lidc_readers, harmonize_lidc,
    harmonization_rules, HarmonizationRule, LidcValue, Predicate, ReaderValue,
};
pub use report::{render_report, NoduleReport, ReportGenerator, TemplateReportGenerator};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MARGIN_CLASSES: [&str; 5] = ["Smooth", "Lobulated", "Spiculated", "Ill-defined", "Notched"];
pub const CONSISTENCY_CLASSES: [&str; 5] = ["Peri-cystic", "Solid", "Pure ground glass", "Semiconsolidation", "Part-solid"];
pub const SHAPE_CLASSES: [&str; 4] = ["Irregular", "Ovoid", "Polygonal", "Round"];
pub const CONSPICUITY_CLASSES: [&str; 2] = ["Well marginated", "Poorly marginated"];
pub const BINARY_CLASSES: [&str; 2] = ["Present", "Absent"];
pub const SUSPICION_CLASSES: [&str; 5] = ["Very Low", "Moderately Low", "Intermediate", "Moderately High", "High"];

/// Annotation spelled for an unannotated or not-applicable slot.
pub const NOT_APPLICABLE: &str = "N/A";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Feature {
    LongestAxialDiameter,
    ShortDiameter,
    Margin,
    Consistency,
    Shape,
    MarginConspicuity,
    Reticulation,
    CystLikeSpaces,
    Necrosis,
    EccentricCalcification,
    Cavitation,
    IntranodularBronchiectasis,
    AirwayCutoff,
    VascularConvergence,
    PleuralRetraction,
    PleuralAttachment,
    ParacicatricialEmphysema,
    SeptalStretching,
    Suspicion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    /// Non-negative millimeters.
    Diameter,
    /// Any subset of [`MARGIN_CLASSES`].
    MarginSet,
    Categorical(&'static [&'static str]),
}

impl Feature {
    pub const ALL: [Feature; 19] = [
        Feature::LongestAxialDiameter,
        Feature::ShortDiameter,
        Feature::Margin,
        Feature::Consistency,
        Feature::Shape,
        Feature::MarginConspicuity,
        Feature::Reticulation,
        Feature::CystLikeSpaces,
        Feature::Necrosis,
        Feature::EccentricCalcification,
        Feature::Cavitation,
        Feature::IntranodularBronchiectasis,
        Feature::AirwayCutoff,
        Feature::VascularConvergence,
        Feature::PleuralRetraction,
        Feature::PleuralAttachment,
        Feature::ParacicatricialEmphysema,
        Feature::SeptalStretching,
        Feature::Suspicion,
    ];

    /// Name used in annotation files.
    pub fn table_name(self) -> &'static str {
        match self {
            Feature::LongestAxialDiameter => "Longest Axial Diameter",
            Feature::ShortDiameter => "Short Diameter",
            Feature::Margin => "Nodule Margin",
            Feature::Consistency => "Nodule Consistency",
            Feature::Shape => "Nodule Shape",
            Feature::MarginConspicuity => "Nodule Margin Conspicuity",
            Feature::Reticulation => "Nodule Reticulation",
            Feature::CystLikeSpaces => "Cyst-like Spaces",
            Feature::Necrosis => "Necrosis",
            Feature::EccentricCalcification => "Eccentric Calcification",
            Feature::Cavitation => "Cavitation",
            Feature::IntranodularBronchiectasis => "Intra-nodular Bronchiectasis",
            Feature::AirwayCutoff => "Airway Cutoff",
            Feature::VascularConvergence => "Vascular Convergence",
            Feature::PleuralRetraction => "Pleural Retraction",
            Feature::PleuralAttachment => "Pleural Attachment",
            Feature::ParacicatricialEmphysema => "Paracicatricial Emphysema",
            Feature::SeptalStretching => "Septal Stretching",
            Feature::Suspicion => "Level of Suspicion of Lung Cancer",
        }
    }

    /// Bullet label used in rendered findings.
    pub fn report_label(self) -> &'static str {
        match self {
            Feature::LongestAxialDiameter => "Longest axial diameter (mm)",
            Feature::ShortDiameter => "Short diameter (mm)",
            Feature::Margin => "Nodule margins",
            Feature::Consistency => "Nodule consistency",
            Feature::Shape => "Nodule shape",
            Feature::MarginConspicuity => "Nodule margin conspicuity",
            Feature::Reticulation => "Nodule reticulation",
            Feature::CystLikeSpaces => "Cyst-like spaces",
            Feature::Necrosis => "Necrosis",
            Feature::EccentricCalcification => "Eccentric calcification",
            Feature::Cavitation => "Cavitation",
            Feature::IntranodularBronchiectasis => "Intra nodular bronchiectasis",
            Feature::AirwayCutoff => "Airway cutoff",
            Feature::VascularConvergence => "Vascular convergence",
            Feature::PleuralRetraction => "Pleural retraction",
            Feature::PleuralAttachment => "Pleural attachment",
            Feature::ParacicatricialEmphysema => "Paracicatricial emphysema",
            Feature::SeptalStretching => "Septal stretching",
            Feature::Suspicion => "Level of suspicion for lung cancer",
        }
    }

    pub fn kind(self) -> FeatureKind {
        match self {
            Feature::LongestAxialDiameter | Feature::ShortDiameter => FeatureKind::Diameter,
            Feature::Margin => FeatureKind::MarginSet,
            Feature::Consistency => FeatureKind::Categorical(&CONSISTENCY_CLASSES),
            Feature::Shape => FeatureKind::Categorical(&SHAPE_CLASSES),
            Feature::MarginConspicuity => FeatureKind::Categorical(&CONSPICUITY_CLASSES),
            Feature::Suspicion => FeatureKind::Categorical(&SUSPICION_CLASSES),
            _ => FeatureKind::Categorical(&BINARY_CLASSES),
        }
    }

    pub fn is_binary(self) -> bool {
        self.kind() == FeatureKind::Categorical(&BINARY_CLASSES)
    }

    /// Case-insensitive lookup by table name.
    pub fn from_table_name(name: &str) -> Result<Feature> {
        let key = name.trim();
        Feature::ALL
            .into_iter()
            .find(|f| f.table_name().eq_ignore_ascii_case(key))
            .ok_or_else(|| Error::UnknownFeature(name.to_string()))
    }
}

/// Canonical spelling of `value` within `classes`, matched case-insensitively.
fn canonical_class(feature: Feature, classes: &[&'static str], value: &str) -> Result<&'static str> {
    classes
        .iter()
        .copied()
        .find(|c| c.eq_ignore_ascii_case(value.trim()))
        .ok_or_else(|| Error::Vocabulary {
            feature: feature.table_name().into(),
            value: value.into(),
        })
}

#[derive(Clone, Debug, PartialEq)]
pub enum FeatureValue {
    Diameter(f64),
    Margins(Vec<&'static str>),
    Class(&'static str),
}

impl FeatureValue {
    /// Text as it appears in a findings bullet.
    pub fn display(&self) -> String {
        match self {
            FeatureValue::Diameter(v) => format!("{v:.1}"),
            FeatureValue::Margins(m) => m.join(", "),
            FeatureValue::Class(c) => (*c).to_string(),
        }
    }
}

/// One slot per feature; absent slots are MISSING.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SemanticFeatureSet {
    values: BTreeMap<Feature, FeatureValue>,
}

impl SemanticFeatureSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, feature: Feature) -> Option<&FeatureValue> {
        self.values.get(&feature)
    }

    pub fn is_missing(&self, feature: Feature) -> bool {
        !self.values.contains_key(&feature)
    }

    pub fn present(&self) -> impl Iterator<Item = (Feature, &FeatureValue)> {
        self.values.iter().map(|(f, v)| (*f, v))
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn clear(&mut self, feature: Feature) {
        self.values.remove(&feature);
    }

    pub fn set_diameter(&mut self, feature: Feature, mm: f64) -> Result<()> {
        if feature.kind() != FeatureKind::Diameter {
            return Err(Error::invalid(format!("{} is not a diameter", feature.table_name())));
        }
        if !(mm.is_finite() && mm >= 0.0) {
            return Err(Error::Vocabulary {
                feature: feature.table_name().into(),
                value: mm.to_string(),
            });
        }
        self.values.insert(feature, FeatureValue::Diameter(mm));
        Ok(())
    }

    pub fn set_class(&mut self, feature: Feature, value: &str) -> Result<()> {
        match feature.kind() {
            FeatureKind::Categorical(classes) => {
                let c = canonical_class(feature, classes, value)?;
                self.values.insert(feature, FeatureValue::Class(c));
                Ok(())
            }
            FeatureKind::MarginSet => self.set_margins([value]),
            FeatureKind::Diameter => Err(Error::invalid(format!("{} is numeric", feature.table_name()))),
        }
    }

    /// Replaces the margin set; an empty input leaves the slot MISSING.
    pub fn set_margins<'a>(&mut self, margins: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let mut picked = Vec::new();
        for m in margins {
            picked.push(canonical_class(Feature::Margin, &MARGIN_CLASSES, m)?);
        }
        let ordered: Vec<&'static str> = MARGIN_CLASSES.iter().copied().filter(|c| picked.contains(c)).collect();
        if ordered.is_empty() {
            self.values.remove(&Feature::Margin);
        } else {
            self.values.insert(Feature::Margin, FeatureValue::Margins(ordered));
        }
        Ok(())
    }

    pub fn add_margin(&mut self, margin: &str) -> Result<()> {
        let mut current = self.margins();
        current.push(canonical_class(Feature::Margin, &MARGIN_CLASSES, margin)?);
        self.set_margins(current)
    }

    pub fn margins(&self) -> Vec<&'static str> {
        match self.values.get(&Feature::Margin) {
            Some(FeatureValue::Margins(m)) => m.clone(),
            _ => Vec::new(),
        }
    }

    pub fn diameter(&self, feature: Feature) -> Option<f64> {
        match self.values.get(&feature) {
            Some(FeatureValue::Diameter(v)) => Some(*v),
            _ => None,
        }
    }

    pub fn class(&self, feature: Feature) -> Option<&'static str> {
        match self.values.get(&feature) {
            Some(FeatureValue::Class(c)) => Some(c),
            _ => None,
        }
    }

    /// Builds a set from `table name → raw JSON value`. `"N/A"`, empty
    /// strings and `null` are MISSING. Margins accept a list or a
    /// comma-separated string.
    pub fn from_named(raw: &BTreeMap<String, serde_json::Value>) -> Result<Self> {
        use serde_json::Value;
        let mut set = Self::new();
        for (name, value) in raw {
            let feature = Feature::from_table_name(name)?;
            let is_na = |s: &str| s.trim().is_empty() || s.trim().eq_ignore_ascii_case(NOT_APPLICABLE);
            match (feature.kind(), value) {
                (_, Value::Null) => {}
                (_, Value::String(s)) if is_na(s) => {}
                (FeatureKind::Diameter, Value::Number(n)) => {
                    set.set_diameter(feature, n.as_f64().unwrap_or(f64::NAN))?;
                }
                (FeatureKind::Diameter, Value::String(s)) => {
                    let v: f64 = s.trim().parse().map_err(|_| Error::Vocabulary {
                        feature: name.clone(),
                        value: s.clone(),
                    })?;
                    set.set_diameter(feature, v)?;
                }
                (FeatureKind::MarginSet, Value::String(s)) => set.set_margins(s.split(',').filter(|m| !is_na(m)))?,
                (FeatureKind::MarginSet, Value::Array(items)) => {
                    let mut ms = Vec::new();
                    for it in items {
                        match it {
                            Value::String(s) if is_na(s) => {}
                            Value::String(s) => ms.push(s.as_str()),
                            other => {
                                return Err(Error::Vocabulary {
                                    feature: name.clone(),
                                    value: other.to_string(),
                                })
                            }
                        }
                    }
                    set.set_margins(ms)?;
                }
                (FeatureKind::Categorical(_), Value::String(s)) => set.set_class(feature, s)?,
                (_, other) => {
                    return Err(Error::Vocabulary {
                        feature: name.clone(),
                        value: other.to_string(),
                    })
                }
            }
        }
        Ok(set)
    }

    pub fn to_named(&self) -> BTreeMap<String, serde_json::Value> {
        use serde_json::Value;
        self.values
            .iter()
            .map(|(f, v)| {
                let json = match v {
                    FeatureValue::Diameter(d) => serde_json::json!(d),
                    FeatureValue::Margins(m) => Value::Array(m.iter().map(|s| Value::String((*s).into())).collect()),
                    FeatureValue::Class(c) => Value::String((*c).into()),
                };
                (f.table_name().to_string(), json)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AnnotationEntry {
    patient_id: String,
    nodule_id: String,
    features: BTreeMap<String, serde_json::Value>,
}

/// Semantic annotations keyed by `(patient_id, nodule_id)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnnotationFile {
    pub entries: BTreeMap<(String, String), SemanticFeatureSet>,
}

impl AnnotationFile {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: Vec<AnnotationEntry> = serde_json::from_str(text)?;
        let mut entries = BTreeMap::new();
        for e in raw {
            let set = SemanticFeatureSet::from_named(&e.features)?;
            let key = (e.patient_id, e.nodule_id);
            if entries.insert(key.clone(), set).is_some() {
                return Err(Error::format(format!("duplicate annotation for ({}, {})", key.0, key.1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        let raw: Vec<AnnotationEntry> = self
            .entries
            .iter()
            .map(|((p, n), s)| AnnotationEntry {
                patient_id: p.clone(),
                nodule_id: n.clone(),
                features: s.to_named(),
            })
            .collect();
        Ok(serde_json::to_string_pretty(&raw)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn get(&self, patient_id: &str, nodule_id: &str) -> Option<&SemanticFeatureSet> {
        self.entries.get(&(patient_id.to_string(), nodule_id.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_enforced() {
        let mut s = SemanticFeatureSet::new();
        s.set_class(Feature::Consistency, "part-solid").unwrap();
        assert_eq!(s.class(Feature::Consistency), Some("Part-solid"));
        assert!(matches!(s.set_class(Feature::Shape, "Complex"), Err(Error::Vocabulary { .. })));
        assert!(s.set_diameter(Feature::ShortDiameter, -1.0).is_err());
        assert!(s.set_class(Feature::Necrosis, "Maybe").is_err());
        assert!(Feature::from_table_name("Axial Location").is_err());
    }

    #[test]
    fn margins_are_an_ordered_set() {
        let mut s = SemanticFeatureSet::new();
        s.set_margins(["Spiculated", "ill-defined", "Spiculated"]).unwrap();
        assert_eq!(s.margins(), vec!["Spiculated", "Ill-defined"]);
        s.add_margin("Smooth").unwrap();
        assert_eq!(s.margins(), vec!["Smooth", "Spiculated", "Ill-defined"]);
        s.set_margins(std::iter::empty()).unwrap();
        assert!(s.is_missing(Feature::Margin));
    }

    #[test]
    fn annotation_file_round_trip() {
        let text = r#"[
          {"patient_id": "p1", "nodule_id": "n1", "features": {
             "Longest Axial Diameter": 17.0, "Short Diameter": "5.1",
             "Nodule Margin": ["Ill-defined", "Spiculated"], "Nodule Consistency": "Part-solid",
             "Airway Cutoff": "N/A", "Necrosis": null, "Level of Suspicion of Lung Cancer": "Moderately High"}},
          {"patient_id": "p2", "nodule_id": "n1", "features": {"Nodule Margin": "Smooth, Lobulated"}}
        ]"#;
        let f = AnnotationFile::parse(text).unwrap();
        let s = f.get("p1", "n1").unwrap();
        assert_eq!(s.diameter(Feature::ShortDiameter), Some(5.1));
        assert!(s.is_missing(Feature::AirwayCutoff));
        assert!(s.is_missing(Feature::Necrosis));
        assert_eq!(f.get("p2", "n1").unwrap().margins(), vec!["Smooth", "Lobulated"]);
        assert_eq!(AnnotationFile::parse(&f.to_json().unwrap()).unwrap(), f);
        let bad = r#"[{"patient_id":"p","nodule_id":"n","features":{"Axial Location":"Central"}}]"#;
        assert!(matches!(AnnotationFile::parse(bad), Err(Error::UnknownFeature(_))));
    }
}
