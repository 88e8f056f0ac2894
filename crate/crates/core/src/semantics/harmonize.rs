use std::collections::BTreeMap;

use super::{Feature, SemanticFeatureSet};
use crate::{Error, Result};

/// A reader's entry for one LIDC characteristic.
#[derive(Clone, Debug, PartialEq)]
pub enum LidcValue {
    Score(f64),
    Category(String),
}

const INTERNAL_STRUCTURE: [&str; 4] = ["Soft Tissue", "Fluid", "Fat", "Air"];
const CALCIFICATION: [&str; 6] = ["Popcorn", "Laminated", "Solid", "Non-central", "Central", "Absent"];
const SCORED: [&str; 7] = ["subtlety", "sphericity", "margin", "lobulation", "spiculation", "texture", "malignancy"];

#[derive(Clone, Debug, PartialEq)]
pub enum Predicate {
    Greater(f64),
    AtLeast(f64),
    Less(f64),
    AtMost(f64),
    Between(f64, f64),
    Category(&'static str),
    OtherThan(&'static str),
}

impl Predicate {
    fn holds(&self, v: &LidcValue) -> bool {
        match (self, v) {
            (Predicate::Greater(t), LidcValue::Score(s)) => s > t,
            (Predicate::AtLeast(t), LidcValue::Score(s)) => s >= t,
            (Predicate::Less(t), LidcValue::Score(s)) => s < t,
            (Predicate::AtMost(t), LidcValue::Score(s)) => s <= t,
            (Predicate::Between(lo, hi), LidcValue::Score(s)) => s >= lo && s <= hi,
            (Predicate::Category(c), LidcValue::Category(x)) => x == c,
            (Predicate::OtherThan(c), LidcValue::Category(x)) => x != c,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HarmonizationRule {
    pub source_feature: &'static str,
    pub predicate: Predicate,
    pub target_feature: Feature,
    pub target_value: &'static str,
}

fn rule(source: &'static str, predicate: Predicate, target: Feature, value: &'static str) -> HarmonizationRule {
    HarmonizationRule {
        source_feature: source,
        predicate,
        target_feature: target,
        target_value: value,
    }
}

/// LIDC → NLST mapping. Margin targets add to the margin set; every other
/// target overwrites its slot.
pub fn harmonization_rules() -> Vec<HarmonizationRule> {
    use Feature::*;
    use Predicate::*;
    vec![
        rule("internalstructure", Category("Air"), CystLikeSpaces, "Present"),
        rule("internalstructure", OtherThan("Air"), CystLikeSpaces, "Absent"),
        rule("calcification", Category("Non-central"), EccentricCalcification, "Present"),
        rule("calcification", OtherThan("Non-central"), EccentricCalcification, "Absent"),
        rule("sphericity", Greater(3.0), Shape, "Round"),
        rule("sphericity", AtMost(3.0), Shape, "Ovoid"),
        rule("margin", AtLeast(3.0), MarginConspicuity, "Well marginated"),
        rule("margin", Less(3.0), MarginConspicuity, "Poorly marginated"),
        rule("lobulation", AtLeast(3.0), Margin, "Lobulated"),
        rule("spiculation", AtLeast(3.0), Margin, "Spiculated"),
        rule("texture", Greater(4.0), Consistency, "Solid"),
        rule("texture", Between(2.0, 4.0), Consistency, "Part-solid"),
        rule("texture", Less(2.0), Consistency, "Pure ground glass"),
    ]
}

fn normalize_key(s: &str) -> String {
    s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase()
}

fn category_from(name: &str, classes: &[&'static str], v: &LidcValue) -> Result<LidcValue> {
    let out_of_range = || Error::invalid(format!("LIDC {name} value {v:?} out of range"));
    let canonical = match v {
        LidcValue::Score(s) => {
            if s.fract() != 0.0 || *s < 1.0 || *s > classes.len() as f64 {
                return Err(out_of_range());
            }
            classes[*s as usize - 1]
        }
        LidcValue::Category(c) => {
            let key = normalize_key(c);
            let key = key.strip_suffix("appearance").unwrap_or(&key);
            classes
                .iter()
                .copied()
                .find(|k| normalize_key(k) == key)
                .ok_or_else(out_of_range)?
        }
    };
    Ok(LidcValue::Category(canonical.to_string()))
}

/// Validates and canonicalizes one LIDC record. Keys are matched ignoring
/// case, spaces and underscores.
fn normalize_record(record: &BTreeMap<String, LidcValue>) -> Result<BTreeMap<String, LidcValue>> {
    let mut out = BTreeMap::new();
    for (name, value) in record {
        let key = normalize_key(name);
        let v = match key.as_str() {
            "internalstructure" => category_from(name, &INTERNAL_STRUCTURE, value)?,
            "calcification" => category_from(name, &CALCIFICATION, value)?,
            k if SCORED.contains(&k) => match value {
                LidcValue::Score(s) if s.is_finite() && (1.0..=5.0).contains(s) => value.clone(),
                _ => return Err(Error::invalid(format!("LIDC {name} value {value:?} out of range 1-5"))),
            },
            _ => return Err(Error::UnknownFeature(name.clone())),
        };
        out.insert(key, v);
    }
    Ok(out)
}

/// Maps one (already aggregated) LIDC record onto the NLST feature set.
/// Features with no LIDC counterpart stay MISSING.
pub fn harmonize_lidc(record: &BTreeMap<String, LidcValue>) -> Result<SemanticFeatureSet> {
    let record = normalize_record(record)?;
    let mut set = SemanticFeatureSet::new();
    for r in harmonization_rules() {
        let Some(v) = record.get(r.source_feature) else { continue };
        if !r.predicate.holds(v) {
            continue;
        }
        if r.target_feature == Feature::Margin {
            set.add_margin(r.target_value)?;
        } else {
            set.set_class(r.target_feature, r.target_value)?;
        }
    }
    Ok(set)
}

#[derive(Clone, Debug, PartialEq)]
pub enum ReaderValue {
    Score(f64),
    Class(String),
}

/// Lower median: the element at index `(n - 1) / 2` of the sorted scores.
pub fn aggregate_numeric(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty annotation list"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN annotation score"));
    }
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v[(v.len() - 1) / 2])
}

/// Most frequent class; ties go to the lexicographically smallest.
pub fn aggregate_categorical<S: AsRef<str>>(classes: &[S]) -> Result<String> {
    if classes.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty annotation list"));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for c in classes {
        *counts.entry(c.as_ref()).or_default() += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    Ok(counts.into_iter().find(|(_, n)| *n == best).map(|(c, _)| c.to_string()).unwrap_or_default())
}

pub fn aggregate_annotations(values: &[ReaderValue]) -> Result<ReaderValue> {
    let scores: Vec<f64> = values
        .iter()
        .filter_map(|v| match v {
            ReaderValue::Score(s) => Some(*s),
            _ => None,
        })
        .collect();
    if scores.len() == values.len() {
        return aggregate_numeric(&scores).map(ReaderValue::Score);
    }
    if !scores.is_empty() {
        return Err(Error::invalid("annotation list mixes scores and classes"));
    }
    let classes: Vec<&str> = values
        .iter()
        .filter_map(|v| match v {
            ReaderValue::Class(c) => Some(c.as_str()),
            _ => None,
        })
        .collect();
    aggregate_categorical(&classes).map(ReaderValue::Class)
}

/// Combines several readers' LIDC records: median for scored
/// characteristics, mode for the categorical ones.
pub fn aggregate_lidc_readers(readers: &[BTreeMap<String, LidcValue>]) -> Result<BTreeMap<String, LidcValue>> {
    if readers.is_empty() {
        return Err(Error::invalid("no LIDC reader records"));
    }
    let mut by_key: BTreeMap<String, Vec<LidcValue>> = BTreeMap::new();
    for r in readers {
        for (k, v) in normalize_record(r)? {
            by_key.entry(k).or_default().push(v);
        }
    }
    by_key
        .into_iter()
        .map(|(k, vs)| {
            let agg = if SCORED.contains(&k.as_str()) {
                let s: Vec<f64> = vs
                    .iter()
                    .map(|v| match v {
                        LidcValue::Score(s) => *s,
                        LidcValue::Category(_) => f64::NAN,
                    })
                    .collect();
                LidcValue::Score(aggregate_numeric(&s)?)
            } else {
                let c: Vec<String> = vs
                    .into_iter()
                    .map(|v| match v {
                        LidcValue::Category(c) => c,
                        LidcValue::Score(s) => s.to_string(),
                    })
                    .collect();
                LidcValue::Category(aggregate_categorical(&c)?)
            };
            Ok((k, agg))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(items: &[(&str, LidcValue)]) -> BTreeMap<String, LidcValue> {
        items.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    fn s(x: f64) -> LidcValue {
        LidcValue::Score(x)
    }

    #[test]
    fn table_thresholds() {
        let h = harmonize_lidc(&rec(&[("sphericity", s(4.0)), ("texture", s(3.0))])).unwrap();
        assert_eq!(h.class(Feature::Shape), Some("Round"));
        assert_eq!(h.class(Feature::Consistency), Some("Part-solid"));
        let h = harmonize_lidc(&rec(&[("sphericity", s(3.0)), ("texture", s(5.0)), ("margin", s(2.0))])).unwrap();
        assert_eq!(h.class(Feature::Shape), Some("Ovoid"));
        assert_eq!(h.class(Feature::Consistency), Some("Solid"));
        assert_eq!(h.class(Feature::MarginConspicuity), Some("Poorly marginated"));
        let h = harmonize_lidc(&rec(&[("texture", s(1.0)), ("margin", s(3.0))])).unwrap();
        assert_eq!(h.class(Feature::Consistency), Some("Pure ground glass"));
        assert_eq!(h.class(Feature::MarginConspicuity), Some("Well marginated"));
    }

    #[test]
    fn margin_rules() {
        let h = harmonize_lidc(&rec(&[("lobulation", s(2.0)), ("spiculation", s(2.0))])).unwrap();
        assert!(h.is_missing(Feature::Margin));
        let h = harmonize_lidc(&rec(&[("lobulation", s(3.0)), ("spiculation", s(5.0))])).unwrap();
        assert_eq!(h.margins(), vec!["Lobulated", "Spiculated"]);
    }

    #[test]
    fn categorical_rules_and_missing_slots() {
        let h = harmonize_lidc(&rec(&[
            ("internalStructure", LidcValue::Category("Air".into())),
            ("calcification", LidcValue::Category("Non central appearance".into())),
            ("subtlety", s(5.0)),
            ("malignancy", s(5.0)),
        ]))
        .unwrap();
        assert_eq!(h.class(Feature::CystLikeSpaces), Some("Present"));
        assert_eq!(h.class(Feature::EccentricCalcification), Some("Present"));
        let h = harmonize_lidc(&rec(&[("internal_structure", s(1.0)), ("calcification", s(6.0))])).unwrap();
        assert_eq!(h.class(Feature::CystLikeSpaces), Some("Absent"));
        assert_eq!(h.class(Feature::EccentricCalcification), Some("Absent"));
        for f in [
            Feature::Necrosis,
            Feature::AirwayCutoff,
            Feature::PleuralAttachment,
            Feature::Suspicion,
            Feature::LongestAxialDiameter,
        ] {
            assert!(h.is_missing(f));
        }
    }

    #[test]
    fn harmonize_errors() {
        assert!(matches!(harmonize_lidc(&rec(&[("opacity", s(1.0))])), Err(Error::UnknownFeature(_))));
        assert!(harmonize_lidc(&rec(&[("texture", s(6.0))])).is_err());
        assert!(harmonize_lidc(&rec(&[("calcification", s(7.0))])).is_err());
        assert!(harmonize_lidc(&rec(&[("internalStructure", LidcValue::Category("Bone".into()))])).is_err());
    }

    #[test]
    fn rule_targets_are_in_vocabulary() {
        for r in harmonization_rules() {
            let mut set = SemanticFeatureSet::new();
            if r.target_feature == Feature::Margin {
                set.add_margin(r.target_value).unwrap();
            } else {
                set.set_class(r.target_feature, r.target_value).unwrap();
            }
        }
    }

    fn lower_median_oracle(v: &[f64]) -> f64 {
        let mut sorted = v.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        if n % 2 == 1 {
            sorted[n / 2]
        } else {
            sorted[n / 2 - 1]
        }
    }

    #[test]
    fn aggregation_examples() {
        assert_eq!(aggregate_numeric(&[3.0, 4.0, 5.0]).unwrap(), 4.0);
        assert_eq!(aggregate_numeric(&[4.0, 3.0]).unwrap(), 3.0);
        assert_eq!(aggregate_numeric(&[2.0, 2.0, 5.0]).unwrap(), 2.0);
        assert_eq!(aggregate_categorical(&["Solid", "Part-solid", "Solid"]).unwrap(), "Solid");
        assert_eq!(aggregate_categorical(&["Solid", "Part-solid"]).unwrap(), "Part-solid");
        assert!(aggregate_numeric(&[]).is_err());
        assert!(aggregate_annotations(&[ReaderValue::Score(1.0), ReaderValue::Class("a".into())]).is_err());
        assert_eq!(
            aggregate_annotations(&[ReaderValue::Class("b".into()), ReaderValue::Class("a".into())]).unwrap(),
            ReaderValue::Class("a".into())
        );
    }

    #[test]
    fn reader_aggregation_then_harmonization() {
        let readers = vec![
            rec(&[("spiculation", s(2.0)), ("internalStructure", LidcValue::Category("Air".into()))]),
            rec(&[("spiculation", s(4.0)), ("internalStructure", LidcValue::Category("Soft Tissue".into()))]),
            rec(&[("spiculation", s(5.0)), ("internalStructure", LidcValue::Category("Air".into()))]),
        ];
        let agg = aggregate_lidc_readers(&readers).unwrap();
        assert_eq!(agg["spiculation"], s(4.0));
        let h = harmonize_lidc(&agg).unwrap();
        assert_eq!(h.margins(), vec!["Spiculated"]);
        assert_eq!(h.class(Feature::CystLikeSpaces), Some("Present"));
    }

    proptest::proptest! {
        #[test]
        fn lower_median_matches_oracle(v in proptest::collection::vec(1u8..=5, 1..12)) {
            let f: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            proptest::prop_assert_eq!(aggregate_numeric(&f).unwrap(), lower_median_oracle(&f));
        }

        #[test]
        fn harmonization_is_total(sph in 1u8..=5, mar in 1u8..=5, lob in 1u8..=5, spi in 1u8..=5, tex in 1u8..=5,
                                  internal in 1u8..=4, calc in 1u8..=6) {
            let r = rec(&[
                ("sphericity", s(sph as f64)), ("margin", s(mar as f64)), ("lobulation", s(lob as f64)),
                ("spiculation", s(spi as f64)), ("texture", s(tex as f64)),
                ("internalStructure", s(internal as f64)), ("calcification", s(calc as f64)),
            ]);
            let h = harmonize_lidc(&r).unwrap();
            for f in [Feature::Shape, Feature::MarginConspicuity, Feature::Consistency,
                      Feature::CystLikeSpaces, Feature::EccentricCalcification] {
                proptest::prop_assert!(!h.is_missing(f));
            }
            for f in [Feature::Reticulation, Feature::Necrosis, Feature::Cavitation, Feature::AirwayCutoff,
                      Feature::VascularConvergence, Feature::SeptalStretching, Feature::Suspicion] {
                proptest::prop_assert!(h.is_missing(f));
            }
        }
    }
}
