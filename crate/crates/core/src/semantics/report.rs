use rand::seq::SliceRandom;
use rand::RngCore;

use super::{Feature, FeatureValue, SemanticFeatureSet};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NoduleReport {
    pub findings: Vec<String>,
    pub impression: String,
}

impl NoduleReport {
    pub fn joined_findings(&self) -> String {
        self.findings.join("\n")
    }

    pub fn to_text(&self) -> String {
        format!("Findings:\n{}\n\nImpression:\n{}\n", self.joined_findings(), self.impression)
    }
}

/// Anything that turns a feature set into a report. The template engine is
/// the only built-in implementation; a language-model backend can be plugged
/// in behind the same interface.
pub trait ReportGenerator {
    fn generate(&self, features: &SemanticFeatureSet, rng: &mut dyn RngCore) -> Result<NoduleReport>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TemplateReportGenerator;

impl ReportGenerator for TemplateReportGenerator {
    fn generate(&self, features: &SemanticFeatureSet, rng: &mut dyn RngCore) -> Result<NoduleReport> {
        render_report(features, rng)
    }
}

fn positive_phrase(f: Feature) -> &'static str {
    match f {
        Feature::Reticulation => "reticulation",
        Feature::CystLikeSpaces => "cyst-like spaces",
        Feature::Necrosis => "necrosis",
        Feature::EccentricCalcification => "eccentric calcification",
        Feature::Cavitation => "cavitation",
        Feature::IntranodularBronchiectasis => "intra-nodular bronchiectasis",
        Feature::AirwayCutoff => "airway cutoff",
        Feature::VascularConvergence => "vascular convergence",
        Feature::PleuralRetraction => "pleural retraction",
        Feature::PleuralAttachment => "pleural attachment",
        Feature::ParacicatricialEmphysema => "paracicatricial emphysema",
        Feature::SeptalStretching => "septal stretching",
        _ => "",
    }
}

/// `a`, `a and b`, `a, b, and c`.
fn oxford_join(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [a] => a.clone(),
        [a, b] => format!("{a} and {b}"),
        [init @ .., last] => format!("{}, and {last}", init.join(", ")),
    }
}

fn article(next: &str) -> &'static str {
    let lower = next.to_ascii_lowercase();
    let int_part: String = lower.chars().take_while(|c| c.is_ascii_digit()).collect();
    let vowel_sound = if !int_part.is_empty() {
        int_part.starts_with('8') || int_part == "11" || int_part == "18"
    } else {
        lower.starts_with(['a', 'e', 'i', 'o', 'u'])
    };
    if vowel_sound {
        "An"
    } else {
        "A"
    }
}

fn size_phrase(set: &SemanticFeatureSet) -> Option<String> {
    match (
        set.diameter(Feature::LongestAxialDiameter),
        set.diameter(Feature::ShortDiameter),
    ) {
        (Some(l), Some(s)) => Some(format!("{l:.1} × {s:.1} mm")),
        (Some(l), None) => Some(format!("{l:.1} mm")),
        (None, Some(s)) => Some(format!("{s:.1} mm short-axis")),
        (None, None) => None,
    }
}

/// Margin descriptors in the impression run from least to most suspicious.
const IMPRESSION_MARGIN_ORDER: [&str; 5] = ["Smooth", "Notched", "Ill-defined", "Lobulated", "Spiculated"];

fn impression(set: &SemanticFeatureSet) -> String {
    let mut sentences = Vec::new();

    let mut descriptors: Vec<String> = Vec::new();
    if let Some(size) = size_phrase(set) {
        descriptors.push(size);
    }
    for f in [Feature::Shape, Feature::Consistency] {
        if let Some(c) = set.class(f) {
            descriptors.push(c.to_lowercase());
        }
    }
    sentences.push(if descriptors.is_empty() {
        "A nodule is identified.".to_string()
    } else {
        let d = descriptors.join(", ");
        format!("{} {d} nodule is identified.", article(&d))
    });

    let mut clauses = Vec::new();
    let margins = set.margins();
    if !margins.is_empty() {
        let m: Vec<String> = IMPRESSION_MARGIN_ORDER
            .iter()
            .filter(|c| margins.contains(c))
            .map(|m| m.to_lowercase())
            .collect();
        clauses.push(format!("demonstrates {} margins", m.join(", ")));
    }
    if let Some(c) = set.class(Feature::MarginConspicuity) {
        clauses.push(format!("is {}", c.to_lowercase()));
    }
    let positives: Vec<String> = Feature::ALL
        .into_iter()
        .filter(|f| f.is_binary() && set.class(*f) == Some("Present"))
        .map(|f| positive_phrase(f).to_string())
        .collect();
    if !positives.is_empty() {
        clauses.push(format!("is associated with {}", oxford_join(&positives)));
    }
    if !clauses.is_empty() {
        sentences.push(format!("The nodule {}.", oxford_join(&clauses)));
    }

    if let Some(s) = set.class(Feature::Suspicion) {
        sentences.push(format!("The level of suspicion for lung cancer is {}.", s.to_lowercase()));
    }
    sentences.join(" ")
}

/// Findings list every present feature once, in random order; the impression
/// summarizes size, consistency and positive findings without mentioning
/// absences.
pub fn render_report(features: &SemanticFeatureSet, rng: &mut dyn RngCore) -> Result<NoduleReport> {
    if features.is_empty() {
        return Err(Error::invalid("cannot render a report when every feature is missing"));
    }
    let mut findings: Vec<String> = features
        .present()
        .map(|(f, v)| {
            let shown = match v {
                FeatureValue::Class(c) => (*c).to_string(),
                other => other.display(),
            };
            format!("- {}: {shown}", f.report_label())
        })
        .collect();
    findings.shuffle(rng);
    Ok(NoduleReport {
        findings,
        impression: impression(features),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// The worked example dictionary, restricted to the annotated vocabulary.
    fn example() -> SemanticFeatureSet {
        let mut s = SemanticFeatureSet::new();
        s.set_diameter(Feature::LongestAxialDiameter, 17.0).unwrap();
        s.set_diameter(Feature::ShortDiameter, 5.1).unwrap();
        s.set_margins(["Ill-defined", "Spiculated"]).unwrap();
        s.set_class(Feature::Shape, "Irregular").unwrap();
        s.set_class(Feature::Consistency, "Part-solid").unwrap();
        s.set_class(Feature::MarginConspicuity, "Poorly marginated").unwrap();
        s.set_class(Feature::Reticulation, "Present").unwrap();
        for f in [
            Feature::CystLikeSpaces,
            Feature::IntranodularBronchiectasis,
            Feature::Necrosis,
            Feature::Cavitation,
            Feature::EccentricCalcification,
            Feature::AirwayCutoff,
            Feature::ParacicatricialEmphysema,
        ] {
            s.set_class(f, "Absent").unwrap();
        }
        for f in [
            Feature::PleuralAttachment,
            Feature::PleuralRetraction,
            Feature::VascularConvergence,
            Feature::SeptalStretching,
        ] {
            s.set_class(f, "Present").unwrap();
        }
        s.set_class(Feature::Suspicion, "Moderately High").unwrap();
        s
    }

    #[test]
    fn worked_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = render_report(&example(), &mut rng).unwrap();
        assert!(r.findings.contains(&"- Nodule consistency: Part-solid".to_string()));
        assert!(r.findings.contains(&"- Longest axial diameter (mm): 17.0".to_string()));
        assert!(r.findings.contains(&"- Nodule margins: Spiculated, Ill-defined".to_string()));
        assert_eq!(r.findings.len(), 19);
        assert!(r.impression.contains("ill-defined, spiculated margins"), "{}", r.impression);
        assert!(r.impression.starts_with("A 17.0 × 5.1 mm, irregular, part-solid nodule is identified."));
        assert!(r.impression.contains("reticulation, vascular convergence, pleural retraction, pleural attachment, and septal stretching"));
        assert!(r.impression.ends_with("The level of suspicion for lung cancer is moderately high."));
        for absent in ["necrosis", "cavitation", "absent", "airway cutoff", "no "] {
            assert!(!r.impression.to_lowercase().contains(absent), "{absent} in {}", r.impression);
        }
    }

    #[test]
    fn single_feature() {
        let mut s = SemanticFeatureSet::new();
        s.set_class(Feature::Consistency, "Solid").unwrap();
        let r = render_report(&s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(r.findings, vec!["- Nodule consistency: Solid"]);
        assert_eq!(r.impression, "A solid nodule is identified.");
    }

    #[test]
    fn missing_features_are_omitted() {
        let mut s = example();
        s.clear(Feature::AirwayCutoff);
        let r = render_report(&s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(!r.to_text().to_lowercase().contains("airway cutoff"));
        assert!(render_report(&SemanticFeatureSet::new(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn order_is_shuffled_and_seeded() {
        let a = render_report(&example(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = render_report(&example(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let c = render_report(&example(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.findings, c.findings);
        let mut sa = a.findings.clone();
        let mut sc = c.findings.clone();
        sa.sort();
        sc.sort();
        assert_eq!(sa, sc);
    }

    #[test]
    fn articles() {
        assert_eq!(article("8.0 mm"), "An");
        assert_eq!(article("18.2 mm"), "An");
        assert_eq!(article("12.0 mm"), "A");
        assert_eq!(article("ovoid"), "An");
        assert_eq!(article("solid"), "A");
    }

    proptest::proptest! {
        #[test]
        fn report_soundness(mask in proptest::collection::vec(proptest::bool::ANY, 19), seed in 0u64..1000) {
            let full = example();
            let mut s = SemanticFeatureSet::new();
            for (f, keep) in Feature::ALL.into_iter().zip(&mask) {
                if *keep {
                    match full.get(f).unwrap() {
                        FeatureValue::Diameter(d) => s.set_diameter(f, *d).unwrap(),
                        FeatureValue::Margins(m) => s.set_margins(m.iter().copied()).unwrap(),
                        FeatureValue::Class(c) => s.set_class(f, c).unwrap(),
                    }
                }
            }
            proptest::prop_assume!(!s.is_empty());
            let r = render_report(&s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let text = r.to_text();
            for f in Feature::ALL {
                let bullet = format!("- {}: ", f.report_label());
                let count = r.findings.iter().filter(|b| b.starts_with(&bullet)).count();
                proptest::prop_assert_eq!(count, usize::from(!s.is_missing(f)));
                if s.is_missing(f) {
                    proptest::prop_assert!(!text.contains(&bullet));
                    if f.is_binary() {
                        proptest::prop_assert!(!r.impression.contains(positive_phrase(f)));
                    }
                }
            }
            proptest::prop_assert!(!r.impression.contains("Absent") && !r.impression.contains("absent"));
        }
    }
}
