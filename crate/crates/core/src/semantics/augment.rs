use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    NoduleReport, BINARY_CLASSES, CONSISTENCY_CLASSES, CONSPICUITY_CLASSES, MARGIN_CLASSES, SHAPE_CLASSES,
    SUSPICION_CLASSES,
};
use crate::{Error, Result};

const BUNDLED_SYNONYMS: &str = include_str!("../../assets/synonyms.toml");

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynonymFile {
    version: u32,
    #[serde(default)]
    protected: Vec<String>,
    synonyms: BTreeMap<String, Vec<String>>,
}

#[derive(Clone, Debug)]
pub struct SynonymTable {
    pub version: u32,
    protected: BTreeSet<String>,
    synonyms: BTreeMap<String, Vec<String>>,
}

fn class_words() -> impl Iterator<Item = String> {
    [
        &MARGIN_CLASSES[..],
        &CONSISTENCY_CLASSES,
        &SHAPE_CLASSES,
        &CONSPICUITY_CLASSES,
        &BINARY_CLASSES,
        &SUSPICION_CLASSES,
    ]
    .into_iter()
    .flatten()
    .flat_map(|c| c.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>())
}

impl SynonymTable {
    /// Parses a table. Every vocabulary class word is protected; a table
    /// that would substitute or introduce a protected word is rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let file: SynonymFile = toml::from_str(text).map_err(|e| Error::format(format!("synonym table: {e}")))?;
        let protected: BTreeSet<String> = file
            .protected
            .iter()
            .map(|w| w.to_lowercase())
            .chain(class_words())
            .collect();
        let mut synonyms = BTreeMap::new();
        for (word, alts) in file.synonyms {
            let key = word.to_lowercase();
            if protected.contains(&key) {
                return Err(Error::format(format!("synonym table substitutes protected term `{key}`")));
            }
            for alt in &alts {
                if alt.split_whitespace().any(|w| protected.contains(&w.to_lowercase())) {
                    return Err(Error::format(format!("synonym `{alt}` introduces a protected term")));
                }
            }
            let alts: Vec<String> = alts.into_iter().filter(|a| a.to_lowercase() != key).collect();
            if !alts.is_empty() {
                synonyms.insert(key, alts);
            }
        }
        Ok(Self {
            version: file.version,
            protected,
            synonyms,
        })
    }

    pub fn bundled() -> &'static SynonymTable {
        static TABLE: OnceLock<SynonymTable> = OnceLock::new();
        TABLE.get_or_init(|| SynonymTable::parse(BUNDLED_SYNONYMS).expect("bundled synonym table is valid"))
    }

    pub fn is_protected(&self, word: &str) -> bool {
        self.protected.contains(&word.to_lowercase())
    }

    fn alternatives(&self, word: &str) -> Option<&[String]> {
        if self.is_protected(word) {
            return None;
        }
        self.synonyms.get(&word.to_lowercase()).map(Vec::as_slice)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextAugmentConfig {
    /// Per-token probability of substituting an eligible word.
    pub synonym_prob: f64,
    /// Probability of cropping the text to a contiguous span.
    pub crop_prob: f64,
    /// Lower bound on the kept fraction of tokens when cropping.
    pub min_keep_fraction: f64,
}

impl Default for TextAugmentConfig {
    fn default() -> Self {
        Self {
            synonym_prob: 0.3,
            crop_prob: 0.5,
            min_keep_fraction: 0.6,
        }
    }
}

impl TextAugmentConfig {
    pub fn disabled() -> Self {
        Self {
            synonym_prob: 0.0,
            crop_prob: 0.0,
            min_keep_fraction: 1.0,
        }
    }
}

/// Splits a whitespace token into leading punctuation, core word and trailing
/// punctuation.
fn split_word(token: &str) -> (&str, &str, &str) {
    let start = token.find(|c: char| c.is_alphanumeric()).unwrap_or(token.len());
    let end = token.rfind(|c: char| c.is_alphanumeric()).map(|i| i + 1).unwrap_or(start).max(start);
    (&token[..start], &token[start..end], &token[end..])
}

fn match_case(original: &str, replacement: &str) -> String {
    if original.chars().next().is_some_and(char::is_uppercase) {
        let mut c = replacement.chars();
        c.next().map(|f| f.to_uppercase().collect::<String>() + c.as_str()).unwrap_or_default()
    } else {
        replacement.to_string()
    }
}

/// Synonym substitution followed by an optional contiguous crop that keeps at
/// least `ceil(min_keep_fraction × n)` whitespace tokens. Returns `text`
/// unchanged when nothing was altered.
pub fn augment_text<R: Rng + ?Sized>(
    text: &str,
    table: &SynonymTable,
    config: &TextAugmentConfig,
    rng: &mut R,
) -> String {
    let mut tokens: Vec<String> = text.split_whitespace().map(String::from).collect();
    let mut changed = false;
    if config.synonym_prob > 0.0 {
        for tok in tokens.iter_mut() {
            let (lead, core, trail) = split_word(tok);
            let Some(alts) = table.alternatives(core) else { continue };
            if rng.random_bool(config.synonym_prob.min(1.0)) {
                let pick = &alts[rng.random_range(0..alts.len())];
                *tok = format!("{lead}{}{trail}", match_case(core, pick));
                changed = true;
            }
        }
        if changed {
            tokens = tokens.join(" ").split_whitespace().map(String::from).collect();
        }
    }
    let n = tokens.len();
    if config.crop_prob > 0.0 && n > 1 && rng.random_bool(config.crop_prob.min(1.0)) {
        let min_keep = ((config.min_keep_fraction.clamp(0.0, 1.0) * n as f64).ceil() as usize).clamp(1, n);
        let keep = rng.random_range(min_keep..=n);
        let start = rng.random_range(0..=n - keep);
        if keep < n {
            tokens = tokens[start..start + keep].to_vec();
            changed = true;
        }
    }
    if changed {
        tokens.join(" ")
    } else {
        text.to_string()
    }
}

/// Fair coin between the impression and the joined findings.
pub fn select_training_text<R: Rng + ?Sized>(report: &NoduleReport, rng: &mut R) -> String {
    if rng.random_bool(0.5) {
        report.impression.clone()
    } else {
        report.joined_findings()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TEXT: &str = "A 17.0 × 5.1 mm, irregular, part-solid nodule is identified. The nodule demonstrates \
                        spiculated margins and is associated with pleural attachment and septal stretching.";

    #[test]
    fn bundled_table_loads() {
        let t = SynonymTable::bundled();
        assert!(t.version >= 1);
        for w in ["spiculated", "part-solid", "solid", "ground", "present", "absent", "nodule"] {
            assert!(t.is_protected(w), "{w}");
        }
    }

    #[test]
    fn rejects_protected_substitutions() {
        assert!(SynonymTable::parse("version = 1\n[synonyms]\nspiculated = [\"spiky\"]\n").is_err());
        assert!(SynonymTable::parse("version = 1\n[synonyms]\nseen = [\"solid\"]\n").is_err());
    }

    #[test]
    fn disabled_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment_text(TEXT, SynonymTable::bundled(), &TextAugmentConfig::disabled(), &mut rng);
        assert_eq!(out, TEXT);
    }

    #[test]
    fn crop_bounds() {
        let cfg = TextAugmentConfig {
            synonym_prob: 0.0,
            crop_prob: 1.0,
            min_keep_fraction: 0.6,
        };
        let n = TEXT.split_whitespace().count();
        let lo = (0.6 * n as f64).ceil() as usize;
        for seed in 0..200 {
            let out = augment_text(TEXT, SynonymTable::bundled(), &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            let m = out.split_whitespace().count();
            assert!(m >= lo && m <= n, "{m} outside [{lo}, {n}]");
            assert!(TEXT.split_whitespace().collect::<Vec<_>>().join(" ").contains(&out));
        }
    }

    #[test]
    fn deterministic_and_protected() {
        let cfg = TextAugmentConfig {
            synonym_prob: 1.0,
            crop_prob: 0.0,
            min_keep_fraction: 0.6,
        };
        let table = SynonymTable::bundled();
        let a = augment_text(TEXT, table, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let b = augment_text(TEXT, table, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert_ne!(a, TEXT);
        for w in ["spiculated", "part-solid", "irregular,", "nodule", "margins"] {
            assert!(a.contains(w), "{w} lost from {a}");
        }
        assert!(!a.contains("identified"));
    }

    #[test]
    fn selection_frequency() {
        let report = NoduleReport {
            findings: vec!["- Nodule consistency: Solid".into()],
            impression: "A solid nodule is identified.".into(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let hits = (0..10_000)
            .filter(|_| select_training_text(&report, &mut rng) == report.impression)
            .count();
        let freq = hits as f64 / 10_000.0;
        assert!((freq - 0.5).abs() <= 0.02, "{freq}");
    }

    proptest::proptest! {
        #[test]
        fn protected_tokens_survive(seed in 0u64..10_000) {
            let table = SynonymTable::bundled();
            let cfg = TextAugmentConfig { synonym_prob: 0.9, crop_prob: 0.0, min_keep_fraction: 0.6 };
            let out = augment_text(TEXT, table, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            let count = |s: &str, w: &str| s.split_whitespace().filter(|t| split_word(t).1.eq_ignore_ascii_case(w)).count();
            for t in TEXT.split_whitespace() {
                let core = split_word(t).1;
                if table.is_protected(core) {
                    proptest::prop_assert_eq!(count(&out, core), count(TEXT, core));
                }
            }
        }
    }
}
