//! Cohort manifests and patient-level splitting.
//!
//! Manifests are UTF-8 CSV files with the header
//! `patient_id,nodule_id,volume_uri,cx_mm,cy_mm,cz_mm,label,semantics_uri`.
//! Splits shuffle the sorted patient ids with a seeded ChaCha8 generator
//! (Fisher–Yates) and never separate the nodules of one patient.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MANIFEST_HEADER: [&str; 8] = [
    "patient_id",
    "nodule_id",
    "volume_uri",
    "cx_mm",
    "cy_mm",
    "cz_mm",
    "label",
    "semantics_uri",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoduleRecord {
    pub patient_id: String,
    pub nodule_id: String,
    pub volume_uri: String,
    pub centroid_mm: [f64; 3],
    pub label_one_year: u8,
    pub semantics_uri: Option<String>,
}

impl NoduleRecord {
    pub fn key(&self) -> (&str, &str) {
        (&self.patient_id, &self.nodule_id)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.patient_id.is_empty() || self.nodule_id.is_empty() {
            return Err("patient_id and nodule_id must be nonempty".into());
        }
        if self.centroid_mm.iter().any(|c| !c.is_finite()) {
            return Err("non-finite centroid".into());
        }
        if self.label_one_year > 1 {
            return Err("label outside {0,1}".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub name: String,
    pub records: Vec<NoduleRecord>,
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    patient_id: String,
    nodule_id: String,
    volume_uri: String,
    cx_mm: String,
    cy_mm: String,
    cz_mm: String,
    label: String,
    #[serde(default)]
    semantics_uri: Option<String>,
}

fn parse_coord(raw: &str, row: usize, name: &str) -> Result<f64> {
    let v: f64 = raw.trim().parse().map_err(|_| Error::ManifestRow {
        row,
        message: format!("{name} is not a number: `{raw}`"),
    })?;
    if !v.is_finite() {
        return Err(Error::ManifestRow {
            row,
            message: "non-finite centroid".into(),
        });
    }
    Ok(v)
}

impl CohortManifest {
    /// Validates every record and the uniqueness of `(patient_id, nodule_id)`.
    pub fn new(name: impl Into<String>, records: Vec<NoduleRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::invalid("manifest must contain at least one record"));
        }
        let mut seen: HashMap<(String, String), usize> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            let row = i + 1;
            r.validate().map_err(|message| Error::ManifestRow { row, message })?;
            let key = (r.patient_id.clone(), r.nodule_id.clone());
            if let Some(first) = seen.insert(key, row) {
                return Err(Error::ManifestRow {
                    row,
                    message: format!(
                        "duplicate nodule key ({}, {}), first seen at row {first}",
                        r.patient_id, r.nodule_id
                    ),
                });
            }
        }
        Ok(Self {
            name: name.into(),
            records,
        })
    }

    /// Sorted, deduplicated patient ids.
    pub fn patients(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.patient_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    /// Patient label = max over that patient's nodule labels.
    pub fn patient_labels(&self) -> BTreeMap<String, u8> {
        let mut out: BTreeMap<String, u8> = BTreeMap::new();
        for r in &self.records {
            let e = out.entry(r.patient_id.clone()).or_insert(0);
            *e = (*e).max(r.label_one_year);
        }
        out
    }

    /// Records of the given patients, in original order.
    pub fn subset(&self, name: impl Into<String>, patients: &BTreeSet<String>) -> Result<Self> {
        let records = self
            .records
            .iter()
            .filter(|r| patients.contains(&r.patient_id))
            .cloned()
            .collect();
        Self::new(name, records)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(MANIFEST_HEADER)?;
        for r in &self.records {
            w.write_record([
                r.patient_id.clone(),
                r.nodule_id.clone(),
                r.volume_uri.clone(),
                r.centroid_mm[0].to_string(),
                r.centroid_mm[1].to_string(),
                r.centroid_mm[2].to_string(),
                r.label_one_year.to_string(),
                r.semantics_uri.clone().unwrap_or_default(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string()?).map_err(|e| Error::io(path, e))
    }
}

/// Absolute URIs are kept; relative ones resolve against `root`.
pub fn resolve_uri(root: &Path, uri: &str) -> PathBuf {
    let p = Path::new(uri);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Reads and validates a manifest. Row numbers in errors count data rows from 1.
pub fn load_manifest(path: &Path) -> Result<CohortManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let expected: Vec<&str> = MANIFEST_HEADER.to_vec();
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(Error::format(format!(
            "manifest header must be `{}`, found `{}`",
            expected.join(","),
            got.join(",")
        )));
    }
    let mut records = Vec::new();
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| Error::ManifestRow {
            row: row_no,
            message: e.to_string(),
        })?;
        let label = match row.label.trim() {
            "0" => 0,
            "1" => 1,
            _ => {
                return Err(Error::ManifestRow {
                    row: row_no,
                    message: format!("label outside {{0,1}}: `{}`", row.label),
                })
            }
        };
        records.push(NoduleRecord {
            patient_id: row.patient_id,
            nodule_id: row.nodule_id,
            volume_uri: row.volume_uri,
            centroid_mm: [
                parse_coord(&row.cx_mm, row_no, "cx_mm")?,
                parse_coord(&row.cy_mm, row_no, "cy_mm")?,
                parse_coord(&row.cz_mm, row_no, "cz_mm")?,
            ],
            label_one_year: label,
            semantics_uri: row.semantics_uri.filter(|s| !s.is_empty()),
        });
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".into());
    CohortManifest::new(name, records)
}

fn shuffled(mut items: Vec<String>, rng: &mut ChaCha8Rng) -> Vec<String> {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
    items
}

/// Splits off `round(fraction × patients)` patients as a test set.
pub fn hold_out_test(manifest: &CohortManifest, fraction: f64, seed: u64) -> Result<(CohortManifest, CohortManifest)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("hold-out fraction {fraction} outside (0, 1)")));
    }
    let patients = manifest.patients();
    if patients.len() < 2 {
        return Err(Error::invalid("hold-out split needs at least 2 patients"));
    }
    let n_test = ((fraction * patients.len() as f64).round() as usize).clamp(1, patients.len() - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = shuffled(patients, &mut rng);
    let test: BTreeSet<String> = order[..n_test].iter().cloned().collect();
    let train: BTreeSet<String> = order[n_test..].iter().cloned().collect();
    Ok((
        manifest.subset(format!("{}-train", manifest.name), &train)?,
        manifest.subset(format!("{}-test", manifest.name), &test)?,
    ))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_patients: BTreeSet<String>,
    pub val_patients: BTreeSet<String>,
}

/// Partitions patients into `k` validation sets whose sizes differ by at most
/// one. With `stratified`, patients are dealt round-robin from each label
/// group in turn (positives first) so folds also balance the outcome; the
/// default is unstratified.
pub fn make_patient_folds_with(manifest: &CohortManifest, k: usize, seed: u64, stratified: bool) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::invalid(format!("k-fold needs k >= 2, got {k}")));
    }
    let patients = manifest.patients();
    if patients.len() < k {
        return Err(Error::invalid(format!("{} patients cannot fill {k} folds", patients.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = if stratified {
        let labels = manifest.patient_labels();
        let pos: Vec<String> = patients.iter().filter(|p| labels[*p] == 1).cloned().collect();
        let neg: Vec<String> = patients.iter().filter(|p| labels[*p] == 0).cloned().collect();
        let mut all = shuffled(pos, &mut rng);
        all.extend(shuffled(neg, &mut rng));
        all
    } else {
        shuffled(patients.clone(), &mut rng)
    };
    let mut val: Vec<BTreeSet<String>> = vec![BTreeSet::new(); k];
    for (i, p) in order.into_iter().enumerate() {
        val[i % k].insert(p);
    }
    Ok(val
        .into_iter()
        .enumerate()
        .map(|(fold_index, val_patients)| FoldSplit {
            fold_index,
            train_patients: patients.iter().filter(|p| !val_patients.contains(*p)).cloned().collect(),
            val_patients,
        })
        .collect())
}

pub fn make_patient_folds(manifest: &CohortManifest, k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    make_patient_folds_with(manifest, k, seed, false)
}

/// On-disk form of a split: fold index → validation patient ids, plus the
/// optional held-out test patients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub seed: u64,
    pub test_patients: Vec<String>,
    pub folds: BTreeMap<usize, Vec<String>>,
}

impl SplitFile {
    pub fn new(seed: u64, test: &CohortManifest, folds: &[FoldSplit]) -> Self {
        Self {
            seed,
            test_patients: test.patients(),
            folds: folds
                .iter()
                .map(|f| (f.fold_index, f.val_patients.iter().cloned().collect()))
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
