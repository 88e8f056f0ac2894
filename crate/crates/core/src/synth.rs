//! Procedural cohort generator.
//!
//! Each patient gets one chest-like CT patch holding one rendered nodule.
//! Morphology is drawn conditionally on the outcome label, so larger and
//! spiculated nodules are more often malignant, and the semantic annotation
//! is written from the same draws that shaped the voxels.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data_ingest::{CohortManifest, NoduleRecord};
use crate::nifti::write_nifti;
use crate::preprocess::Volume;
use crate::semantics::{AnnotationFile, Feature, SemanticFeatureSet};
use crate::{Error, Result};

pub const MIN_PATIENTS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub seed: u64,
    /// Probability of a malignant outcome.
    pub prevalence: f64,
    /// Voxel grid of each scan.
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// `P(spiculated | label)` for labels 0 and 1.
    pub spiculation_prob: [f64; 2],
    /// Nodule radius ranges in mm for labels 0 and 1.
    pub radius_mm: [[f64; 2]; 2],
    pub noise_hu: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 64,
            seed: 0,
            prevalence: 0.4,
            dims: [64, 64, 40],
            spacing_mm: [0.8, 0.8, 1.25],
            spiculation_prob: [0.2, 0.8],
            radius_mm: [[3.0, 5.5], [6.0, 9.0]],
            noise_hu: 25.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients < MIN_PATIENTS {
            return Err(Error::invalid(format!("need at least {MIN_PATIENTS} patients, got {}", self.n_patients)));
        }
        let probs_ok = (0.0..=1.0).contains(&self.prevalence) && self.spiculation_prob.iter().all(|p| (0.0..=1.0).contains(p));
        let radii_ok = self.radius_mm.iter().all(|[lo, hi]| *lo > 0.0 && lo <= hi);
        let extent_ok = (0..3).all(|a| self.dims[a] as f64 * self.spacing_mm[a] >= 40.0);
        if !probs_ok || !radii_ok || !extent_ok || !(self.noise_hu >= 0.0) {
            return Err(Error::invalid(format!("invalid synthetic cohort config {self:?}")));
        }
        Ok(())
    }
}

/// Ground truth behind one rendered nodule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoduleTruth {
    pub patient_id: String,
    pub nodule_id: String,
    pub label: u8,
    pub radius_mm: f64,
    pub elongation: f64,
    pub spiculated: bool,
    pub lobulated: bool,
    pub consistency: String,
}

#[derive(Clone, Debug)]
pub struct SyntheticCohort {
    pub manifest: CohortManifest,
    pub volumes: BTreeMap<(String, String), Volume>,
    pub annotations: AnnotationFile,
    pub truth: Vec<NoduleTruth>,
}

struct Spicule {
    dir: [f64; 3],
    length: f64,
    width: f64,
}

struct Shape {
    radius: f64,
    stretch_dir: [f64; 3],
    elongation: f64,
    lobe_amp: f64,
    lobe_dirs: Vec<[f64; 3]>,
    spicules: Vec<Spicule>,
}

fn unit<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return v.map(|x| x / n);
        }
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn smoothstep(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Shape {
    /// Soft occupancy in [0, 1] of the body and of the spicules at offset `d`.
    fn occupancy(&self, d: [f64; 3]) -> (f64, f64) {
        let along = dot(d, self.stretch_dir);
        // Undo the stretch along one axis to measure an ellipsoidal radius.
        let scaled: [f64; 3] = std::array::from_fn(|a| d[a] - along * self.stretch_dir[a] * self.elongation / (1.0 + self.elongation));
        let dist = dot(scaled, scaled).sqrt();
        let mut r = self.radius;
        if self.lobe_amp > 0.0 && dist > 1e-9 {
            let u = scaled.map(|x| x / dist);
            let bump: f64 = self.lobe_dirs.iter().map(|l| dot(u, *l).max(0.0).powi(4)).sum();
            r *= 1.0 + self.lobe_amp * bump;
        }
        let body = smoothstep((r - dist) / 0.4);
        let mut spike: f64 = 0.0;
        for s in &self.spicules {
            let t = dot(d, s.dir);
            if t <= 0.0 || t > self.radius + s.length {
                continue;
            }
            let perp: [f64; 3] = std::array::from_fn(|a| d[a] - t * s.dir[a]);
            let q = dot(perp, perp).sqrt();
            let taper = if t > self.radius { 1.0 - (t - self.radius) / s.length } else { 1.0 };
            let w = s.width * taper.max(0.15);
            spike = spike.max(smoothstep((w - q) / 0.25));
        }
        (body, spike)
    }
}

fn pick<'a, R: Rng + ?Sized>(rng: &mut R, options: &[(&'a str, f64)]) -> &'a str {
    let total: f64 = options.iter().map(|o| o.1).sum();
    let mut u = rng.random_range(0.0..total);
    for (name, w) in options {
        if u < *w {
            return name;
        }
        u -= w;
    }
    options.last().expect("nonempty options").0
}

/// Generates the whole cohort in memory. Identical seeds give identical
/// cohorts.
pub fn generate(config: &SynthConfig) -> Result<SyntheticCohort> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // Scan geometry is stored exactly as the f32 file header will hold it.
    let spacing = config.spacing_mm.map(|s| s as f32 as f64);
    let noise = Normal::new(0.0, config.noise_hu).map_err(|e| Error::invalid(e.to_string()))?;

    let mut records = Vec::new();
    let mut volumes = BTreeMap::new();
    let mut annotations = AnnotationFile::default();
    let mut truth = Vec::new();

    for p in 0..config.n_patients {
        let patient_id = format!("SYN{p:04}");
        let nodule_id = "N1".to_string();
        let label = u8::from(rng.random_bool(config.prevalence));
        let [lo, hi] = config.radius_mm[label as usize];
        let radius = rng.random_range(lo..=hi);
        let spiculated = rng.random_bool(config.spiculation_prob[label as usize]);
        let lobulated = !spiculated && rng.random_bool(0.2);
        let elongation = rng.random_range(0.0..0.4);
        let consistency = if label == 1 {
            pick(&mut rng, &[("Solid", 0.7), ("Part-solid", 0.2), ("Pure ground glass", 0.1)])
        } else {
            pick(&mut rng, &[("Solid", 0.6), ("Part-solid", 0.2), ("Pure ground glass", 0.2)])
        };
        let shape = Shape {
            radius,
            stretch_dir: unit(&mut rng),
            elongation,
            lobe_amp: if lobulated { 0.35 } else { 0.0 },
            lobe_dirs: (0..5).map(|_| unit(&mut rng)).collect(),
            spicules: if spiculated {
                let k = rng.random_range(8..=14);
                (0..k)
                    .map(|_| Spicule {
                        dir: unit(&mut rng),
                        length: rng.random_range(4.0..9.0),
                        width: rng.random_range(0.8..1.4),
                    })
                    .collect()
            } else {
                Vec::new()
            },
        };

        let extent: [f64; 3] = std::array::from_fn(|a| config.dims[a] as f64 * spacing[a]);
        let origin: [f64; 3] = std::array::from_fn(|_| (rng.random_range(-200.0..200.0f64) * 4.0).round() / 4.0);
        let centroid: [f64; 3] =
            std::array::from_fn(|a| ((origin[a] + extent[a] / 2.0 + rng.random_range(-3.0..3.0f64)) * 8.0).round() / 8.0);

        let vessels: Vec<([f64; 3], [f64; 3], f64)> = (0..2)
            .map(|_| {
                let off: [f64; 3] = std::array::from_fn(|_| rng.random_range(-18.0..18.0));
                (off, unit(&mut rng), rng.random_range(0.8..1.6))
            })
            .collect();

        let (solid_hu, ggo_hu) = (30.0, -520.0);
        let mut voxels = Array3::<f32>::zeros((config.dims[0], config.dims[1], config.dims[2]));
        for ((i, j, k), v) in voxels.indexed_iter_mut() {
            let pos = [
                origin[0] + i as f64 * spacing[0],
                origin[1] + j as f64 * spacing[1],
                origin[2] + k as f64 * spacing[2],
            ];
            let d: [f64; 3] = std::array::from_fn(|a| pos[a] - centroid[a]);
            let mut hu = -850.0 + noise.sample(&mut rng);
            for (off, dir, w) in &vessels {
                let rel: [f64; 3] = std::array::from_fn(|a| d[a] - off[a]);
                let t = dot(rel, *dir);
                let perp: [f64; 3] = std::array::from_fn(|a| rel[a] - t * dir[a]);
                let occ = smoothstep((w - dot(perp, perp).sqrt()) / 0.3);
                hu += occ * (-40.0 - hu);
            }
            let (body, spike) = shape.occupancy(d);
            let dist = dot(d, d).sqrt();
            let body_hu = match consistency {
                "Solid" => solid_hu,
                "Part-solid" => {
                    if dist < 0.55 * radius {
                        solid_hu
                    } else {
                        ggo_hu
                    }
                }
                _ => ggo_hu,
            };
            hu += body * (body_hu - hu);
            hu += spike * (0.0 - hu);
            *v = hu.round() as f32;
        }
        let volume = Volume::new(voxels, spacing, origin)?;

        let mut set = SemanticFeatureSet::new();
        let long = 2.0 * radius * (1.0 + elongation);
        set.set_diameter(Feature::LongestAxialDiameter, (long * 10.0).round() / 10.0)?;
        set.set_diameter(Feature::ShortDiameter, (2.0 * radius * 10.0).round() / 10.0)?;
        let margin = if spiculated {
            "Spiculated"
        } else if lobulated {
            "Lobulated"
        } else {
            "Smooth"
        };
        set.set_margins([margin])?;
        set.set_class(Feature::Consistency, consistency)?;
        let shape_class = if spiculated || lobulated {
            "Irregular"
        } else if elongation > 0.2 {
            "Ovoid"
        } else {
            "Round"
        };
        set.set_class(Feature::Shape, shape_class)?;
        let conspicuity = if consistency == "Solid" && !spiculated {
            "Well marginated"
        } else {
            "Poorly marginated"
        };
        set.set_class(Feature::MarginConspicuity, conspicuity)?;
        let present_prob = |f: Feature| -> f64 {
            match (f, label) {
                (Feature::PleuralRetraction, 1) => 0.4,
                (Feature::VascularConvergence, 1) => 0.35,
                (Feature::AirwayCutoff, 1) => 0.1,
                (Feature::Cavitation, _) => 0.05,
                (Feature::PleuralAttachment, _) => 0.15,
                (Feature::PleuralRetraction | Feature::VascularConvergence, 0) => 0.05,
                _ => 0.02,
            }
        };
        for f in Feature::ALL.into_iter().filter(|f| f.is_binary()) {
            if rng.random_bool(0.1) {
                continue;
            }
            let present = rng.random_bool(present_prob(f));
            set.set_class(f, if present { "Present" } else { "Absent" })?;
        }
        let suspicion = if label == 1 {
            pick(&mut rng, &[("Intermediate", 0.15), ("Moderately High", 0.45), ("High", 0.4)])
        } else {
            pick(&mut rng, &[("Very Low", 0.35), ("Moderately Low", 0.4), ("Intermediate", 0.25)])
        };
        set.set_class(Feature::Suspicion, suspicion)?;

        records.push(NoduleRecord {
            patient_id: patient_id.clone(),
            nodule_id: nodule_id.clone(),
            volume_uri: format!("volumes/{patient_id}_{nodule_id}.nii.gz"),
            centroid_mm: centroid,
            label_one_year: label,
            semantics_uri: Some("semantics.json".into()),
        });
        volumes.insert((patient_id.clone(), nodule_id.clone()), volume);
        annotations.entries.insert((patient_id.clone(), nodule_id.clone()), set);
        truth.push(NoduleTruth {
            patient_id,
            nodule_id,
            label,
            radius_mm: radius,
            elongation,
            spiculated,
            lobulated,
            consistency: consistency.to_string(),
        });
    }
    Ok(SyntheticCohort {
        manifest: CohortManifest::new("synthetic", records)?,
        volumes,
        annotations,
        truth,
    })
}

/// Writes `manifest.csv`, `semantics.json`, `truth.json` and one gzipped
/// NIfTI per nodule under `dir`. Returns the written paths, relative to `dir`.
pub fn write_cohort(dir: &Path, cohort: &SyntheticCohort) -> Result<Vec<String>> {
    fs::create_dir_all(dir.join("volumes")).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for r in &cohort.manifest.records {
        let vol = &cohort.volumes[&(r.patient_id.clone(), r.nodule_id.clone())];
        write_nifti(&dir.join(&r.volume_uri), vol, true)?;
        written.push(r.volume_uri.clone());
    }
    cohort.annotations.save(&dir.join("semantics.json"))?;
    written.push("semantics.json".into());
    let truth = dir.join("truth.json");
    fs::write(&truth, serde_json::to_string_pretty(&cohort.truth)?).map_err(|e| Error::io(&truth, e))?;
    written.push("truth.json".into());
    cohort.manifest.save(&dir.join("manifest.csv"))?;
    written.push("manifest.csv".into());
    Ok(written)
}
