use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{s, Array2};
use rand::{Rng, RngCore};

use crate::data_ingest::{resolve_uri, CohortManifest, NoduleRecord};
use crate::nifti::read_nifti;
use crate::preprocess::{
    augment, deterministic_crop, resample_isotropic, slice_nine_planes, to_model_input, AugmentationConfig,
    ChannelStats, ViewStack, Volume,
};
use crate::semantics::{
    augment_text, render_report, select_training_text, AnnotationFile, SemanticFeatureSet, SynonymTable,
    TextAugmentConfig,
};
use crate::synth::SyntheticCohort;
use crate::{Error, Result};

/// Half-width in mm of the region kept around each centroid. Covers the crop
/// plus centroid jitter up to 15 mm.
const REGION_HALF_MM: usize = 40;

/// One nodule held in memory for training and evaluation.
#[derive(Clone, Debug)]
pub struct Sample {
    pub patient_id: String,
    pub nodule_id: String,
    pub label: u8,
    pub semantics: SemanticFeatureSet,
    /// 1 mm isotropic region around the nodule.
    pub region: Volume,
    pub centroid_mm: [f64; 3],
    eval_planes: Vec<Array2<f32>>,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    samples: Vec<Sample>,
}

/// Cuts the axis-aligned box of `half` voxels around `centroid_mm`,
/// intersected with the scan.
fn region_around(volume: &Volume, centroid_mm: [f64; 3], half: usize) -> Result<Volume> {
    if !volume.contains(centroid_mm) {
        return Err(Error::invalid(format!("centroid {centroid_mm:?} lies outside the volume")));
    }
    let idx = volume.to_index(centroid_mm);
    let dims = volume.dims();
    let lo: [usize; 3] = std::array::from_fn(|a| (idx[a].round() as i64 - half as i64).max(0) as usize);
    let hi: [usize; 3] = std::array::from_fn(|a| ((idx[a].round() as usize) + half + 1).min(dims[a]));
    let voxels = volume
        .voxels
        .slice(s![lo[0]..hi[0], lo[1]..hi[1], lo[2]..hi[2]])
        .to_owned();
    Volume::new(voxels, volume.spacing_mm, volume.to_physical(lo.map(|i| i as f64)))
}

impl Sample {
    pub fn new(record: &NoduleRecord, volume: &Volume, semantics: SemanticFeatureSet) -> Result<Self> {
        let iso = resample_isotropic(volume, [1.0; 3])?;
        let region = region_around(&iso, record.centroid_mm, REGION_HALF_MM)?;
        let eval_planes = slice_nine_planes(&deterministic_crop(&region, record.centroid_mm)?);
        Ok(Self {
            patient_id: record.patient_id.clone(),
            nodule_id: record.nodule_id.clone(),
            label: record.label_one_year,
            semantics,
            region,
            centroid_mm: record.centroid_mm,
            eval_planes,
        })
    }

    /// Deterministic crop, nine planes, model normalization.
    pub fn eval_stack(&self, image_size: usize, stats: &ChannelStats) -> Result<ViewStack> {
        to_model_input(&self.eval_planes, image_size, stats)
    }

    /// Augmented crop for one training draw.
    pub fn train_stack<R: Rng + ?Sized>(
        &self,
        image_size: usize,
        stats: &ChannelStats,
        aug: &AugmentationConfig,
        rng: &mut R,
    ) -> Result<ViewStack> {
        let (_, crop) = augment(&self.region, self.centroid_mm, aug, rng)?;
        to_model_input(&slice_nine_planes(&crop), image_size, stats)
    }

    /// Rendered report, impression-or-findings pick, then text augmentation.
    pub fn training_text(&self, cfg: &TextAugmentConfig, rng: &mut dyn RngCore) -> Result<String> {
        let report = render_report(&self.semantics, rng)?;
        let text = select_training_text(&report, rng);
        Ok(augment_text(&text, SynonymTable::bundled(), cfg, rng))
    }
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    /// Reads every volume and annotation file named by the manifest. Relative
    /// URIs resolve against `root`.
    pub fn load(manifest: &CohortManifest, root: &Path) -> Result<Self> {
        let mut annotations: BTreeMap<String, AnnotationFile> = BTreeMap::new();
        let mut samples = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            let semantics = match &r.semantics_uri {
                Some(uri) => {
                    if !annotations.contains_key(uri) {
                        annotations.insert(uri.clone(), AnnotationFile::load(&resolve_uri(root, uri))?);
                    }
                    annotations[uri].get(&r.patient_id, &r.nodule_id).cloned().unwrap_or_default()
                }
                None => SemanticFeatureSet::new(),
            };
            let volume = read_nifti(&resolve_uri(root, &r.volume_uri))?;
            samples.push(Sample::new(r, &volume, semantics)?);
        }
        Ok(Self { samples })
    }

    pub fn from_synthetic(cohort: &SyntheticCohort) -> Result<Self> {
        let samples = cohort
            .manifest
            .records
            .iter()
            .map(|r| {
                let key = (r.patient_id.clone(), r.nodule_id.clone());
                let semantics = cohort.annotations.entries.get(&key).cloned().unwrap_or_default();
                Sample::new(r, &cohort.volumes[&key], semantics)
            })
            .collect::<Result<_>>()?;
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    /// Indices of the samples belonging to `patients`, in dataset order.
    pub fn indices_for(&self, patients: &BTreeSet<String>) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| patients.contains(&self.samples[i].patient_id))
            .collect()
    }
}
