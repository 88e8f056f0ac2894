use ndarray::{Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{clip_normalize, crop_nodule, HuCrop, NoduleCrop, Volume, CROP_CENTER, CROP_SIZE, PAD_HU};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub jitter_mm: f64,
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
    pub noise_mean: f64,
    pub noise_std: f64,
    pub contrast_exponent_range: [f64; 2],
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            jitter_mm: 5.0,
            flip_prob: 0.5,
            max_rotation_deg: 10.0,
            noise_mean: 0.0,
            noise_std: 0.02,
            contrast_exponent_range: [-0.02, 0.02],
        }
    }
}

impl AugmentationConfig {
    pub fn zeroed() -> Self {
        Self {
            jitter_mm: 0.0,
            flip_prob: 0.0,
            max_rotation_deg: 0.0,
            noise_mean: 0.0,
            noise_std: 0.0,
            contrast_exponent_range: [0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.contrast_exponent_range;
        let ok = self.jitter_mm.is_finite()
            && self.jitter_mm >= 0.0
            && (0.0..=1.0).contains(&self.flip_prob)
            && self.max_rotation_deg.is_finite()
            && self.max_rotation_deg >= 0.0
            && self.noise_mean.is_finite()
            && self.noise_std.is_finite()
            && self.noise_std >= 0.0
            && lo.is_finite()
            && hi.is_finite()
            && lo <= hi
            && lo > -1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid augmentation config {self:?}")))
        }
    }
}

fn rotation_matrix(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let [x, y, z] = axis;
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Rotates about the crop center with trilinear sampling; samples that fall
/// outside the crop read `PAD_HU` and are flagged as padding.
fn rotate(crop: &HuCrop, rot: [[f64; 3]; 3]) -> HuCrop {
    let c = CROP_CENTER as f64;
    let max = (CROP_SIZE - 1) as f64;
    let mut hu = Array3::from_elem((CROP_SIZE, CROP_SIZE, CROP_SIZE), PAD_HU);
    let mut pad_mask = Array3::from_elem((CROP_SIZE, CROP_SIZE, CROP_SIZE), true);
    for ((i, j, k), out) in hu.indexed_iter_mut() {
        let d = [i as f64 - c, j as f64 - c, k as f64 - c];
        // Inverse rotation (transpose) maps output voxels back to the source.
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = c + rot[0][a] * d[0] + rot[1][a] * d[1] + rot[2][a] * d[2];
        }
        if p.iter().any(|&x| x < -1e-6 || x > max + 1e-6) {
            continue;
        }
        let p = p.map(|x| x.clamp(0.0, max));
        let mut acc = 0.0f64;
        let mut any_pad = false;
        let base = p.map(|x| x.floor() as usize);
        let frac: [f64; 3] = std::array::from_fn(|a| p[a] - base[a] as f64);
        for dx in 0..2 {
            let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
            if wx == 0.0 {
                continue;
            }
            for dy in 0..2 {
                let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                if wy == 0.0 {
                    continue;
                }
                for dz in 0..2 {
                    let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
                    if wz == 0.0 {
                        continue;
                    }
                    let ix = [
                        (base[0] + dx).min(CROP_SIZE - 1),
                        (base[1] + dy).min(CROP_SIZE - 1),
                        (base[2] + dz).min(CROP_SIZE - 1),
                    ];
                    acc += wx * wy * wz * crop.hu[ix] as f64;
                    any_pad |= crop.pad_mask[ix];
                }
            }
        }
        *out = acc as f32;
        pad_mask[[i, j, k]] = any_pad;
    }
    HuCrop { hu, pad_mask }
}

/// Training-time crop: jitter → crop → flip → rotate → window → noise →
/// contrast → clip. A zeroed config reproduces the deterministic path.
pub fn augment<R: Rng + ?Sized>(
    volume: &Volume,
    centroid_mm: [f64; 3],
    config: &AugmentationConfig,
    rng: &mut R,
) -> Result<([f64; 3], NoduleCrop)> {
    config.validate()?;
    let mut centroid = centroid_mm;
    if config.jitter_mm > 0.0 {
        for c in centroid.iter_mut() {
            *c += rng.random_range(-config.jitter_mm..=config.jitter_mm);
        }
        // Keep the jittered center inside the scan.
        let dims = volume.dims();
        let idx = volume.to_index(centroid);
        let clamped: [f64; 3] = std::array::from_fn(|a| idx[a].clamp(0.0, dims[a] as f64 - 1.0));
        centroid = volume.to_physical(clamped);
    }
    let mut crop = crop_nodule(volume, centroid)?;

    for axis in 0..3 {
        if config.flip_prob > 0.0 && rng.random_bool(config.flip_prob) {
            crop.hu.invert_axis(Axis(axis));
            crop.pad_mask.invert_axis(Axis(axis));
        }
    }
    crop.hu = crop.hu.as_standard_layout().to_owned();
    crop.pad_mask = crop.pad_mask.as_standard_layout().to_owned();

    if config.max_rotation_deg > 0.0 {
        let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let axis = v.map(|x| x / norm);
        let angle = rng.random_range(-config.max_rotation_deg..=config.max_rotation_deg).to_radians();
        crop = rotate(&crop, rotation_matrix(axis, angle));
    }

    let mut out = clip_normalize(&crop);

    if config.noise_std > 0.0 || config.noise_mean != 0.0 {
        let normal = Normal::new(config.noise_mean, config.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
        out.voxels.mapv_inplace(|v| v + normal.sample(rng) as f32);
    }

    let [lo, hi] = config.contrast_exponent_range;
    if hi > lo || lo != 0.0 {
        let e = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let p = (1.0 + e) as f32;
        out.voxels.mapv_inplace(|v| v.clamp(0.0, 1.0).powf(p));
    }
    out.voxels.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok((centroid, out))
}
