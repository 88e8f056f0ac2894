//! CT volume geometry, nodule cropping, intensity windowing and the
//! nine-plane view extraction that feeds the vision encoder.

mod augment;
mod planes;

pub use augment::{augment, AugmentationConfig};
pub use planes::{
    load_view_stack, save_view_stack, slice_nine_planes, to_model_input, ChannelStats, PlaneId, ViewStack,
    PREPROCESSING_VERSION,
};

use ndarray::Array3;

use crate::{Error, Result};

/// Edge length of the cubic nodule crop, in voxels at 1 mm.
pub const CROP_SIZE: usize = 50;
/// Index of the centroid voxel along each crop axis.
pub const CROP_CENTER: usize = CROP_SIZE / 2;
pub const PAD_HU: f32 = -1000.0;
pub const HU_MIN: f32 = -1000.0;
pub const HU_MAX: f32 = 500.0;

/// A CT volume indexed `[x, y, z]`; voxel `i` sits at `origin + i · spacing`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub voxels: Array3<f32>,
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
}

impl Volume {
    pub fn new(voxels: Array3<f32>, spacing_mm: [f64; 3], origin_mm: [f64; 3]) -> Result<Self> {
        if voxels.shape().contains(&0) {
            return Err(Error::shape("volume dimensions must be at least 1"));
        }
        if spacing_mm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid(format!("spacing {spacing_mm:?} must be positive")));
        }
        if origin_mm.iter().any(|o| !o.is_finite()) {
            return Err(Error::invalid("origin must be finite"));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("volume contains non-finite voxels"));
        }
        Ok(Self {
            voxels,
            spacing_mm,
            origin_mm,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        let (x, y, z) = self.voxels.dim();
        [x, y, z]
    }

    /// Continuous voxel index of a physical point.
    pub fn to_index(&self, point_mm: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (point_mm[a] - self.origin_mm[a]) / self.spacing_mm[a])
    }

    pub fn to_physical(&self, index: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin_mm[a] + index[a] * self.spacing_mm[a])
    }

    /// Whether `point_mm` lies within half a voxel of the sampled grid.
    pub fn contains(&self, point_mm: [f64; 3]) -> bool {
        let idx = self.to_index(point_mm);
        let dims = self.dims();
        (0..3).all(|a| idx[a] >= -0.5 && idx[a] < dims[a] as f64 - 0.5)
    }
}

/// Trilinear interpolation at a continuous index, clamping to the edge.
pub(crate) fn sample_clamped(v: &Array3<f32>, p: [f64; 3]) -> f32 {
    let (nx, ny, nz) = v.dim();
    let n = [nx, ny, nz];
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut w = [0f64; 3];
    for a in 0..3 {
        let x = p[a].clamp(0.0, (n[a] - 1) as f64);
        let f = x.floor();
        i0[a] = f as usize;
        i1[a] = (i0[a] + 1).min(n[a] - 1);
        w[a] = x - f;
    }
    let mut acc = 0.0f64;
    for (dx, wx) in [(i0[0], 1.0 - w[0]), (i1[0], w[0])] {
        if wx == 0.0 {
            continue;
        }
        for (dy, wy) in [(i0[1], 1.0 - w[1]), (i1[1], w[1])] {
            if wy == 0.0 {
                continue;
            }
            for (dz, wz) in [(i0[2], 1.0 - w[2]), (i1[2], w[2])] {
                if wz == 0.0 {
                    continue;
                }
                acc += wx * wy * wz * v[[dx, dy, dz]] as f64;
            }
        }
    }
    acc as f32
}

/// Resamples onto a grid with the same origin and `target_spacing`, using
/// trilinear interpolation. The output has `round(n · s / t)` voxels per axis.
pub fn resample_isotropic(volume: &Volume, target_spacing: [f64; 3]) -> Result<Volume> {
    if target_spacing.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Error::invalid(format!("target spacing {target_spacing:?} must be positive")));
    }
    if volume.spacing_mm == target_spacing {
        return Ok(volume.clone());
    }
    let dims = volume.dims();
    let mut out_dims = [0usize; 3];
    for a in 0..3 {
        let n = (dims[a] as f64 * volume.spacing_mm[a] / target_spacing[a]).round();
        if n < 1.0 {
            return Err(Error::shape(format!("axis {a} collapses to {n} voxels after resampling")));
        }
        out_dims[a] = n as usize;
    }
    let ratio: [f64; 3] = std::array::from_fn(|a| target_spacing[a] / volume.spacing_mm[a]);
    let voxels = Array3::from_shape_fn((out_dims[0], out_dims[1], out_dims[2]), |(x, y, z)| {
        sample_clamped(
            &volume.voxels,
            [x as f64 * ratio[0], y as f64 * ratio[1], z as f64 * ratio[2]],
        )
    });
    Volume::new(voxels, target_spacing, volume.origin_mm)
}

/// A 50³ crop in Hounsfield units with its padding mask.
#[derive(Clone, Debug, PartialEq)]
pub struct HuCrop {
    pub hu: Array3<f32>,
    pub pad_mask: Array3<bool>,
}

/// A 50³ crop of normalized intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoduleCrop {
    pub voxels: Array3<f32>,
    pub pad_mask: Array3<bool>,
}

/// Crops 50³ voxels around the voxel nearest `centroid_mm`, so that the
/// centroid lands on index 25. Voxels outside the volume are `PAD_HU`.
pub fn crop_nodule(volume: &Volume, centroid_mm: [f64; 3]) -> Result<HuCrop> {
    if volume.spacing_mm.iter().any(|s| (s - 1.0).abs() > 1e-6) {
        return Err(Error::invalid(format!(
            "crop expects 1 mm isotropic spacing, got {:?}",
            volume.spacing_mm
        )));
    }
    if centroid_mm.iter().any(|c| !c.is_finite()) || !volume.contains(centroid_mm) {
        return Err(Error::invalid(format!("centroid {centroid_mm:?} lies outside the volume")));
    }
    let idx = volume.to_index(centroid_mm);
    let center: [i64; 3] = std::array::from_fn(|a| idx[a].round() as i64);
    let dims = volume.dims();
    let mut hu = Array3::from_elem((CROP_SIZE, CROP_SIZE, CROP_SIZE), PAD_HU);
    let mut pad_mask = Array3::from_elem((CROP_SIZE, CROP_SIZE, CROP_SIZE), true);
    let off = CROP_CENTER as i64;
    let src = |a: usize, i: usize| -> Option<usize> {
        let s = center[a] - off + i as i64;
        (s >= 0 && s < dims[a] as i64).then_some(s as usize)
    };
    for i in 0..CROP_SIZE {
        let Some(x) = src(0, i) else { continue };
        for j in 0..CROP_SIZE {
            let Some(y) = src(1, j) else { continue };
            for k in 0..CROP_SIZE {
                let Some(z) = src(2, k) else { continue };
                hu[[i, j, k]] = volume.voxels[[x, y, z]];
                pad_mask[[i, j, k]] = false;
            }
        }
    }
    Ok(HuCrop { hu, pad_mask })
}

pub fn clip_normalize_value(hu: f32) -> f32 {
    (hu.clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)
}

pub fn clip_normalize(crop: &HuCrop) -> NoduleCrop {
    NoduleCrop {
        voxels: crop.hu.mapv(clip_normalize_value),
        pad_mask: crop.pad_mask.clone(),
    }
}

/// Deterministic crop → window path used at inference.
pub fn deterministic_crop(volume: &Volume, centroid_mm: [f64; 3]) -> Result<NoduleCrop> {
    Ok(clip_normalize(&crop_nodule(volume, centroid_mm)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(n: [usize; 3], spacing: [f64; 3], f: impl Fn(usize, usize, usize) -> f32) -> Volume {
        Volume::new(Array3::from_shape_fn((n[0], n[1], n[2]), |(x, y, z)| f(x, y, z)), spacing, [0.0; 3]).unwrap()
    }

    #[test]
    fn volume_validation() {
        assert!(Volume::new(Array3::zeros((0, 1, 1)), [1.0; 3], [0.0; 3]).is_err());
        assert!(Volume::new(Array3::zeros((1, 1, 1)), [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(Volume::new(Array3::from_elem((1, 1, 1), f32::NAN), [1.0; 3], [0.0; 3]).is_err());
    }

    #[test]
    fn resample_identity_and_constant() {
        let v = vol([5, 6, 7], [1.0; 3], |x, y, z| (x * 100 + y * 10 + z) as f32);
        assert_eq!(resample_isotropic(&v, [1.0; 3]).unwrap(), v);
        let c = vol([4, 5, 6], [2.0; 3], |_, _, _| 42.0);
        let r = resample_isotropic(&c, [1.0; 3]).unwrap();
        assert_eq!(r.dims(), [8, 10, 12]);
        assert!(r.voxels.iter().all(|&x| x == 42.0));
        assert!(resample_isotropic(&c, [100.0, 1.0, 1.0]).is_err());
        assert!(resample_isotropic(&c, [0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn resample_ramp_matches_analytic() {
        let spacing = [2.5, 0.8, 1.3];
        let mut v = vol([12, 9, 7], spacing, |x, _, _| x as f32 * 2.5 * 3.0 - 7.0);
        v.origin_mm = [-4.0, 1.0, 2.0];
        let r = resample_isotropic(&v, [1.0; 3]).unwrap();
        let last_x = (12 - 1) as f64 * 2.5;
        for ((x, y, z), val) in r.voxels.indexed_iter() {
            let phys_offset = x as f64;
            if phys_offset > last_x {
                continue;
            }
            let expected = phys_offset * 3.0 - 7.0;
            assert!((*val as f64 - expected).abs() < 1e-6, "{x},{y},{z}: {val} vs {expected}");
        }
        assert_eq!(r.origin_mm, v.origin_mm);
        let extent_in = 12.0 * 2.5;
        assert!((r.dims()[0] as f64 - extent_in).abs() <= 1.0);
    }

    #[test]
    fn interior_crop_has_no_padding() {
        let v = vol([100; 3], [1.0; 3], |x, y, z| (x + y + z) as f32);
        let c = crop_nodule(&v, [50.0; 3]).unwrap();
        assert!(c.pad_mask.iter().all(|p| !p));
        assert_eq!(c.hu[[CROP_CENTER; 3]], 150.0);
        assert_eq!(c.hu[[0, 0, 0]], 75.0);
        assert_eq!(crop_nodule(&v, [50.0; 3]).unwrap(), c);
    }

    #[test]
    fn corner_crop_padding_matches_brute_force() {
        let v = vol([100; 3], [1.0; 3], |_, _, _| 0.0);
        let c = crop_nodule(&v, [0.0; 3]).unwrap();
        let mut expected = 0usize;
        for i in 0..CROP_SIZE as i64 {
            for j in 0..CROP_SIZE as i64 {
                for k in 0..CROP_SIZE as i64 {
                    let out = [i, j, k].iter().any(|&t| t - 25 < 0 || t - 25 >= 100);
                    expected += out as usize;
                    assert_eq!(c.pad_mask[[i as usize, j as usize, k as usize]], out);
                }
            }
        }
        let padded = c.pad_mask.iter().filter(|p| **p).count();
        assert_eq!(padded, expected);
        assert_eq!(padded, 50usize.pow(3) * 7 / 8);
        assert!(c.hu.indexed_iter().all(|(ix, h)| (*h == PAD_HU) == c.pad_mask[ix]));
        assert!(crop_nodule(&v, [-5.0, 0.0, 0.0]).is_err());
        let coarse = vol([10; 3], [2.0; 3], |_, _, _| 0.0);
        assert!(crop_nodule(&coarse, [5.0; 3]).is_err());
    }

    #[test]
    fn clip_normalize_cases() {
        assert_eq!(clip_normalize_value(-1000.0), 0.0);
        assert_eq!(clip_normalize_value(500.0), 1.0);
        assert_eq!(clip_normalize_value(-1500.0), 0.0);
        assert_eq!(clip_normalize_value(900.0), 1.0);
        assert_eq!(clip_normalize_value(-250.0), 0.5);
    }

    proptest::proptest! {
        #[test]
        fn clip_normalize_monotone_in_unit_interval(a in -1.0e5f32..1.0e5, b in -1.0e5f32..1.0e5) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (fl, fh) = (clip_normalize_value(lo), clip_normalize_value(hi));
            proptest::prop_assert!(fl <= fh);
            proptest::prop_assert!((0.0..=1.0).contains(&fl) && (0.0..=1.0).contains(&fh));
        }
    }
}
