use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use super::{sample_clamped, NoduleCrop, CROP_CENTER, CROP_SIZE};
use crate::{Error, Result};

/// Bumped whenever the crop → view pipeline changes output values.
pub const PREPROCESSING_VERSION: u32 = 1;

const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PlaneId {
    Axial,
    Coronal,
    Sagittal,
    /// Contains z; in-plane direction (1, 1, 0)/√2.
    ZDiagonalPlus,
    /// Contains z; in-plane direction (1, −1, 0)/√2.
    ZDiagonalMinus,
    /// Contains y; in-plane direction (1, 0, 1)/√2.
    YDiagonalPlus,
    /// Contains y; in-plane direction (1, 0, −1)/√2.
    YDiagonalMinus,
    /// Contains x; in-plane direction (0, 1, 1)/√2.
    XDiagonalPlus,
    /// Contains x; in-plane direction (0, 1, −1)/√2.
    XDiagonalMinus,
}

impl PlaneId {
    pub const ALL: [PlaneId; 9] = [
        PlaneId::Axial,
        PlaneId::Coronal,
        PlaneId::Sagittal,
        PlaneId::ZDiagonalPlus,
        PlaneId::ZDiagonalMinus,
        PlaneId::YDiagonalPlus,
        PlaneId::YDiagonalMinus,
        PlaneId::XDiagonalPlus,
        PlaneId::XDiagonalMinus,
    ];

    /// Orthonormal in-plane axes `(u, v)`; image pixel `(i, j)` samples
    /// `center + (i − 25)·u + (j − 25)·v`.
    pub fn axes(self) -> ([f64; 3], [f64; 3]) {
        let d = INV_SQRT2;
        match self {
            PlaneId::Axial => ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
            PlaneId::Coronal => ([1.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
            PlaneId::Sagittal => ([0.0, 1.0, 0.0], [0.0, 0.0, 1.0]),
            PlaneId::ZDiagonalPlus => ([d, d, 0.0], [0.0, 0.0, 1.0]),
            PlaneId::ZDiagonalMinus => ([d, -d, 0.0], [0.0, 0.0, 1.0]),
            PlaneId::YDiagonalPlus => ([d, 0.0, d], [0.0, 1.0, 0.0]),
            PlaneId::YDiagonalMinus => ([d, 0.0, -d], [0.0, 1.0, 0.0]),
            PlaneId::XDiagonalPlus => ([0.0, d, d], [1.0, 0.0, 0.0]),
            PlaneId::XDiagonalMinus => ([0.0, d, -d], [1.0, 0.0, 0.0]),
        }
    }
}

/// Samples the nine 50×50 planes through the crop center at 1 mm pixels.
pub fn slice_nine_planes(crop: &NoduleCrop) -> Vec<Array2<f32>> {
    let c = CROP_CENTER as f64;
    PlaneId::ALL
        .iter()
        .map(|plane| {
            let (u, v) = plane.axes();
            Array2::from_shape_fn((CROP_SIZE, CROP_SIZE), |(i, j)| {
                let s = i as f64 - c;
                let t = j as f64 - c;
                let p: [f64; 3] = std::array::from_fn(|a| c + s * u[a] + t * v[a]);
                // Snap coordinates that are integral up to rounding error.
                let p = p.map(|x| if (x - x.round()).abs() < 1e-9 { x.round() } else { x });
                sample_clamped(&crop.voxels, p)
            })
        })
        .collect()
}

/// Per-channel affine normalization `(x − mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for ChannelStats {
    /// Channel statistics of the pretrained image encoder.
    fn default() -> Self {
        Self {
            mean: [0.48145466, 0.4578275, 0.40821073],
            std: [0.26862954, 0.26130258, 0.27577711],
        }
    }
}

/// Nine normalized 3-channel views.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewStack {
    /// Shape `(9, 3, size, size)`.
    pub views: Array4<f32>,
    pub plane_ids: Vec<PlaneId>,
}

impl ViewStack {
    pub fn image_size(&self) -> usize {
        self.views.dim().2
    }
}

/// Bilinear resize with half-pixel centers and edge clamping.
fn resize_bilinear(img: &Array2<f32>, size: usize) -> Array2<f32> {
    let (h, w) = img.dim();
    let coords = |n_in: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / size as f64;
        (0..size)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
            })
            .collect()
    };
    let rows = coords(h);
    let cols = coords(w);
    Array2::from_shape_fn((size, size), |(r, c)| {
        let (r0, r1, fr) = rows[r];
        let (c0, c1, fc) = cols[c];
        let top = img[[r0, c0]] as f64 * (1.0 - fc) + img[[r0, c1]] as f64 * fc;
        let bottom = img[[r1, c0]] as f64 * (1.0 - fc) + img[[r1, c1]] as f64 * fc;
        (top * (1.0 - fr) + bottom * fr) as f32
    })
}

/// Resizes each plane to `image_size`, replicates it over three channels and
/// applies `stats`.
pub fn to_model_input(images: &[Array2<f32>], image_size: usize, stats: &ChannelStats) -> Result<ViewStack> {
    if images.len() != PlaneId::ALL.len() {
        return Err(Error::shape(format!("expected 9 views, got {}", images.len())));
    }
    if image_size == 0 {
        return Err(Error::invalid("image size must be positive"));
    }
    let mut views = Array4::zeros((9, 3, image_size, image_size));
    for (k, img) in images.iter().enumerate() {
        if img.is_empty() {
            return Err(Error::shape("empty view"));
        }
        let resized = resize_bilinear(img, image_size);
        for ch in 0..3 {
            let (m, s) = (stats.mean[ch], stats.std[ch]);
            views
                .slice_mut(ndarray::s![k, ch, .., ..])
                .assign(&resized.mapv(|x| ((x as f64 - m) / s) as f32));
        }
    }
    Ok(ViewStack {
        views,
        plane_ids: PlaneId::ALL.to_vec(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ViewStackMeta {
    preprocessing_version: u32,
    shape: [usize; 4],
    plane_ids: Vec<PlaneId>,
    channel_stats: ChannelStats,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the views as little-endian f32 plus a `<path>.json` sidecar.
pub fn save_view_stack(path: &Path, stack: &ViewStack, stats: &ChannelStats) -> Result<()> {
    let d = stack.views.dim();
    let meta = ViewStackMeta {
        preprocessing_version: PREPROCESSING_VERSION,
        shape: [d.0, d.1, d.2, d.3],
        plane_ids: stack.plane_ids.clone(),
        channel_stats: *stats,
    };
    let bytes: Vec<u8> = stack.views.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar(path);
    fs::write(&side, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&side, e))
}

/// Loads a cached stack; returns `None` when the cache was produced by a
/// different preprocessing version or channel statistics.
pub fn load_view_stack(path: &Path, stats: &ChannelStats) -> Result<Option<ViewStack>> {
    let side = sidecar(path);
    let meta: ViewStackMeta =
        serde_json::from_str(&fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?)?;
    if meta.preprocessing_version != PREPROCESSING_VERSION || meta.channel_stats != *stats {
        return Ok(None);
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let [a, b, c, d] = meta.shape;
    if bytes.len() != a * b * c * d * 4 {
        return Err(Error::format(format!("{}: size does not match sidecar", path.display())));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|ch| f32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]]))
        .collect();
    let views = Array4::from_shape_vec((a, b, c, d), data).map_err(|e| Error::format(e.to_string()))?;
    Ok(Some(ViewStack {
        views,
        plane_ids: meta.plane_ids,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn crop_from(f: impl Fn(usize, usize, usize) -> f32) -> NoduleCrop {
        NoduleCrop {
            voxels: Array3::from_shape_fn((CROP_SIZE, CROP_SIZE, CROP_SIZE), |(x, y, z)| f(x, y, z)),
            pad_mask: Array3::from_elem((CROP_SIZE, CROP_SIZE, CROP_SIZE), false),
        }
    }

    #[test]
    fn plane_axes_are_orthonormal() {
        for p in PlaneId::ALL {
            let (u, v) = p.axes();
            let dot = |a: [f64; 3], b: [f64; 3]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            assert!((dot(u, u) - 1.0).abs() < 1e-12 && (dot(v, v) - 1.0).abs() < 1e-12);
            assert!(dot(u, v).abs() < 1e-12);
        }
        let mut normals: Vec<[i64; 3]> = PlaneId::ALL
            .iter()
            .map(|p| {
                let (u, v) = p.axes();
                let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
                let s = if n.iter().find(|x| x.abs() > 1e-9).unwrap() < &0.0 { -1.0 } else { 1.0 };
                n.map(|x| (s * x * 1e6).round() as i64)
            })
            .collect();
        normals.sort();
        normals.dedup();
        assert_eq!(normals.len(), 9, "planes must be distinct");
    }

    #[test]
    fn constant_and_center_voxel() {
        let planes = slice_nine_planes(&crop_from(|_, _, _| 0.3));
        assert_eq!(planes.len(), 9);
        assert!(planes.iter().all(|p| p.iter().all(|&v| v == 0.3)));
        let planes = slice_nine_planes(&crop_from(|x, y, z| if [x, y, z] == [25; 3] { 1.0 } else { 0.0 }));
        for p in &planes {
            assert_eq!(p[[25, 25]], 1.0);
        }
    }

    /// Disk area of a centered ball, counted by brute-force rasterization.
    #[test]
    fn ball_gives_disks() {
        let r = 10.0f64;
        let c = CROP_CENTER as f64;
        let ball = crop_from(|x, y, z| {
            let d2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2);
            if d2 <= r * r {
                1.0
            } else {
                0.0
            }
        });
        let target = std::f64::consts::PI * r * r;
        for (plane, img) in PlaneId::ALL.iter().zip(slice_nine_planes(&ball)) {
            let area = img.iter().filter(|&&v| v >= 0.5).count() as f64;
            assert!((area - target).abs() / target < 0.05, "{plane:?}: area {area} vs {target}");
        }
    }

    #[test]
    fn outputs_are_convex_combinations() {
        let crop = crop_from(|x, y, z| ((x * 7 + y * 13 + z * 29) % 17) as f32 / 16.0 * 0.5 + 0.2);
        let (lo, hi) = (0.2f32, 0.7f32);
        for img in slice_nine_planes(&crop) {
            assert!(img.iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
        }
    }

    #[test]
    fn model_input_affine() {
        let stats = ChannelStats::default();
        let zeros = vec![Array2::<f32>::zeros((50, 50)); 9];
        let ones = vec![Array2::<f32>::ones((50, 50)); 9];
        let vz = to_model_input(&zeros, 224, &stats).unwrap();
        let vo = to_model_input(&ones, 224, &stats).unwrap();
        assert_eq!(vz.views.dim(), (9, 3, 224, 224));
        for ch in 0..3 {
            let ez = ((0.0 - stats.mean[ch]) / stats.std[ch]) as f32;
            let eo = ((1.0 - stats.mean[ch]) / stats.std[ch]) as f32;
            assert!(vz.views.slice(ndarray::s![.., ch, .., ..]).iter().all(|&v| v == ez));
            assert!(vo.views.slice(ndarray::s![.., ch, .., ..]).iter().all(|&v| v == eo));
        }
        assert!(to_model_input(&zeros[..8], 224, &stats).is_err());
        let img = Array2::from_elem((50, 50), 0.25f32);
        assert!(resize_bilinear(&img, 224).iter().all(|&v| v == 0.25));
    }

    #[test]
    fn cache_round_trip() {
        let stats = ChannelStats::default();
        let planes = slice_nine_planes(&crop_from(|x, _, _| x as f32 / 49.0));
        let stack = to_model_input(&planes, 32, &stats).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.views");
        save_view_stack(&p, &stack, &stats).unwrap();
        assert_eq!(load_view_stack(&p, &stats).unwrap().unwrap(), stack);
        let other = ChannelStats {
            mean: [0.5; 3],
            std: [0.5; 3],
        };
        assert!(load_view_stack(&p, &other).unwrap().is_none());
    }
}
