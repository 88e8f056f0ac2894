//! Minimal NIfTI-1 single-file reader and writer (`.nii` and `.nii.gz`).
//!
//! Only the geometry needed here is honored: `pixdim[1..4]` for spacing and
//! the sform translation (or qform offsets) for the origin. Rotations in the
//! affine are ignored.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array3, ShapeBuilder};

use crate::preprocess::Volume;
use crate::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Cursor<'_> {
    fn take<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.bytes[at..at + N]);
        if self.big_endian {
            b.reverse();
        }
        b
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.take(at))
    }
    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.take(at))
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.take(at))
    }
    fn f64(&self, at: usize) -> f64 {
        f64::from_le_bytes(self.take(at))
    }
}

pub fn read_nifti(path: &Path) -> Result<Volume> {
    let mut raw = Vec::new();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    if is_gz(path) {
        GzDecoder::new(file).read_to_end(&mut raw)
    } else {
        let mut f = file;
        f.read_to_end(&mut raw)
    }
    .map_err(|e| Error::io(path, e))?;
    decode(&raw).map_err(|e| match e {
        Error::Format(m) => Error::format(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn decode(raw: &[u8]) -> Result<Volume> {
    if raw.len() < HEADER_SIZE {
        return Err(Error::format("file shorter than a NIfTI-1 header"));
    }
    let le = i32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]);
    let big_endian = match le {
        348 => false,
        _ if i32::from_be_bytes([raw[0], raw[1], raw[2], raw[3]]) == 348 => true,
        _ => return Err(Error::format("sizeof_hdr is not 348")),
    };
    let c = Cursor { bytes: raw, big_endian };
    if &raw[344..347] != b"n+1" {
        return Err(Error::format("only single-file NIfTI-1 (magic n+1) is supported"));
    }
    let ndim = c.i16(40);
    if !(3..=7).contains(&ndim) {
        return Err(Error::format(format!("expected a 3D image, dim[0] = {ndim}")));
    }
    let dims: Vec<usize> = (1..=3).map(|i| c.i16(40 + 2 * i).max(0) as usize).collect();
    for i in 4..=ndim as usize {
        if c.i16(40 + 2 * i) > 1 {
            return Err(Error::format("only single-volume images are supported"));
        }
    }
    if dims.contains(&0) {
        return Err(Error::format("zero-length image dimension"));
    }
    let datatype = c.i16(70);
    let spacing = [c.f32(80) as f64, c.f32(84) as f64, c.f32(88) as f64];
    let vox_offset = c.f32(108) as usize;
    let slope = c.f32(112);
    let inter = c.f32(116);
    let sform_code = c.i16(254);
    let origin = if sform_code > 0 {
        [c.f32(280 + 12) as f64, c.f32(296 + 12) as f64, c.f32(312 + 12) as f64]
    } else {
        [c.f32(268) as f64, c.f32(272) as f64, c.f32(276) as f64]
    };
    let n = dims[0] * dims[1] * dims[2];
    let width = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::format(format!("unsupported NIfTI datatype {other}"))),
    };
    let start = vox_offset.max(HEADER_SIZE);
    if raw.len() < start + n * width {
        return Err(Error::format("voxel data truncated"));
    }
    let (a, b) = if slope != 0.0 && slope.is_finite() {
        (slope, if inter.is_finite() { inter } else { 0.0 })
    } else {
        (1.0, 0.0)
    };
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let at = start + i * width;
        let v = match datatype {
            DT_UINT8 => raw[at] as f32,
            DT_INT8 => raw[at] as i8 as f32,
            DT_INT16 => c.i16(at) as f32,
            DT_UINT16 => u16::from_le_bytes(c.take(at)) as f32,
            DT_INT32 => c.i32(at) as f32,
            DT_FLOAT32 => c.f32(at),
            _ => c.f64(at) as f32,
        };
        data.push(v * a + b);
    }
    // NIfTI stores x fastest, which is Fortran order for an (x, y, z) array.
    let voxels = Array3::from_shape_vec((dims[0], dims[1], dims[2]).f(), data)
        .map_err(|e| Error::format(e.to_string()))?
        .as_standard_layout()
        .to_owned();
    Volume::new(voxels, spacing, origin)
}

/// Writes `volume` as float32 (or int16 when `as_int16`), gzip-compressed
/// when the path ends in `.gz`.
pub fn write_nifti(path: &Path, volume: &Volume, as_int16: bool) -> Result<()> {
    let (nx, ny, nz) = volume.voxels.dim();
    let mut h = vec![0u8; VOX_OFFSET];
    let put = |h: &mut Vec<u8>, at: usize, b: &[u8]| h[at..at + b.len()].copy_from_slice(b);
    put(&mut h, 0, &348i32.to_le_bytes());
    for (i, d) in [3i16, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1].iter().enumerate() {
        put(&mut h, 40 + 2 * i, &d.to_le_bytes());
    }
    let (datatype, bitpix) = if as_int16 { (DT_INT16, 16i16) } else { (DT_FLOAT32, 32) };
    put(&mut h, 70, &datatype.to_le_bytes());
    put(&mut h, 72, &bitpix.to_le_bytes());
    let pixdim = [1.0f32, volume.spacing_mm[0] as f32, volume.spacing_mm[1] as f32, volume.spacing_mm[2] as f32];
    for (i, p) in pixdim.iter().enumerate() {
        put(&mut h, 76 + 4 * i, &p.to_le_bytes());
    }
    put(&mut h, 108, &(VOX_OFFSET as f32).to_le_bytes());
    put(&mut h, 112, &1.0f32.to_le_bytes());
    h[123] = 2 | 8; // mm, seconds
    put(&mut h, 252, &1i16.to_le_bytes());
    put(&mut h, 254, &1i16.to_le_bytes());
    for axis in 0..3 {
        put(&mut h, 268 + 4 * axis, &(volume.origin_mm[axis] as f32).to_le_bytes());
        let mut row = [0.0f32; 4];
        row[axis] = volume.spacing_mm[axis] as f32;
        row[3] = volume.origin_mm[axis] as f32;
        for (k, v) in row.iter().enumerate() {
            put(&mut h, 280 + 16 * axis + 4 * k, &v.to_le_bytes());
        }
    }
    put(&mut h, 344, b"n+1\0");

    let mut body = Vec::with_capacity(nx * ny * nz * if as_int16 { 2 } else { 4 });
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let v = volume.voxels[[x, y, z]];
                if as_int16 {
                    body.extend_from_slice(&(v.round().clamp(i16::MIN as f32, i16::MAX as f32) as i16).to_le_bytes());
                } else {
                    body.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let res = if is_gz(path) {
        let mut enc = GzEncoder::new(file, Compression::fast());
        enc.write_all(&h).and_then(|_| enc.write_all(&body)).and_then(|_| enc.finish().map(|_| ()))
    } else {
        let mut f = file;
        f.write_all(&h).and_then(|_| f.write_all(&body))
    };
    res.map_err(|e| Error::io(path, e))
}
