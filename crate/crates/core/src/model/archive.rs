//! Flat tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"NCTA"
//! u32    version (1)
//! u32    tensor count
//! per tensor:
//!   u32  name length, then UTF-8 name bytes
//!   u8   dtype: 0 = f32, 1 = f64
//!   u32  rank, then rank × u64 dimensions
//!   data, row-major, little-endian
//! ```
//!
//! Upstream checkpoints are converted offline into this layout; names follow
//! the upstream state-dict keys.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"NCTA";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn write_tensors<W: Write>(out: &mut W, tensors: &[Tensor], dtype: DType) -> Result<()> {
    let io = |e: std::io::Error| Error::format(format!("archive write: {e}"));
    out.write_all(ARCHIVE_MAGIC).map_err(io)?;
    out.write_all(&ARCHIVE_VERSION.to_le_bytes()).map_err(io)?;
    out.write_all(&(tensors.len() as u32).to_le_bytes()).map_err(io)?;
    for t in tensors {
        if t.numel() != t.data.len() {
            return Err(Error::shape(format!("tensor {} has {} values for shape {:?}", t.name, t.data.len(), t.shape)));
        }
        let name = t.name.as_bytes();
        out.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        out.write_all(name).map_err(io)?;
        out.write_all(&[match dtype {
            DType::F32 => 0u8,
            DType::F64 => 1u8,
        }])
        .map_err(io)?;
        out.write_all(&(t.shape.len() as u32).to_le_bytes()).map_err(io)?;
        for &d in &t.shape {
            out.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        let mut buf = Vec::with_capacity(t.data.len() * 8);
        match dtype {
            DType::F32 => t.data.iter().for_each(|&x| buf.extend_from_slice(&(x as f32).to_le_bytes())),
            DType::F64 => t.data.iter().for_each(|&x| buf.extend_from_slice(&x.to_le_bytes())),
        }
        out.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| Error::format(format!("truncated archive: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r, 4)?.try_into().expect("4 bytes")))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r, 8)?.try_into().expect("8 bytes")))
}

pub fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<Tensor>> {
    if read_exact(r, 4)? != ARCHIVE_MAGIC {
        return Err(Error::format("not a tensor archive (bad magic)"));
    }
    let version = read_u32(r)?;
    if version != ARCHIVE_VERSION {
        return Err(Error::format(format!("unsupported archive version {version}")));
    }
    let count = read_u32(r)? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let name = String::from_utf8(read_exact(r, len)?).map_err(|_| Error::format("tensor name is not UTF-8"))?;
        let dtype = match read_exact(r, 1)?[0] {
            0 => DType::F32,
            1 => DType::F64,
            other => return Err(Error::format(format!("tensor {name}: unknown dtype {other}"))),
        };
        let rank = read_u32(r)? as usize;
        let shape = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = match dtype {
            DType::F32 => read_exact(r, n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            DType::F64 => read_exact(r, n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        tensors.push(Tensor { name, shape, data });
    }
    Ok(tensors)
}

pub fn save_archive(path: &Path, tensors: &[Tensor], dtype: DType) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensors(&mut w, tensors, dtype)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_archive(path: &Path) -> Result<Vec<Tensor>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensors(&mut BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Tensor> {
        vec![
            Tensor {
                name: "a.weight".into(),
                shape: vec![2, 3],
                data: vec![0.1, -2.5, 3.0, 1e-8, 7.25, -0.0],
            },
            Tensor {
                name: "scalar".into(),
                shape: vec![],
                data: vec![std::f64::consts::PI],
            },
        ]
    }

    #[test]
    fn f64_round_trip_is_lossless() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &sample(), DType::F64).unwrap();
        let back = read_tensors(&mut buf.as_slice()).unwrap();
        assert_eq!(back, sample());
    }

    #[test]
    fn f32_round_trip_rounds() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &sample(), DType::F32).unwrap();
        let back = read_tensors(&mut buf.as_slice()).unwrap();
        for (a, b) in back.iter().zip(sample()) {
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn header_bytes_are_as_documented() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &sample()[1..], DType::F32).unwrap();
        assert_eq!(&buf[..4], b"NCTA");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 6);
        assert_eq!(&buf[16..22], b"scalar");
        assert_eq!(buf[22], 0);
        assert_eq!(u32::from_le_bytes(buf[23..27].try_into().unwrap()), 0);
        assert_eq!(f32::from_le_bytes(buf[27..31].try_into().unwrap()), std::f32::consts::PI);
        assert_eq!(buf.len(), 31);
    }

    #[test]
    fn corrupt_input_rejected() {
        assert!(read_tensors(&mut &b"XXXX"[..]).is_err());
        let mut buf = Vec::new();
        write_tensors(&mut buf, &sample(), DType::F64).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_tensors(&mut buf.as_slice()).is_err());
    }
}
