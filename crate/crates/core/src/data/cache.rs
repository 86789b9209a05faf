//! Versioned binary cache: header plus raw little-endian scalars.
//!
//! Layout: `FOTONDS\0`, version `u32`, precision tag `u8`, split `u8`,
//! channels/height/width `u32`, samples `u64`, then either class targets
//! (`0u8`, classes `u32`, one `u32` per label) or value targets (`1u8`,
//! width `u32`, `N × width` scalars), then `N × features` input scalars.

use std::path::Path;

use ndarray::Array2;

use super::{Dataset, Split, Targets};
use crate::error::{DataError, Error, Result};
use crate::layers::InputShape;
use crate::scalar::Real;

pub const CACHE_MAGIC: &[u8; 8] = b"FOTONDS\0";
pub const CACHE_VERSION: u32 = 1;

pub fn encode_cache<T: Real>(ds: &Dataset<T>) -> Vec<u8> {
    let mut out = CACHE_MAGIC.to_vec();
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.push(T::PRECISION.tag());
    out.push(match ds.split {
        Split::Train => 0,
        Split::Test => 1,
    });
    for d in [ds.shape.channels, ds.shape.height, ds.shape.width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    match &ds.targets {
        Targets::Classes { labels, num_classes } => {
            out.push(0);
            out.extend_from_slice(&(*num_classes as u32).to_le_bytes());
            for &l in labels {
                out.extend_from_slice(&(l as u32).to_le_bytes());
            }
        }
        Targets::Values(v) => {
            out.push(1);
            out.extend_from_slice(&(v.ncols() as u32).to_le_bytes());
            v.iter().for_each(|&s| s.write_le(&mut out));
        }
    }
    ds.inputs.iter().for_each(|&s| s.write_le(&mut out));
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self.pos + n;
        let s = self.bytes.get(self.pos..end).ok_or_else(|| DataError::Truncated {
            path: self.path.to_path_buf(),
            offset: self.bytes.len(),
            needed: end - self.bytes.len(),
        })?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DataError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn scalars<T: Real>(&mut self, rows: usize, cols: usize) -> Result<Array2<T>, DataError> {
        let width = T::PRECISION.tag() as usize;
        let raw = self.take(rows * cols * width)?;
        let v = raw.chunks_exact(width).map(T::read_le).collect();
        Ok(Array2::from_shape_vec((rows, cols), v).expect("sized above"))
    }
}

pub fn decode_cache<T: Real>(bytes: &[u8], path: &Path) -> Result<Dataset<T>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != CACHE_MAGIC {
        return Err(DataError::Format(format!("{}: not a dataset cache", path.display())).into());
    }
    let version = r.u32()?;
    if version != CACHE_VERSION {
        return Err(DataError::Format(format!("{}: cache version {version}, expected {CACHE_VERSION}", path.display())).into());
    }
    let tag = r.u8()?;
    if tag != T::PRECISION.tag() {
        return Err(DataError::Format(format!(
            "{}: cache holds {tag}-byte scalars, requested {:?}",
            path.display(),
            T::PRECISION
        ))
        .into());
    }
    let split = match r.u8()? {
        0 => Split::Train,
        1 => Split::Test,
        s => return Err(DataError::Format(format!("unknown split tag {s}")).into()),
    };
    let shape = InputShape {
        channels: r.u32()? as usize,
        height: r.u32()? as usize,
        width: r.u32()? as usize,
    };
    let n = r.u64()? as usize;
    let targets = match r.u8()? {
        0 => {
            let num_classes = r.u32()? as usize;
            let labels = (0..n).map(|_| r.u32().map(|l| l as usize)).collect::<Result<_, _>>()?;
            Targets::Classes { labels, num_classes }
        }
        1 => {
            let width = r.u32()? as usize;
            Targets::Values(r.scalars(n, width)?)
        }
        k => return Err(DataError::Format(format!("unknown target kind {k}")).into()),
    };
    let inputs = r.scalars(n, shape.features())?;
    if r.pos != bytes.len() {
        return Err(DataError::Format(format!("{} trailing bytes after cache payload", bytes.len() - r.pos)).into());
    }
    let ds = Dataset {
        inputs,
        targets,
        split,
        shape,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn write_cache<T: Real>(ds: &Dataset<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_cache(ds)).map_err(|e| Error::io(path, e))
}

pub fn read_cache<T: Real>(path: &Path) -> Result<Dataset<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cache(&bytes, path)
}
