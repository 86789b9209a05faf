//! Big-endian IDX files (MNIST), optionally gzipped.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ndarray::Array2;

use super::{Dataset, Split};
use crate::error::{DataError, Result};
use crate::layers::InputShape;
use crate::scalar::Real;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Reads a whole file, inflating it when it starts with the gzip magic.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = std::fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxHeader {
    pub magic: u32,
    pub dims: Vec<usize>,
}

impl IdxHeader {
    pub fn len(&self) -> usize {
        4 + 4 * self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.first().is_none_or(|&n| n == 0)
    }

    pub fn payload_len(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Parses the magic and dimension words. The low byte of the magic is the
/// number of dimensions; only unsigned-byte data (type 0x08) is accepted.
pub fn parse_idx_header(bytes: &[u8], expected_magic: u32, path: &Path) -> Result<IdxHeader, DataError> {
    let word = |i: usize| -> Result<u32, DataError> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| DataError::Truncated {
                path: path.to_path_buf(),
                offset: bytes.len(),
                needed: 4 * i + 4 - bytes.len(),
            })
    };
    let magic = word(0)?;
    if magic != expected_magic {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected: expected_magic,
            found: magic,
        });
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (1..=ndim).map(|i| word(i).map(|d| d as usize)).collect::<Result<_, _>>()?;
    Ok(IdxHeader { magic, dims })
}

fn payload<'a>(bytes: &'a [u8], header: &IdxHeader, path: &Path) -> Result<&'a [u8], DataError> {
    let start = header.len();
    let end = start + header.payload_len();
    bytes.get(start..end).ok_or_else(|| DataError::Truncated {
        path: path.to_path_buf(),
        offset: bytes.len(),
        needed: end - bytes.len(),
    })
}

/// Images as an `N × (rows·cols)` byte buffer plus the image extents.
pub fn read_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize), DataError> {
    let bytes = read_maybe_gz(path)?;
    let header = parse_idx_header(&bytes, IMAGES_MAGIC, path)?;
    let [n, rows, cols] = header.dims[..] else {
        return Err(DataError::Format(format!("{}: expected 3 dimensions", path.display())));
    };
    Ok((payload(&bytes, &header, path)?.to_vec(), n, rows, cols))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>, DataError> {
    let bytes = read_maybe_gz(path)?;
    let header = parse_idx_header(&bytes, LABELS_MAGIC, path)?;
    Ok(payload(&bytes, &header, path)?.to_vec())
}

/// Pixels scaled to `[0, 1]`, flattened row-major.
pub fn load_mnist_idx<T: Real>(images: &Path, labels: &Path, split: Split) -> Result<Dataset<T>> {
    let (pixels, n, rows, cols) = read_idx_images(images)?;
    let labels = read_idx_labels(labels)?;
    if labels.len() != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: labels.len(),
        }
        .into());
    }
    let scale = T::lit(1.0 / 255.0);
    let inputs = Array2::from_shape_fn((n, rows * cols), |(i, j)| T::lit(pixels[i * rows * cols + j] as f64) * scale);
    let ds = Dataset::classification(
        inputs,
        labels.into_iter().map(usize::from).collect(),
        10,
        split,
        InputShape {
            channels: 1,
            height: rows,
            width: cols,
        },
    )?;
    Ok(ds)
}

fn find(dir: &Path, stem: &str) -> Result<PathBuf, DataError> {
    for name in [format!("{stem}.gz"), stem.to_string(), stem.replacen("-idx", ".idx", 1)] {
        let p = dir.join(&name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(DataError::Io {
        path: dir.join(stem),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such IDX file (plain or .gz)"),
    })
}

/// Loads the standard `train-*` / `t10k-*` files from a directory.
pub fn load_mnist_dir<T: Real>(dir: &Path, split: Split) -> Result<Dataset<T>> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = find(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let labels = find(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    load_mnist_idx(&images, &labels, split)
}
