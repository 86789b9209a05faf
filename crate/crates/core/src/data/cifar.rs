//! CIFAR-10/100 binary records.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::idx::read_maybe_gz;
use super::{Dataset, Split};
use crate::error::{DataError, Result};
use crate::layers::InputShape;
use crate::scalar::Real;

pub const PIXELS: usize = 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    /// Fine labels unless `coarse`.
    Cifar100 { coarse: bool },
}

impl CifarVariant {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 { .. } => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + PIXELS
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 { coarse: true } => 20,
            CifarVariant::Cifar100 { coarse: false } => 100,
        }
    }

    fn label(self, record: &[u8]) -> usize {
        match self {
            CifarVariant::Cifar10 | CifarVariant::Cifar100 { coarse: true } => record[0] as usize,
            CifarVariant::Cifar100 { coarse: false } => record[1] as usize,
        }
    }
}

/// Per-channel standardization applied after scaling pixels to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelNorm {
    pub fn cifar10() -> Self {
        ChannelNorm {
            mean: [0.4914, 0.4822, 0.4465],
            std: [0.2470, 0.2435, 0.2616],
        }
    }

    pub fn cifar100() -> Self {
        ChannelNorm {
            mean: [0.5071, 0.4865, 0.4409],
            std: [0.2673, 0.2564, 0.2762],
        }
    }

    pub fn for_variant(v: CifarVariant) -> Self {
        match v {
            CifarVariant::Cifar10 => Self::cifar10(),
            CifarVariant::Cifar100 { .. } => Self::cifar100(),
        }
    }

    pub fn identity() -> Self {
        ChannelNorm {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

/// Parses concatenated records from each file, channel-major per image.
pub fn load_cifar_binary<T: Real>(
    paths: &[PathBuf],
    variant: CifarVariant,
    norm: &ChannelNorm,
    split: Split,
) -> Result<Dataset<T>> {
    let record = variant.record_len();
    let mut labels = Vec::new();
    let mut pixels: Vec<u8> = Vec::new();
    for path in paths {
        let bytes = read_maybe_gz(path)?;
        if bytes.is_empty() {
            return Err(DataError::RecordLength {
                path: path.clone(),
                len: 0,
                record,
            }
            .into());
        }
        let whole = bytes.len() / record * record;
        if whole != bytes.len() {
            return Err(DataError::Truncated {
                path: path.clone(),
                offset: whole,
                needed: record - (bytes.len() - whole),
            }
            .into());
        }
        for r in bytes.chunks_exact(record) {
            labels.push(variant.label(r));
            pixels.extend_from_slice(&r[variant.label_bytes()..]);
        }
    }
    let n = labels.len();
    let plane = PIXELS / 3;
    let inputs = Array2::from_shape_fn((n, PIXELS), |(i, j)| {
        let c = j / plane;
        let v = pixels[i * PIXELS + j] as f64 / 255.0;
        T::lit((v - norm.mean[c]) / norm.std[c])
    });
    Dataset::classification(
        inputs,
        labels,
        variant.num_classes(),
        split,
        InputShape {
            channels: 3,
            height: 32,
            width: 32,
        },
    )
}

fn existing(dir: &Path, names: &[String]) -> Result<Vec<PathBuf>, DataError> {
    names
        .iter()
        .map(|n| {
            [dir.join(n), dir.join(format!("{n}.gz"))]
                .into_iter()
                .find(|p| p.is_file())
                .ok_or_else(|| DataError::Io {
                    path: dir.join(n),
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "missing CIFAR batch file"),
                })
        })
        .collect()
}

/// Standard file names: `data_batch_{1..5}.bin` / `test_batch.bin` for
/// CIFAR-10, `train.bin` / `test.bin` for CIFAR-100.
pub fn load_cifar_dir<T: Real>(dir: &Path, variant: CifarVariant, split: Split) -> Result<Dataset<T>> {
    let names: Vec<String> = match (variant, split) {
        (CifarVariant::Cifar10, Split::Train) => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        (CifarVariant::Cifar10, Split::Test) => vec!["test_batch.bin".into()],
        (CifarVariant::Cifar100 { .. }, Split::Train) => vec!["train.bin".into()],
        (CifarVariant::Cifar100 { .. }, Split::Test) => vec!["test.bin".into()],
    };
    load_cifar_binary(&existing(dir, &names)?, variant, &ChannelNorm::for_variant(variant), split)
}
