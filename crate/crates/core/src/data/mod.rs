//! Datasets, loaders, batching and synthetic teacher problems.

pub mod cache;
pub mod cifar;
pub mod idx;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cache::{read_cache, write_cache};
pub use cifar::{load_cifar_binary, load_cifar_dir, ChannelNorm, CifarVariant};
pub use idx::{load_mnist_dir, load_mnist_idx, parse_idx_header};

use crate::error::{DataError, Result};
use crate::layers::{Activation, DenseLayer, InputShape, Layer, Network};
use crate::rules::one_hot;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets<T> {
    Classes { labels: Vec<usize>, num_classes: usize },
    Values(Array2<T>),
}

/// Immutable samples in rows; images are flattened channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub inputs: Array2<T>,
    pub targets: Targets<T>,
    pub split: Split,
    pub shape: InputShape,
}

impl<T: Real> Dataset<T> {
    pub fn classification(
        inputs: Array2<T>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
        shape: InputShape,
    ) -> Result<Self> {
        let ds = Dataset {
            inputs,
            targets: Targets::Classes { labels, num_classes },
            split,
            shape,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn regression(inputs: Array2<T>, targets: Array2<T>, split: Split) -> Result<Self> {
        let ds = Dataset {
            shape: InputShape::flat(inputs.ncols()),
            inputs,
            targets: Targets::Values(targets),
            split,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.inputs.ncols() != self.shape.features() {
            return Err(DataError::Format(format!(
                "{} input columns for shape {:?}",
                self.inputs.ncols(),
                self.shape
            )));
        }
        let n = self.inputs.nrows();
        match &self.targets {
            Targets::Classes { labels, num_classes } => {
                if labels.len() != n {
                    return Err(DataError::CountMismatch {
                        images: n,
                        labels: labels.len(),
                    });
                }
                if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= *num_classes) {
                    return Err(DataError::Format(format!("label {l} of sample {i} ≥ {num_classes} classes")));
                }
            }
            Targets::Values(v) => {
                if v.nrows() != n {
                    return Err(DataError::CountMismatch {
                        images: n,
                        labels: v.nrows(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes { labels, .. } => Some(labels),
            Targets::Values(_) => None,
        }
    }

    /// Class count, or the target width for regression sets.
    pub fn output_features(&self) -> usize {
        match &self.targets {
            Targets::Classes { num_classes, .. } => *num_classes,
            Targets::Values(v) => v.ncols(),
        }
    }

    /// Inputs and targets (one-hot for classes) of the given rows.
    pub fn batch(&self, indices: &[usize]) -> (Array2<T>, Array2<T>) {
        let x = self.inputs.select(Axis(0), indices);
        let y = match &self.targets {
            Targets::Classes { labels, num_classes } => {
                one_hot(&indices.iter().map(|&i| labels[i]).collect::<Vec<_>>(), *num_classes)
            }
            Targets::Values(v) => v.select(Axis(0), indices),
        };
        (x, y)
    }

    /// The first `n` samples (all of them if `n` is larger).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let targets = match &self.targets {
            Targets::Classes { labels, num_classes } => Targets::Classes {
                labels: labels[..idx.len()].to_vec(),
                num_classes: *num_classes,
            },
            Targets::Values(v) => Targets::Values(v.select(Axis(0), &idx)),
        };
        Dataset {
            inputs: self.inputs.select(Axis(0), &idx),
            targets,
            split: self.split,
            shape: self.shape,
        }
    }

    pub fn batches(&self, batch_size: usize, shuffle_seed: Option<u64>) -> impl Iterator<Item = (Array2<T>, Array2<T>)> + '_ {
        batch_indices(self.len(), batch_size, shuffle_seed)
            .into_iter()
            .map(move |idx| self.batch(&idx))
    }
}

/// Index batches over `0..n`, shuffled by `seed` when given. The last batch
/// may be partial.
pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Gaussian inputs pushed through a given teacher.
pub fn teacher_dataset<T: Real, R: Rng + ?Sized>(teacher: &Network<T>, samples: usize, rng: &mut R) -> Result<Dataset<T>> {
    let x = Array2::from_shape_fn((samples, teacher.input_features()), |_| T::sample_normal(rng));
    let y = teacher.predict(&x)?;
    Dataset::regression(x, y, Split::Train)
}

/// A linear orthogonal teacher with `widths.len() − 1` layers and a
/// dataset of its outputs on Gaussian inputs.
pub fn synthetic_regression<T: Real>(widths: &[usize], samples: usize, seed: u64) -> Result<(Network<T>, Dataset<T>)> {
    if widths.len() < 2 {
        return Err(crate::Error::Input("need at least input and output widths".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = widths
        .windows(2)
        .map(|w| Layer::Dense(DenseLayer::orthogonal(w[1], w[0], Activation::Identity, &mut rng)))
        .collect();
    let teacher = Network::new(layers)?;
    let ds = teacher_dataset(&teacher, samples, &mut rng)?;
    Ok((teacher, ds))
}

/// Gaussian inputs labelled by the argmax of a random linear teacher; the
/// first `train` samples form the training split.
pub fn synthetic_classification<T: Real>(
    features: usize,
    classes: usize,
    train: usize,
    test: usize,
    seed: u64,
) -> Result<(Dataset<T>, Dataset<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Array2::from_shape_fn((classes, features), |_| T::sample_normal(&mut rng));
    let x = Array2::from_shape_fn((train + test, features), |_| T::sample_normal(&mut rng));
    let labels = crate::rules::argmax_rows(&x.dot(&w.t()));
    let split = |range: std::ops::Range<usize>, split: Split| {
        let idx: Vec<usize> = range.collect();
        Dataset::classification(
            x.select(Axis(0), &idx),
            idx.iter().map(|&i| labels[i]).collect(),
            classes,
            split,
            InputShape::flat(features),
        )
    };
    Ok((split(0..train, Split::Train)?, split(train..train + test, Split::Test)?))
}
