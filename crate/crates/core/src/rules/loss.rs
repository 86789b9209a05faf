use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LossKind {
    /// `½‖ŷ − y‖²` per sample; error `ŷ − y`.
    Mse,
    /// `T · CE(softmax(ŷ/T), y)` per sample; error `softmax(ŷ/T) − y`.
    ///
    /// The factor `T` makes the error the exact gradient of the loss value.
    #[serde(rename = "ce")]
    CrossEntropy { temperature: f64 },
}

impl LossKind {
    pub fn name(&self) -> String {
        match self {
            LossKind::Mse => "mse".into(),
            LossKind::CrossEntropy { temperature } => format!("ce(T={temperature})"),
        }
    }

    fn check(&self) -> Result<()> {
        if let LossKind::CrossEntropy { temperature } = *self {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::Input(format!("temperature must be positive, got {temperature}")));
            }
        }
        Ok(())
    }
}

fn check_shapes<T>(output: &Array2<T>, target: &Array2<T>) -> Result<()> {
    if output.shape() != target.shape() {
        return Err(Error::dimension("compute_error", output.shape(), target.shape()));
    }
    Ok(())
}

fn check_distribution<T: Real>(target: &Array2<T>) -> Result<()> {
    for (i, row) in target.rows().into_iter().enumerate() {
        let mut sum = 0.0;
        for &v in row {
            let v = v.as_f64();
            if !(0.0..=1.0 + 1e-6).contains(&v) {
                return Err(Error::Input(format!("cross-entropy target row {i} has entry {v}")));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::Input(format!("cross-entropy target row {i} sums to {sum}")));
        }
    }
    Ok(())
}

/// Row-wise `softmax(z / t)`, shifted by the row maximum.
pub fn tempered_softmax<T: Real>(z: &Array2<T>, temperature: f64) -> Array2<T> {
    let inv_t = T::lit(1.0 / temperature);
    let mut out = z.mapv(|v| v * inv_t);
    for mut row in out.rows_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum: T = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Per-sample error `e = ∇_ŷ 𝓛`.
pub fn compute_error<T: Real>(loss: LossKind, output: &Array2<T>, target: &Array2<T>) -> Result<Array2<T>> {
    loss.check()?;
    check_shapes(output, target)?;
    match loss {
        LossKind::Mse => Ok(output - target),
        LossKind::CrossEntropy { temperature } => {
            check_distribution(target)?;
            Ok(tempered_softmax(output, temperature) - target)
        }
    }
}

/// Batch-mean loss value, accumulated in `f64`.
pub fn loss_value<T: Real>(loss: LossKind, output: &Array2<T>, target: &Array2<T>) -> Result<f64> {
    loss.check()?;
    check_shapes(output, target)?;
    let batch = output.nrows().max(1) as f64;
    let total = match loss {
        LossKind::Mse => {
            0.5 * output
                .iter()
                .zip(target)
                .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
                .sum::<f64>()
        }
        LossKind::CrossEntropy { temperature } => {
            check_distribution(target)?;
            let mut acc = 0.0;
            for (z, y) in output.axis_iter(Axis(0)).zip(target.axis_iter(Axis(0))) {
                let scaled: Vec<f64> = z.iter().map(|v| v.as_f64() / temperature).collect();
                let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                acc -= scaled.iter().zip(y).map(|(s, &t)| t.as_f64() * (s - lse)).sum::<f64>();
            }
            temperature * acc
        }
    };
    Ok(total / batch)
}

/// One-hot rows for class indices.
pub fn one_hot<T: Real>(labels: &[usize], classes: usize) -> Array2<T> {
    let mut out = Array2::zeros((labels.len(), classes));
    for (i, &c) in labels.iter().enumerate() {
        out[[i, c]] = T::one();
    }
    out
}

/// Index of the largest output per row.
pub fn argmax_rows<T: Real>(output: &Array2<T>) -> Vec<usize> {
    output
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
