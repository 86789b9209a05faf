use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// Element-wise (or, for GroupSort, group-wise) non-linearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    /// Sorts each consecutive pair of features ascending. An odd trailing
    /// feature passes through unchanged.
    GroupSort,
}

impl Activation {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "identity" | "linear" | "none" => Some(Activation::Identity),
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "groupsort" | "group-sort" => Some(Activation::GroupSort),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::GroupSort => "groupsort",
        }
    }

    pub fn is_elementwise(self) -> bool {
        !matches!(self, Activation::GroupSort)
    }

    /// Applies σ row by row (rows are samples).
    pub fn apply<T: Real>(self, pre: &Array2<T>) -> Array2<T> {
        match self {
            Activation::Identity => pre.clone(),
            Activation::Relu => pre.mapv(|x| x.max(T::zero())),
            Activation::Tanh => pre.mapv(|x| x.tanh()),
            Activation::GroupSort => {
                let mut out = pre.clone();
                for mut row in out.rows_mut() {
                    let n = row.len();
                    let mut i = 0;
                    while i + 1 < n {
                        if row[i] > row[i + 1] {
                            row.swap(i, i + 1);
                        }
                        i += 2;
                    }
                }
                out
            }
        }
    }

    /// Scalar derivative σ′(x). GroupSort has no element-wise derivative.
    pub fn derivative_at<T: Real>(self, x: T) -> Option<T> {
        match self {
            Activation::Identity => Some(T::one()),
            Activation::Relu => Some(if x > T::zero() { T::one() } else { T::zero() }),
            Activation::Tanh => {
                let t = x.tanh();
                Some(T::one() - t * t)
            }
            Activation::GroupSort => None,
        }
    }

    /// Element-wise σ′ evaluated at `pre`; `None` for GroupSort.
    pub fn derivative<T: Real>(self, pre: &Array2<T>) -> Option<Array2<T>> {
        if !self.is_elementwise() {
            return None;
        }
        Some(pre.mapv(|x| self.derivative_at(x).expect("element-wise")))
    }

    /// Vector-Jacobian product `J_σ(pre)ᵀ g`, row by row.
    ///
    /// For element-wise kinds this is `σ′(pre) ⊙ g`; for GroupSort it undoes
    /// the per-pair permutation chosen on `pre`.
    pub fn vjp<T: Real>(self, pre: &Array2<T>, grad: &Array2<T>) -> Array2<T> {
        match self {
            Activation::Identity => grad.clone(),
            Activation::GroupSort => {
                let mut out = grad.clone();
                for (a, mut g) in pre.rows().into_iter().zip(out.rows_mut()) {
                    let n = a.len();
                    let mut i = 0;
                    while i + 1 < n {
                        if a[i] > a[i + 1] {
                            g.swap(i, i + 1);
                        }
                        i += 2;
                    }
                }
                out
            }
            _ => {
                let mut out = grad.clone();
                Zip::from(&mut out).and(pre).for_each(|g, &a| {
                    *g *= self.derivative_at(a).expect("element-wise");
                });
                out
            }
        }
    }

    /// Jacobian-vector product `J_σ(pre) d`.
    /// Every supported Jacobian is symmetric (diagonal, or a product of
    /// disjoint transpositions), so this coincides with [`Self::vjp`].
    pub fn jvp<T: Real>(self, pre: &Array2<T>, dir: &Array2<T>) -> Array2<T> {
        self.vjp(pre, dir)
    }
}
