//! The error projection `F` used by the modulated pass.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ForwardTrace, Layer, Network};
use crate::linalg::Matrix;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackMode {
    /// `W₁ᵀ W₂ᵀ ⋯ W_Lᵀ` applied as a chain of layer adjoints.
    Aligned,
    /// The same product, multiplied out into an explicit `in × out` matrix.
    Materialized,
    /// A fixed random `in × out` matrix.
    #[serde(rename = "random")]
    FixedRandom,
    /// `W₁ᵀ σ₁′ W₂ᵀ σ₂′ ⋯ W_Lᵀ` with the σ′ taken on each sample's clean pass.
    #[serde(rename = "exact")]
    ExactPerSample,
}

impl FeedbackMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "aligned" | "composition" => Some(FeedbackMode::Aligned),
            "materialized" | "matrix" => Some(FeedbackMode::Materialized),
            "random" | "fixed" | "fixed-random" => Some(FeedbackMode::FixedRandom),
            "exact" | "per-sample" => Some(FeedbackMode::ExactPerSample),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeedbackMode::Aligned => "aligned",
            FeedbackMode::Materialized => "materialized",
            FeedbackMode::FixedRandom => "random",
            FeedbackMode::ExactPerSample => "exact",
        }
    }
}

/// Steps between re-snapshots of the forward weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Refresh {
    Every(u64),
    Never,
}

impl Refresh {
    pub fn is_due(self, step: u64, last: u64) -> bool {
        match self {
            Refresh::Every(k) => step.saturating_sub(last) >= k.max(1),
            Refresh::Never => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackOperator<T> {
    pub mode: FeedbackMode,
    pub refresh: Refresh,
    pub last_refresh: u64,
    /// Layers captured at the last refresh (aligned and exact modes).
    pub snapshot: Vec<Layer<T>>,
    /// Explicit `in × out` matrix (materialized and random modes).
    pub matrix: Option<Matrix<T>>,
    input_features: usize,
    output_features: usize,
}

impl<T: Real> FeedbackOperator<T> {
    /// Weight-aligned operator snapshotted from `net` at step 0.
    pub fn new(mode: FeedbackMode, refresh: Refresh, net: &Network<T>) -> Result<Self> {
        if mode == FeedbackMode::FixedRandom {
            return Err(Error::Input("use FeedbackOperator::fixed_random for a random F".into()));
        }
        let mut op = FeedbackOperator {
            mode,
            refresh,
            last_refresh: 0,
            snapshot: Vec::new(),
            matrix: None,
            input_features: net.input_features(),
            output_features: net.output_features(),
        };
        op.resnapshot(net)?;
        Ok(op)
    }

    /// Entries drawn from `scale · U(−√(6/d_in), √(6/d_in))`.
    pub fn fixed_random<R: Rng + ?Sized>(input: usize, output: usize, scale: f64, rng: &mut R) -> Self {
        let bound = scale * (6.0 / input as f64).sqrt();
        let m = Array2::from_shape_fn((input, output), |_| T::lit(rng.random_range(-bound..=bound)));
        Self::fixed(m)
    }

    /// A never-refreshed operator with an explicit `in × out` matrix.
    pub fn fixed(matrix: Matrix<T>) -> Self {
        FeedbackOperator {
            mode: FeedbackMode::FixedRandom,
            refresh: Refresh::Never,
            last_refresh: 0,
            snapshot: Vec::new(),
            input_features: matrix.nrows(),
            output_features: matrix.ncols(),
            matrix: Some(matrix),
        }
    }

    pub fn input_features(&self) -> usize {
        self.input_features
    }

    pub fn output_features(&self) -> usize {
        self.output_features
    }

    fn resnapshot(&mut self, net: &Network<T>) -> Result<()> {
        self.input_features = net.input_features();
        self.output_features = net.output_features();
        match self.mode {
            FeedbackMode::Aligned | FeedbackMode::ExactPerSample => {
                self.snapshot = net.layers.clone();
            }
            FeedbackMode::Materialized => {
                let basis = Array2::eye(net.output_features());
                let mut rows = basis;
                for layer in net.layers.iter().rev() {
                    rows = layer.adjoint(&rows)?;
                }
                self.matrix = Some(rows.reversed_axes().as_standard_layout().into_owned());
            }
            FeedbackMode::FixedRandom => {}
        }
        Ok(())
    }

    /// Re-snapshots when `step − last_refresh ≥ k`; returns whether it did.
    pub fn refresh(&mut self, net: &Network<T>, step: u64) -> Result<bool> {
        if self.mode == FeedbackMode::FixedRandom || !self.refresh.is_due(step, self.last_refresh) {
            return Ok(false);
        }
        self.force_refresh(net, step)?;
        Ok(true)
    }

    pub fn force_refresh(&mut self, net: &Network<T>, step: u64) -> Result<()> {
        if self.mode != FeedbackMode::FixedRandom {
            self.resnapshot(net)?;
            self.last_refresh = step;
        }
        Ok(())
    }

    /// `F e` for every row of `e`. The exact mode reads σ′ and dropout masks
    /// from the clean pass in `trace`.
    pub fn apply(&self, e: &Array2<T>, trace: Option<&ForwardTrace<T>>) -> Result<Array2<T>> {
        if e.ncols() != self.output_features {
            return Err(Error::OperatorShape {
                produced: e.shape().to_vec(),
                expected: vec![e.nrows(), self.output_features],
            });
        }
        match self.mode {
            FeedbackMode::Materialized | FeedbackMode::FixedRandom => {
                let m = self
                    .matrix
                    .as_ref()
                    .ok_or_else(|| Error::State("feedback matrix missing".into()))?;
                Ok(e.dot(&m.t()))
            }
            FeedbackMode::Aligned => {
                let mut s = e.clone();
                for layer in self.snapshot.iter().rev() {
                    s = layer.adjoint(&s)?;
                }
                Ok(s)
            }
            FeedbackMode::ExactPerSample => {
                let trace = trace.ok_or_else(|| Error::State("exact feedback needs the clean trace".into()))?;
                let mut s = e.clone();
                let last = self.snapshot.len() - 1;
                for (l, layer) in self.snapshot.iter().enumerate().rev() {
                    if l < last {
                        if let Some(Some(m)) = trace.masks.get(l) {
                            s *= m;
                        }
                        s = layer.activation().vjp(&trace.clean.pre[l], &s);
                    }
                    s = layer.adjoint(&s)?;
                }
                Ok(s)
            }
        }
    }

    /// Explicit `in × out` matrix of the current operator (not available in
    /// the exact mode, whose action depends on the sample).
    pub fn to_matrix(&self) -> Result<Matrix<T>> {
        match self.mode {
            FeedbackMode::ExactPerSample => Err(Error::State("exact feedback has no fixed matrix".into())),
            _ => {
                let rows = self.apply(&Array2::eye(self.output_features), None)?;
                Ok(rows.reversed_axes().as_standard_layout().into_owned())
            }
        }
    }
}
