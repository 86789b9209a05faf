use ndarray::{Array2, Array4};

use crate::error::{Error, Result};
use crate::layers::{DenseLayer, Layer, Network};
use crate::scalar::Real;

/// Parameter delta of one layer, already scaled by `−η` and including decay.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamDelta<T> {
    Dense(Array2<T>),
    /// Kernel-space delta; BCOP layers map it onto their factors on apply.
    Conv(Array4<T>),
    None,
}

impl<T: Real> ParamDelta<T> {
    pub fn shape(&self) -> &[usize] {
        match self {
            ParamDelta::Dense(d) => d.shape(),
            ParamDelta::Conv(d) => d.shape(),
            ParamDelta::None => &[],
        }
    }

    /// Flat view for cosine and max-norm comparisons.
    pub fn as_slice(&self) -> &[T] {
        match self {
            ParamDelta::Dense(d) => d.as_slice().expect("standard layout"),
            ParamDelta::Conv(d) => d.as_slice().expect("standard layout"),
            ParamDelta::None => &[],
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.as_slice()
            .iter()
            .zip(other.as_slice())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Which kind of transported signal produced a delta.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalKind {
    Backprop,
    ForwardOnly,
    Feedback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerUpdate<T> {
    pub delta: ParamDelta<T>,
    /// The rule's estimate of `∂𝓛/∂h_ℓ` for this layer's output, per sample.
    pub signal: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateSet<T> {
    pub kind: SignalKind,
    pub layers: Vec<LayerUpdate<T>>,
    pub lr: f64,
    pub weight_decay: f64,
}

impl<T: Real> UpdateSet<T> {
    pub fn delta(&self, layer: usize) -> &ParamDelta<T> {
        &self.layers[layer].delta
    }

    pub fn signal(&self, layer: usize) -> &Array2<T> {
        &self.layers[layer].signal
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.delta.as_slice().iter().all(|&v| v == T::zero()))
    }
}

/// `−η (Σ_b s_b p_bᵀ / B + λ W)` for one layer, given the post-synaptic
/// signal `s` and the pre-synaptic activation `p`.
pub(crate) fn layer_delta<T: Real>(
    layer: &Layer<T>,
    signal: &Array2<T>,
    presynaptic: &Array2<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<ParamDelta<T>> {
    let batch = T::lit(signal.nrows().max(1) as f64);
    let neg_lr = T::lit(-lr);
    let decay = T::lit(weight_decay);
    match layer {
        Layer::Dense(d) => {
            if signal.ncols() != d.out_features() || presynaptic.ncols() != d.in_features() {
                return Err(Error::dimension("dense delta", signal.shape(), presynaptic.shape()));
            }
            let mut g = DenseLayer::outer(signal, presynaptic) / batch;
            if weight_decay != 0.0 {
                g.scaled_add(decay, &d.weight);
            }
            Ok(ParamDelta::Dense(g * neg_lr))
        }
        Layer::Conv(c) => {
            let mut g = c.geometry.kernel_adjoint(presynaptic, signal)? / batch;
            if weight_decay != 0.0 {
                g.scaled_add(decay, &c.kernel);
            }
            Ok(ParamDelta::Conv(g * neg_lr))
        }
        Layer::Pool(_) => Ok(ParamDelta::None),
    }
}

/// `W ← W + δW` on every layer. Does not re-orthogonalize.
pub fn apply_updates<T: Real>(net: &mut Network<T>, updates: &UpdateSet<T>) -> Result<()> {
    if updates.layers.len() != net.depth() {
        return Err(Error::dimension("apply_updates", &[updates.layers.len()], &[net.depth()]));
    }
    for (i, (layer, upd)) in net.layers.iter_mut().zip(&updates.layers).enumerate() {
        apply_one(layer, &upd.delta).map_err(|e| e.at_layer(i))?;
    }
    Ok(())
}

fn apply_one<T: Real>(layer: &mut Layer<T>, delta: &ParamDelta<T>) -> Result<()> {
    match (layer, delta) {
        (Layer::Dense(d), ParamDelta::Dense(dw)) => {
            if d.weight.dim() != dw.dim() {
                return Err(Error::dimension("apply_updates", d.weight.shape(), dw.shape()));
            }
            d.weight += dw;
            d.orthogonalized = false;
        }
        (Layer::Conv(c), ParamDelta::Conv(dk)) => {
            if c.kernel.shape() != dk.shape() {
                return Err(Error::dimension("apply_updates", c.kernel.shape(), dk.shape()));
            }
            match c.bcop.as_mut() {
                Some(p) => {
                    let factor_delta = p.pullback(dk)?;
                    p.add_assign(&factor_delta)?;
                    c.refresh_kernel()?;
                }
                None => c.kernel += dk,
            }
            c.orthogonalized = false;
        }
        (Layer::Pool(_), ParamDelta::None) => {}
        (l, d) => {
            return Err(Error::dimension("apply_updates", &[l.in_features(), l.out_features()], d.shape()));
        }
    }
    Ok(())
}
