//! Network building blocks and the forward trace shared by all rules.
//!
//! Batches are row-major: one sample per row. Convolution and pooling layers
//! read their features as channel-major `C × H × W` maps.

mod activation;
pub mod bcop;
pub mod conv;
mod dense;
mod pool;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use activation::Activation;
pub use bcop::Bcop;
pub use conv::{conv_adjoint, ConvGeometry, ConvLayer, Padding};
pub use dense::DenseLayer;
pub use pool::PoolLayer;

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Dense(DenseLayer<T>),
    Conv(ConvLayer<T>),
    Pool(PoolLayer),
}

impl<T: Real> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv(_) => "conv",
            Layer::Pool(_) => "pool",
        }
    }

    pub fn in_features(&self) -> usize {
        match self {
            Layer::Dense(l) => l.in_features(),
            Layer::Conv(l) => l.in_features(),
            Layer::Pool(l) => l.in_features(),
        }
    }

    pub fn out_features(&self) -> usize {
        match self {
            Layer::Dense(l) => l.out_features(),
            Layer::Conv(l) => l.out_features(),
            Layer::Pool(l) => l.out_features(),
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            Layer::Dense(l) => l.activation,
            Layer::Conv(l) => l.activation,
            Layer::Pool(_) => Activation::Identity,
        }
    }

    pub fn dropout(&self) -> f64 {
        match self {
            Layer::Dense(l) => l.dropout,
            Layer::Conv(l) => l.dropout,
            Layer::Pool(_) => 0.0,
        }
    }

    pub fn has_parameters(&self) -> bool {
        !matches!(self, Layer::Pool(_))
    }

    /// Linear part only.
    pub fn linear(&self, input: &Array2<T>) -> Result<Array2<T>> {
        match self {
            Layer::Dense(l) => l.linear(input),
            Layer::Conv(l) => l.linear(input),
            Layer::Pool(l) => l.forward(input),
        }
    }

    pub fn forward(&self, input: &Array2<T>, mask: Option<&Array2<T>>) -> Result<(Array2<T>, Array2<T>)> {
        match self {
            Layer::Dense(l) => l.forward(input, mask),
            Layer::Conv(l) => l.forward(input, mask),
            Layer::Pool(l) => {
                let pre = l.forward(input)?;
                let mut post = pre.clone();
                if let Some(m) = mask {
                    post *= m;
                }
                Ok((pre, post))
            }
        }
    }

    /// Adjoint of the linear part.
    pub fn adjoint(&self, signal: &Array2<T>) -> Result<Array2<T>> {
        match self {
            Layer::Dense(l) => l.adjoint(signal),
            Layer::Conv(l) => l.adjoint(signal),
            Layer::Pool(l) => l.adjoint(signal),
        }
    }

    /// Gram residual of the orthogonally constrained parameters, if any.
    pub fn gram_residual(&self) -> Option<f64> {
        match self {
            Layer::Dense(l) => Some(l.gram_residual().as_f64()),
            Layer::Conv(l) => l.bcop.as_ref().map(|b| b.gram_residual().as_f64()),
            Layer::Pool(_) => None,
        }
    }

    pub fn orthogonalized(&self) -> bool {
        match self {
            Layer::Dense(l) => l.orthogonalized,
            Layer::Conv(l) => l.orthogonalized,
            Layer::Pool(_) => true,
        }
    }

    /// Rescale + Björck on the weight (dense) or on the BCOP factors (conv).
    /// Unparametrized conv kernels and pooling are left alone.
    pub fn orthogonalize(&mut self, iters: usize) -> Result<()> {
        match self {
            Layer::Dense(l) => {
                l.weight = crate::linalg::project_semi_orthogonal(&l.weight, iters)?;
                l.orthogonalized = true;
            }
            Layer::Conv(l) => {
                if let Some(p) = l.bcop.as_mut() {
                    p.orthogonalize(iters)?;
                    l.refresh_kernel()?;
                    l.orthogonalized = true;
                }
            }
            Layer::Pool(_) => {}
        }
        Ok(())
    }
}

/// How parametric layers are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    /// Semi-orthogonal dense weights and BCOP (circular) convolutions.
    Orthogonal,
    /// He-normal weights and plain zero-padded convolutions.
    Gaussian,
}

impl Init {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "orthogonal" | "ortho" => Some(Init::Orthogonal),
            "gaussian" | "normal" | "he" => Some(Init::Gaussian),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Init::Orthogonal => "orthogonal",
            Init::Gaussian => "gaussian",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn flat(features: usize) -> Self {
        InputShape {
            channels: features,
            height: 1,
            width: 1,
        }
    }

    pub fn features(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv { out_ch: usize, kernel: usize },
    Pool { window: usize },
    Dense { out: usize },
}

/// Clean or modulated activations of one pass. `pre[i]`, `post[i]` belong to
/// layer `i` (0-based); the input is kept separately.
#[derive(Debug, Clone, PartialEq)]
pub struct Pass<T> {
    pub input: Array2<T>,
    pub pre: Vec<Array2<T>>,
    pub post: Vec<Array2<T>>,
}

impl<T: Real> Pass<T> {
    /// `h_ℓ` with `ℓ = 0` the input and `ℓ = L` the output.
    pub fn h(&self, l: usize) -> &Array2<T> {
        if l == 0 {
            &self.input
        } else {
            &self.post[l - 1]
        }
    }

    pub fn output(&self) -> &Array2<T> {
        self.post.last().unwrap_or(&self.input)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    pub clean: Pass<T>,
    pub modulated: Option<Pass<T>>,
    /// One optional inverted-dropout mask per layer, shared by both passes.
    pub masks: Vec<Option<Array2<T>>>,
}

impl<T: Real> ForwardTrace<T> {
    pub fn modulated(&self) -> Result<&Pass<T>> {
        self.modulated
            .as_ref()
            .ok_or_else(|| Error::State("modulated pass has not been run".into()))
    }

    pub fn batch(&self) -> usize {
        self.clean.input.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> Network<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Input("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_features() != pair[1].in_features() {
                return Err(Error::dimension(
                    "network chain",
                    &[pair[0].out_features()],
                    &[pair[1].in_features()],
                )
                .at_layer(i + 1));
            }
        }
        Ok(Network { layers })
    }

    /// Fully connected net: hidden layers use `activation`, the output layer
    /// is linear and never dropped out.
    pub fn mlp<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
        init: Init,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let specs: Vec<LayerSpec> = hidden
            .iter()
            .chain(std::iter::once(&output))
            .map(|&out| LayerSpec::Dense { out })
            .collect();
        Self::build(InputShape::flat(input), &specs, activation, init, dropout, rng)
    }

    /// Builds a network from layer specs; the final spec must be dense and
    /// becomes the linear output layer.
    pub fn build<R: Rng + ?Sized>(
        input: InputShape,
        specs: &[LayerSpec],
        activation: Activation,
        init: Init,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !matches!(specs.last(), Some(LayerSpec::Dense { .. })) {
            return Err(Error::Input("the last layer must be dense".into()));
        }
        let mut shape = input;
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let last = i + 1 == specs.len();
            let act = if last { Activation::Identity } else { activation };
            let p = if last { 0.0 } else { dropout };
            let layer = match *spec {
                LayerSpec::Dense { out } => {
                    let inp = shape.features();
                    let l = match init {
                        Init::Orthogonal => DenseLayer::orthogonal(out, inp, act, rng),
                        Init::Gaussian => DenseLayer::gaussian(out, inp, act, rng),
                    };
                    shape = InputShape::flat(out);
                    Layer::Dense(l.with_dropout(p))
                }
                LayerSpec::Conv { out_ch, kernel } => {
                    let l = match init {
                        Init::Orthogonal => {
                            let g = ConvGeometry::circular(shape.channels, out_ch, shape.height, shape.width, kernel);
                            ConvLayer::bcop(g, act, rng)
                        }
                        Init::Gaussian => {
                            let g = ConvGeometry::same(shape.channels, out_ch, shape.height, shape.width, kernel);
                            ConvLayer::gaussian(g, act, rng)
                        }
                    }
                    .map_err(|e| e.at_layer(i))?;
                    shape = InputShape {
                        channels: out_ch,
                        height: l.geometry.out_height(),
                        width: l.geometry.out_width(),
                    };
                    Layer::Conv(l.with_dropout(p))
                }
                LayerSpec::Pool { window } => {
                    let l = PoolLayer::new(shape.channels, shape.height, shape.width, window, window)
                        .map_err(|e| e.at_layer(i))?;
                    shape = InputShape {
                        channels: shape.channels,
                        height: l.out_height(),
                        width: l.out_width(),
                    };
                    Layer::Pool(l)
                }
            };
            layers.push(layer);
        }
        Network::new(layers)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_features(&self) -> usize {
        self.layers[0].in_features()
    }

    pub fn output_features(&self) -> usize {
        self.layers[self.layers.len() - 1].out_features()
    }

    /// Inverted-dropout masks (entries `0` or `1/(1−p)`) for one step.
    pub fn sample_masks<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<Option<Array2<T>>> {
        self.layers
            .iter()
            .map(|l| {
                let p = l.dropout();
                (p > 0.0).then(|| {
                    let keep = T::lit(1.0 / (1.0 - p));
                    Array2::from_shape_fn((batch, l.out_features()), |_| {
                        if rng.random::<f64>() < p {
                            T::zero()
                        } else {
                            keep
                        }
                    })
                })
            })
            .collect()
    }

    pub fn run(&self, input: &Array2<T>, masks: &[Option<Array2<T>>]) -> Result<Pass<T>> {
        let mut pre = Vec::with_capacity(self.depth());
        let mut post: Vec<Array2<T>> = Vec::with_capacity(self.depth());
        for (i, layer) in self.layers.iter().enumerate() {
            let h = post.last().unwrap_or(input);
            let mask = masks.get(i).and_then(Option::as_ref);
            let (a, b) = layer.forward(h, mask).map_err(|e| e.at_layer(i))?;
            pre.push(a);
            post.push(b);
        }
        Ok(Pass {
            input: input.clone(),
            pre,
            post,
        })
    }

    /// Clean pass; the masks are stored for reuse by the modulated pass.
    pub fn trace(&self, input: &Array2<T>, masks: Vec<Option<Array2<T>>>) -> Result<ForwardTrace<T>> {
        let clean = self.run(input, &masks)?;
        Ok(ForwardTrace {
            clean,
            modulated: None,
            masks,
        })
    }

    /// Second pass on `modulated_input` with the clean pass's masks.
    pub fn modulate(&self, trace: &mut ForwardTrace<T>, modulated_input: &Array2<T>) -> Result<()> {
        if modulated_input.dim() != trace.clean.input.dim() {
            return Err(Error::OperatorShape {
                produced: modulated_input.shape().to_vec(),
                expected: trace.clean.input.shape().to_vec(),
            });
        }
        trace.modulated = Some(self.run(modulated_input, &trace.masks)?);
        Ok(())
    }

    /// Inference without dropout.
    pub fn predict(&self, input: &Array2<T>) -> Result<Array2<T>> {
        let mut h = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h, None).map_err(|e| e.at_layer(i))?.1;
        }
        Ok(h)
    }

    /// Projects every constrained layer back onto the orthogonal manifold.
    pub fn orthogonalize(&mut self, iters: usize) -> Result<()> {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.orthogonalize(iters).map_err(|e| e.at_layer(i))?;
        }
        Ok(())
    }

    pub fn gram_residuals(&self) -> Vec<Option<f64>> {
        self.layers.iter().map(Layer::gram_residual).collect()
    }

    pub fn parametric_layers(&self) -> Vec<usize> {
        (0..self.depth()).filter(|&i| self.layers[i].has_parameters()).collect()
    }

    pub fn is_dense_only(&self) -> bool {
        self.layers.iter().all(|l| matches!(l, Layer::Dense(_)))
    }
}

/// Free-function form of [`Network::orthogonalize`].
pub fn orthogonalize_network<T: Real>(net: &mut Network<T>, iters: usize) -> Result<()> {
    net.orthogonalize(iters)
}
