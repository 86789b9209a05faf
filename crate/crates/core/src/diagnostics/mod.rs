//! Oracles and alignment instrumentation.

mod verify;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

pub use verify::{verify_suite, CheckOutcome};

use crate::error::{Error, Result};
use crate::layers::{Layer, Network};
use crate::linalg::{cosine_similarity, Matrix};
use crate::rules::{bp_from_trace, loss_value, Learner, LossKind, UpdateSet};
use crate::scalar::Real;

/// Largest input dimension [`materialize_operator`] accepts.
pub const MATERIALIZE_LIMIT: usize = 4096;

/// One trainable scalar: layer index (0-based) and flat index into its
/// weight matrix or kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCoord {
    pub layer: usize,
    pub index: usize,
}

/// Number of scalars in a layer's weight or kernel.
pub fn parameter_len<T: Real>(layer: &Layer<T>) -> usize {
    match layer {
        Layer::Dense(d) => d.weight.len(),
        Layer::Conv(c) => c.kernel.len(),
        Layer::Pool(_) => 0,
    }
}

fn perturbed<T: Real>(net: &Network<T>, coord: ParamCoord, delta: f64) -> Result<Network<T>> {
    let mut n = net.clone();
    let layer = n
        .layers
        .get_mut(coord.layer)
        .ok_or_else(|| Error::Input(format!("no layer {}", coord.layer)))?;
    let slot = match layer {
        Layer::Dense(d) => d.weight.as_slice_mut().and_then(|s| s.get_mut(coord.index)),
        Layer::Conv(c) => c.kernel.as_slice_mut().and_then(|s| s.get_mut(coord.index)),
        Layer::Pool(_) => None,
    }
    .ok_or_else(|| Error::Input(format!("no parameter {} in layer {}", coord.index, coord.layer)))?;
    *slot += T::lit(delta);
    Ok(n)
}

/// Central difference `(𝓛(θ + h eᵢ) − 𝓛(θ − h eᵢ)) / 2h` of the batch-mean
/// loss. Conv layers are perturbed in kernel space.
pub fn finite_diff_gradient<T: Real>(
    net: &Network<T>,
    x: &Array2<T>,
    target: &Array2<T>,
    loss: LossKind,
    coord: ParamCoord,
    h: f64,
) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::Input(format!("step must be positive, got {h}")));
    }
    let plus = loss_value(loss, &perturbed(net, coord, h)?.predict(x)?, target)?;
    let minus = loss_value(loss, &perturbed(net, coord, -h)?.predict(x)?, target)?;
    Ok((plus - minus) / (2.0 * h))
}

/// Gradient implied by an update set at one coordinate: `−δθ / η`.
pub fn gradient_from_update<T: Real>(updates: &UpdateSet<T>, coord: ParamCoord) -> Option<f64> {
    let slice = updates.layers.get(coord.layer)?.delta.as_slice();
    slice.get(coord.index).map(|v| -v.as_f64() / updates.lr)
}

/// Explicit matrix of a linear map on `input_features`-dimensional vectors,
/// built column by column from the standard basis.
pub fn materialize_operator<T: Real, F>(map: F, input_features: usize) -> Result<Matrix<T>>
where
    F: Fn(&Array2<T>) -> Result<Array2<T>>,
{
    if input_features > MATERIALIZE_LIMIT {
        return Err(Error::SizeGuard {
            required: input_features,
            limit: MATERIALIZE_LIMIT,
        });
    }
    let images = map(&Array2::eye(input_features))?;
    Ok(images.reversed_axes().as_standard_layout().into_owned())
}

/// Matrix of one layer's linear part.
pub fn layer_operator<T: Real>(layer: &Layer<T>) -> Result<Matrix<T>> {
    materialize_operator(|x| layer.linear(x), layer.in_features())
}

/// Whether alignment compares transported signals or weight deltas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignmentLevel {
    Signal,
    Weight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub step: u64,
    /// 1-based layer index.
    pub layer: usize,
    pub rule: String,
    pub cosine: f64,
    /// Samples (or, at weight level, deltas) where one side was zero.
    pub degenerate: usize,
}

/// Five evenly spaced 1-based layer indices including the first and last
/// (all layers when the network is shallower).
pub fn default_report_layers(depth: usize) -> Vec<usize> {
    if depth <= 5 {
        return (1..=depth).collect();
    }
    (0..5)
        .map(|i| 1 + ((i * (depth - 1)) as f64 / 4.0).round() as usize)
        .collect()
}

fn row_cosines<T: Real>(a: &Array2<T>, b: &Array2<T>) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut counted = 0usize;
    let mut degenerate = 0usize;
    for (u, v) in a.rows().into_iter().zip(b.rows()) {
        match cosine_similarity::<T, _, _, _>(&u, &v) {
            Ok(c) => {
                if c.degenerate {
                    degenerate += 1;
                }
                sum += c.value;
                counted += 1;
            }
            Err(_) => degenerate += 1,
        }
    }
    if counted == 0 {
        return Ok((0.0, degenerate));
    }
    Ok((sum / counted as f64, degenerate))
}

fn flat_cosine<T: Real>(a: &[T], b: &[T]) -> (f64, usize) {
    match cosine_similarity::<T, _, _, _>(&ArrayView1::from(a), &ArrayView1::from(b)) {
        Ok(c) => (c.value, usize::from(c.degenerate)),
        Err(_) => (0.0, 1),
    }
}

/// Cosine between the learner's estimate and BP on the same batch, for the
/// requested 1-based layers. Dropout is disabled.
pub fn alignment_sweep<T: Real>(
    net: &Network<T>,
    learner: &Learner<T>,
    x: &Array2<T>,
    target: &Array2<T>,
    layers: &[usize],
    level: AlignmentLevel,
    step: u64,
) -> Result<Vec<AlignmentRecord>> {
    let (trace, e) = learner.trace_and_error(net, x, target, vec![None; net.depth()])?;
    let bp = bp_from_trace(net, &trace, &e, 1.0, 0.0)?;
    let mut probe = learner.clone();
    probe.params.lr = 1.0;
    probe.params.weight_decay = 0.0;
    let est = probe.updates(net, &trace, &e)?;
    layers
        .iter()
        .map(|&l| {
            if l == 0 || l > net.depth() {
                return Err(Error::Input(format!("layer {l} outside 1..={}", net.depth())));
            }
            let (cosine, degenerate) = match level {
                AlignmentLevel::Signal => row_cosines(est.signal(l - 1), bp.signal(l - 1))?,
                AlignmentLevel::Weight => flat_cosine(est.delta(l - 1).as_slice(), bp.delta(l - 1).as_slice()),
            };
            Ok(AlignmentRecord {
                step,
                layer: l,
                rule: learner.rule.name().to_string(),
                cosine,
                degenerate,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Activation, ConvGeometry, ConvLayer, Init, PoolLayer};
    use crate::linalg::gram_residual;
    use crate::rules::{one_hot, FeedbackMode, FeedbackOperator, Refresh, Rule, StepParams};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut r = rng(seed);
        Array2::from_shape_fn((rows, cols), |_| f64::sample_normal(&mut r))
    }

    fn learner(rule: Rule, net: &Network<f64>) -> Learner<f64> {
        Learner {
            rule,
            loss: LossKind::Mse,
            params: StepParams::new(0.1),
            feedback: Some(FeedbackOperator::new(FeedbackMode::Aligned, Refresh::Every(1), net).unwrap()),
            baseline: None,
        }
    }

    #[test]
    fn finite_difference_on_quadratic_and_at_optimum() {
        let w = array![[0.5, -1.0], [2.0, 0.25]];
        let net = Network::new(vec![Layer::Dense(crate::layers::DenseLayer::new(w.clone(), Activation::Identity))])
            .unwrap();
        let x = array![[1.0, -2.0]];
        let y = array![[0.3, 0.7]];
        let residual = x.dot(&w.t()) - &y;
        for index in 0..4 {
            let (i, j) = (index / 2, index % 2);
            let fd = finite_diff_gradient(&net, &x, &y, LossKind::Mse, ParamCoord { layer: 0, index }, 1e-5).unwrap();
            assert!((fd - residual[[0, i]] * x[[0, j]]).abs() < 1e-8);
        }
        let at_opt = x.dot(&w.t());
        let fd = finite_diff_gradient(&net, &x, &at_opt, LossKind::Mse, ParamCoord { layer: 0, index: 1 }, 1e-5).unwrap();
        assert!(fd.abs() < 1e-8);
    }

    #[test]
    fn finite_difference_is_stable_across_steps() {
        let net = Network::<f64>::mlp(5, &[6, 4], 3, Activation::Tanh, Init::Gaussian, 0.0, &mut rng(1)).unwrap();
        let x = random(4, 5, 2);
        let y = random(4, 3, 3);
        let c = ParamCoord { layer: 1, index: 7 };
        let a = finite_diff_gradient(&net, &x, &y, LossKind::Mse, c, 1e-4).unwrap();
        let b = finite_diff_gradient(&net, &x, &y, LossKind::Mse, c, 1e-5).unwrap();
        assert!((a - b).abs() < 1e-4);
        assert!(finite_diff_gradient(&net, &x, &y, LossKind::Mse, c, 0.0).is_err());
    }

    #[test]
    fn dense_operator_is_the_weight_exactly() {
        let mut r = rng(4);
        let layer = Layer::Dense(crate::layers::DenseLayer::<f64>::gaussian(3, 5, Activation::Relu, &mut r));
        let m = layer_operator(&layer).unwrap();
        if let Layer::Dense(d) = &layer {
            assert_eq!(m, d.weight);
        }
    }

    #[test]
    fn pool_operator_and_size_guard() {
        let p = PoolLayer::new(1, 2, 2, 2, 2).unwrap();
        let m = materialize_operator::<f64, _>(|x| p.forward(x), 4).unwrap();
        assert_eq!(m, array![[0.5, 0.5, 0.5, 0.5]]);
        assert!(gram_residual(&m) < 1e-15);
        let err = materialize_operator::<f64, _>(|x| Ok(x.clone()), 5000).unwrap_err();
        assert!(matches!(err, Error::SizeGuard { required: 5000, limit: 4096 }));
    }

    #[test]
    fn bcop_operator_on_six_by_six() {
        let g = ConvGeometry::circular(2, 2, 6, 6, 3);
        let layer = Layer::Conv(ConvLayer::<f64>::bcop(g, Activation::Identity, &mut rng(5)).unwrap());
        let t = layer_operator(&layer).unwrap();
        assert_eq!(t.dim(), (72, 72));
        assert!(gram_residual(&t) < 1e-2);
    }

    #[test]
    fn report_layers() {
        assert_eq!(default_report_layers(3), vec![1, 2, 3]);
        assert_eq!(default_report_layers(11), vec![1, 4, 6, 9, 11]);
        assert_eq!(default_report_layers(51), vec![1, 14, 26, 39, 51]);
    }

    #[test]
    fn bp_sweep_is_unity_and_foton_is_exact_on_linear_nets() {
        let net =
            Network::<f64>::mlp(10, &[10, 8, 8], 6, Activation::Identity, Init::Orthogonal, 0.0, &mut rng(6))
                .unwrap();
        let x = random(8, 10, 7);
        let y = random(8, 6, 8);
        for rule in [Rule::Bp, Rule::Foton] {
            for level in [AlignmentLevel::Signal, AlignmentLevel::Weight] {
                let recs = alignment_sweep(&net, &learner(rule, &net), &x, &y, &[1, 2, 3, 4], level, 0).unwrap();
                for r in recs {
                    assert!((r.cosine - 1.0).abs() < 1e-9, "{rule:?} {level:?} {r:?}");
                }
            }
        }
    }

    #[test]
    fn sweep_rejects_bad_layers_and_handles_zero_signals() {
        let net = Network::<f64>::mlp(4, &[4], 2, Activation::Relu, Init::Orthogonal, 0.0, &mut rng(9)).unwrap();
        let x = random(2, 4, 10);
        let l = learner(Rule::Foton, &net);
        assert!(alignment_sweep(&net, &l, &x, &one_hot(&[0, 1], 2), &[0], AlignmentLevel::Signal, 0).is_err());
        let y = net.predict(&x).unwrap();
        let recs = alignment_sweep(&net, &l, &x, &y, &[1, 2], AlignmentLevel::Signal, 3).unwrap();
        assert!(recs.iter().all(|r| r.degenerate == 2 && r.step == 3));
    }
}
