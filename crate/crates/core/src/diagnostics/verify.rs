//! Quick self-checks run by `foton verify`.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{finite_diff_gradient, gradient_from_update, layer_operator, ParamCoord};
use crate::error::Result;
use crate::layers::{Activation, ConvGeometry, ConvLayer, Init, Layer, Network, PoolLayer};
use crate::linalg::{bjorck_orthogonalize, cosine_similarity, gram_residual, orthogonal_init_with};
use crate::rules::{
    bp_from_trace, compute_error, foton_update, modulated_forward, FeedbackMode, FeedbackOperator, LossKind, Refresh,
    SignalSource, StepParams,
};
use crate::scalar::Real;

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    fn below(name: &str, value: f64, tolerance: f64) -> Self {
        CheckOutcome {
            name: name.into(),
            passed: value.is_finite() && value < tolerance,
            value,
            tolerance,
        }
    }

    fn above(name: &str, value: f64, tolerance: f64) -> Self {
        CheckOutcome {
            name: name.into(),
            passed: value.is_finite() && value > tolerance,
            value,
            tolerance,
        }
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| f64::sample_normal(rng))
}

fn linear_equivalence(rng: &mut ChaCha8Rng) -> Result<f64> {
    let net = Network::<f64>::mlp(16, &[16; 4], 8, Activation::Identity, Init::Orthogonal, 0.0, rng)?;
    let x = gaussian(8, 16, rng);
    let y = gaussian(8, 8, rng);
    let f = FeedbackOperator::new(FeedbackMode::Aligned, Refresh::Every(1), &net)?;
    let mut trace = net.trace(&x, vec![None; net.depth()])?;
    let e = compute_error(LossKind::Mse, trace.clean.output(), &y)?;
    modulated_forward(&net, &mut trace, &e, &f, 1.0)?;
    let foton = foton_update(&net, &trace, &e, &StepParams::new(0.1))?;
    let bp = bp_from_trace(&net, &trace, &e, 0.1, 0.0)?;
    Ok((0..net.depth())
        .map(|l| foton.delta(l).max_abs_diff(bp.delta(l)))
        .fold(0.0, f64::max))
}

fn groupsort_alignment(rng: &mut ChaCha8Rng) -> Result<f64> {
    let net = Network::<f64>::mlp(16, &[16; 3], 8, Activation::GroupSort, Init::Orthogonal, 0.0, rng)?;
    let x = gaussian(16, 16, rng);
    let y = gaussian(16, 8, rng);
    let f = FeedbackOperator::new(FeedbackMode::ExactPerSample, Refresh::Every(1), &net)?;
    let mut trace = net.trace(&x, vec![None; net.depth()])?;
    let e = compute_error(LossKind::Mse, trace.clean.output(), &y)?;
    let eps = 1e-4;
    modulated_forward(&net, &mut trace, &e, &f, eps)?;
    let mut params = StepParams::new(1.0);
    params.signal = SignalSource::Pre;
    params.modulation_scale = eps;
    let foton = foton_update(&net, &trace, &e, &params)?;
    let bp = bp_from_trace(&net, &trace, &e, 1.0, 0.0)?;
    let mut worst: f64 = 1.0;
    for l in 0..net.depth() {
        let a = ndarray::ArrayView1::from(foton.delta(l).as_slice());
        let b = ndarray::ArrayView1::from(bp.delta(l).as_slice());
        worst = worst.min(cosine_similarity(&a, &b)?.value);
    }
    Ok(worst)
}

fn gradient_check(rng: &mut ChaCha8Rng) -> Result<f64> {
    let net = Network::<f64>::mlp(6, &[5, 4], 3, Activation::Tanh, Init::Gaussian, 0.0, rng)?;
    let x = gaussian(4, 6, rng);
    let y = gaussian(4, 3, rng);
    let trace = net.trace(&x, vec![None; net.depth()])?;
    let e = compute_error(LossKind::Mse, trace.clean.output(), &y)?;
    let bp = bp_from_trace(&net, &trace, &e, 1.0, 0.0)?;
    let mut worst: f64 = 0.0;
    for layer in 0..net.depth() {
        for index in [0, 3, 7] {
            let coord = ParamCoord { layer, index };
            let fd = finite_diff_gradient(&net, &x, &y, LossKind::Mse, coord, 1e-5)?;
            let an = gradient_from_update(&bp, coord).unwrap_or(f64::NAN);
            worst = worst.max((fd - an).abs() / (fd.abs() + an.abs()).max(1e-8));
        }
    }
    Ok(worst)
}

fn bjorck_residual(rng: &mut ChaCha8Rng) -> Result<f64> {
    let q: Array2<f64> = orthogonal_init_with(32, 64, rng);
    let noise = gaussian(32, 64, rng) * 0.01;
    let w = bjorck_orthogonalize(&(q + noise), 5, 0.5)?;
    Ok(gram_residual(&w))
}

fn pool_round_trip() -> Result<f64> {
    let p = PoolLayer::new(2, 4, 4, 2, 2)?;
    let m = layer_operator::<f64>(&Layer::Pool(p))?;
    Ok(gram_residual(&m))
}

fn bcop_residual(rng: &mut ChaCha8Rng) -> Result<f64> {
    let g = ConvGeometry::circular(2, 2, 6, 6, 3);
    let layer = Layer::Conv(ConvLayer::<f64>::bcop(g, Activation::Identity, rng)?);
    Ok(gram_residual(&layer_operator(&layer)?))
}

/// Runs every self-check with a fixed seed.
pub fn verify_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(vec![
        CheckOutcome::below("linear-equivalence", linear_equivalence(&mut rng)?, 1e-9),
        CheckOutcome::above("groupsort-alignment", groupsort_alignment(&mut rng)?, 0.999),
        CheckOutcome::below("gradient-check", gradient_check(&mut rng)?, 1e-6),
        CheckOutcome::below("bjorck-residual", bjorck_residual(&mut rng)?, 1e-6),
        CheckOutcome::below("pool-round-trip", pool_round_trip()?, 1e-12),
        CheckOutcome::below("bcop-residual", bcop_residual(&mut rng)?, 1e-2),
    ])
}
