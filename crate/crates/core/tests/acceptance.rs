//! Acceptance criteria, one line per criterion. Pass substrings as
//! arguments (for example `c1 c7`) to run a subset.

use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use foton::data::CifarVariant;
use foton::diagnostics::AlignmentLevel;
use foton::experiment::{
    ablation_grid, preset, read_events, run_experiment, AblationAxis, DatasetKind, Event, ExperimentConfig,
    OrthoRate, RefreshRate, RunMetrics,
};
use foton::layers::{Activation, Init, InputShape, Layer, LayerSpec, Network, PoolLayer};
use foton::linalg::{bjorck_orthogonalize, spectral_rescale};
use foton::rules::{
    bp_from_trace, compute_error, foton_update, modulated_forward, FeedbackMode, FeedbackOperator, LossKind,
    ParamDelta, Refresh, SignalSource, StepParams,
};
use foton::Real;

struct Outcome {
    passed: bool,
    detail: String,
}

type Check = fn(&mut Shared) -> Result<Outcome, String>;

#[derive(Default)]
struct Shared {
    c5: Option<RunMetrics>,
}

fn outcome(passed: bool, detail: String) -> Result<Outcome, String> {
    Ok(Outcome { passed, detail })
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| f64::sample_normal(rng))
}

fn weights(net: &Network<f64>) -> Vec<Array2<f64>> {
    net.layers
        .iter()
        .map(|l| match l {
            Layer::Dense(d) => d.weight.clone(),
            _ => panic!("dense layers only"),
        })
        .collect()
}

fn dense(d: &ParamDelta<f64>) -> Array2<f64> {
    match d {
        ParamDelta::Dense(w) => w.clone(),
        _ => panic!("dense delta expected"),
    }
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn flat<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> Vec<f64> {
    a.iter().copied().collect()
}

/// Gradients of `(1/B) Σ ½‖f(x) − y‖²` for a linear dense chain, by the
/// chain rule written out with explicit products.
fn linear_chain_gradients(ws: &[Array2<f64>], x: &Array2<f64>, y: &Array2<f64>) -> Vec<Array2<f64>> {
    let b = x.nrows() as f64;
    let mut hs = vec![x.clone()];
    for w in ws {
        let next = hs.last().unwrap().dot(&w.t());
        hs.push(next);
    }
    let mut g = hs.last().unwrap() - y;
    let mut grads = vec![Array2::zeros((0, 0)); ws.len()];
    for l in (0..ws.len()).rev() {
        grads[l] = g.t().dot(&hs[l]) / b;
        g = g.dot(&ws[l]);
    }
    grads
}

fn c1_linear_equivalence(_: &mut Shared) -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_diff, mut worst_cos, mut worst_oracle) = (0.0f64, 0.0f64, 0.0f64);
    for depth in [3usize, 10, 50] {
        let mut widths: Vec<usize> = (0..depth).map(|_| rng.random_range(8..=64)).collect();
        widths.sort_unstable_by(|a, b| b.cmp(a));
        let input = 64;
        let (hidden, out) = widths.split_at(depth - 1);
        let net = Network::<f64>::mlp(input, hidden, out[0], Activation::Identity, Init::Orthogonal, 0.0, &mut rng)
            .map_err(err)?;
        let x = gaussian(16, input, &mut rng);
        let y = gaussian(16, out[0], &mut rng);
        let f = FeedbackOperator::new(FeedbackMode::Aligned, Refresh::Every(1), &net).map_err(err)?;
        let mut trace = net.trace(&x, vec![None; depth]).map_err(err)?;
        let e = compute_error(LossKind::Mse, trace.clean.output(), &y).map_err(err)?;
        modulated_forward(&net, &mut trace, &e, &f, 1.0).map_err(err)?;
        let fo = foton_update(&net, &trace, &e, &StepParams::new(1.0)).map_err(err)?;
        let bp = bp_from_trace(&net, &trace, &e, 1.0, 0.0).map_err(err)?;
        let oracle = linear_chain_gradients(&weights(&net), &x, &y);
        for l in 0..depth {
            let (fo_l, bp_l) = (flat(&dense(fo.delta(l))), flat(&dense(bp.delta(l))));
            let bp_oracle: Vec<f64> = oracle[l].iter().map(|g| -g).collect();
            worst_oracle = worst_oracle.max(max_abs(&bp_l, &bp_oracle));
            worst_diff = worst_diff.max(max_abs(&fo_l, &bp_oracle));
            worst_cos = worst_cos.max((cosine(&fo_l, &bp_oracle) - 1.0).abs());
        }
    }
    outcome(
        worst_diff < 1e-9 && worst_cos < 1e-9,
        format!("max |dW_FO - dW_BP| = {worst_diff:.2e}, max |cos - 1| = {worst_cos:.2e}, library BP vs oracle {worst_oracle:.2e} (depths 3, 10, 50)"),
    )
}

/// Group-of-two sort, returning the output and whether each pair swapped.
fn groupsort(a: &Array2<f64>) -> (Array2<f64>, Vec<bool>) {
    let mut h = a.clone();
    let mut swaps = Vec::new();
    for mut row in h.rows_mut() {
        for i in (0..row.len() - 1).step_by(2) {
            let s = row[i] > row[i + 1];
            if s {
                row.swap(i, i + 1);
            }
            swaps.push(s);
        }
    }
    (h, swaps)
}

fn c2_piecewise_exact(_: &mut Shared) -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = Network::<f64>::mlp(32, &[32, 24, 24, 16], 8, Activation::GroupSort, Init::Orthogonal, 0.0, &mut rng)
        .map_err(err)?;
    let x = gaussian(16, 32, &mut rng);
    let y = gaussian(16, 8, &mut rng);
    let f = FeedbackOperator::new(FeedbackMode::ExactPerSample, Refresh::Every(1), &net).map_err(err)?;
    let eps = 1e-4;
    let mut trace = net.trace(&x, vec![None; 5]).map_err(err)?;
    let e = compute_error(LossKind::Mse, trace.clean.output(), &y).map_err(err)?;
    modulated_forward(&net, &mut trace, &e, &f, eps).map_err(err)?;
    let modulated = trace.modulated().map_err(err)?;
    let flips = (0..4)
        .map(|l| {
            let (_, a) = groupsort(&trace.clean.pre[l]);
            let (_, b) = groupsort(&modulated.pre[l]);
            a.iter().zip(&b).filter(|(p, q)| p != q).count()
        })
        .sum::<usize>();
    let mut params = StepParams::new(1.0);
    params.signal = SignalSource::Pre;
    params.modulation_scale = eps;
    let fo = foton_update(&net, &trace, &e, &params).map_err(err)?;

    // Backpropagation through the recorded sort pattern.
    let ws = weights(&net);
    let mut hs = vec![x.clone()];
    let mut patterns = Vec::new();
    for (l, w) in ws.iter().enumerate() {
        let a = hs[l].dot(&w.t());
        if l + 1 < ws.len() {
            let (h, s) = groupsort(&a);
            hs.push(h);
            patterns.push(s);
        } else {
            hs.push(a);
        }
    }
    let b = x.nrows() as f64;
    let mut g = hs[5].clone() - &y;
    let mut worst = 0.0f64;
    for l in (0..5).rev() {
        let oracle: Vec<f64> = (g.t().dot(&hs[l]) / b).iter().map(|v| -v).collect();
        worst = worst.max(max_abs(&flat(&dense(fo.delta(l))), &oracle));
        if l > 0 {
            let gh = g.dot(&ws[l]);
            let mut ga = gh.clone();
            let width = gh.ncols();
            for (r, row) in gh.rows().into_iter().enumerate() {
                for (k, i) in (0..width - 1).step_by(2).enumerate() {
                    if patterns[l - 1][r * (width / 2) + k] {
                        ga[[r, i]] = row[i + 1];
                        ga[[r, i + 1]] = row[i];
                    }
                }
            }
            g = ga;
        }
    }
    outcome(
        worst < 1e-6 && flips == 0,
        format!("max |dW_FO - dW_BP| = {worst:.2e} over 5 layers, {flips} sort-pattern flips"),
    )
}

fn mse(net: &Network<f64>, x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let out = net.predict(x).unwrap();
    0.5 * (&out - y).mapv(|v| v * v).sum() / x.nrows() as f64
}

/// Central difference of the batch loss with respect to one weight or
/// kernel entry, mutating a copy of the network.
fn central_difference(net: &Network<f64>, x: &Array2<f64>, y: &Array2<f64>, layer: usize, index: usize, h: f64) -> f64 {
    let probe = |delta: f64| {
        let mut n = net.clone();
        match &mut n.layers[layer] {
            Layer::Dense(d) => d.weight.as_slice_mut().unwrap()[index] += delta,
            Layer::Conv(c) => c.kernel.as_slice_mut().unwrap()[index] += delta,
            Layer::Pool(_) => unreachable!(),
        }
        mse(&n, x, y)
    };
    (probe(h) - probe(-h)) / (2.0 * h)
}

fn param_len(layer: &Layer<f64>) -> usize {
    match layer {
        Layer::Dense(d) => d.weight.len(),
        Layer::Conv(c) => c.kernel.len(),
        Layer::Pool(_) => 0,
    }
}

fn delta_entry(d: &ParamDelta<f64>, index: usize) -> f64 {
    match d {
        ParamDelta::Dense(w) => w.as_slice().unwrap()[index],
        ParamDelta::Conv(k) => k.as_slice().unwrap()[index],
        ParamDelta::None => f64::NAN,
    }
}

fn fd_worst(net: &Network<f64>, rng: &mut ChaCha8Rng, batch: usize) -> Result<f64, String> {
    let x = gaussian(batch, net.input_features(), rng);
    let y = gaussian(batch, net.output_features(), rng);
    let trace = net.trace(&x, vec![None; net.depth()]).map_err(err)?;
    let e = compute_error(LossKind::Mse, trace.clean.output(), &y).map_err(err)?;
    let bp = bp_from_trace(net, &trace, &e, 1.0, 0.0).map_err(err)?;
    let params: Vec<usize> = net.parametric_layers();
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let layer = params[rng.random_range(0..params.len())];
        let index = rng.random_range(0..param_len(&net.layers[layer]));
        let fd = central_difference(net, &x, &y, layer, index, 1e-5);
        worst = worst.max((fd + delta_entry(bp.delta(layer), index)).abs());
    }
    Ok(worst)
}

fn c3_gradient_check(_: &mut Shared) -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mlp = Network::<f64>::mlp(10, &[8, 6], 4, Activation::Tanh, Init::Gaussian, 0.0, &mut rng).map_err(err)?;
    let conv = Network::<f64>::build(
        InputShape { channels: 2, height: 5, width: 5 },
        &[LayerSpec::Conv { out_ch: 3, kernel: 3 }, LayerSpec::Dense { out: 4 }],
        Activation::Tanh,
        Init::Gaussian,
        0.0,
        &mut rng,
    )
    .map_err(err)?;
    let a = fd_worst(&mlp, &mut rng, 6)?;
    let b = fd_worst(&conv, &mut rng, 6)?;
    outcome(
        a < 1e-5 && b < 1e-5,
        format!("max |BP - FD| = {a:.2e} (3-layer tanh), {b:.2e} (conv + dense), 50 coordinates each"),
    )
}

fn mnist_config(name: &str) -> Result<ExperimentConfig, String> {
    let mut cfg = preset(name).map_err(err)?;
    cfg.dataset = DatasetKind::Mnist;
    Ok(cfg)
}

fn final_alignment(m: &RunMetrics, epoch_steps: u64) -> Vec<(usize, f64)> {
    m.alignment.iter().filter(|a| a.step == epoch_steps).map(|a| (a.layer, a.cosine)).collect()
}

fn c4_nonlinear_alignment(_: &mut Shared) -> Result<Outcome, String> {
    let mut fo = mnist_config("foton-mnist-10hl")?;
    fo.train_limit = Some(5000);
    fo.test_limit = Some(1000);
    fo.epochs = 1;
    fo.ortho_rate = OrthoRate::Every(1);
    fo.f_refresh = RefreshRate::Steps(1);
    fo.align_every = 1;
    fo.align_level = AlignmentLevel::Weight;
    let mut pep = mnist_config("pepita-mnist-10hl")?;
    pep.train_limit = Some(5000);
    pep.test_limit = Some(1000);
    pep.epochs = 1;
    pep.align_every = 1;
    pep.align_level = AlignmentLevel::Weight;
    let fm = run_experiment(&fo).map_err(err)?;
    let pm = run_experiment(&pep).map_err(err)?;
    let fa = final_alignment(&fm, fm.epochs[1].steps);
    let pa = final_alignment(&pm, pm.epochs[1].steps);
    let fo_ok = !fa.is_empty() && fa.iter().all(|&(_, c)| c > 0.1);
    let early: Vec<_> = pa.iter().filter(|&&(l, _)| l <= 5).collect();
    let pep_ok = !early.is_empty() && early.iter().all(|&&(_, c)| c.abs() < 0.1);
    let show = |v: &[(usize, f64)]| v.iter().map(|(l, c)| format!("{l}:{c:.3}")).collect::<Vec<_>>().join(" ");
    outcome(
        fo_ok && pep_ok,
        format!("FOTON cos [{}]; PEPITA cos [{}]", show(&fa), show(&pa)),
    )
}

fn c5_mnist_1hl(shared: &mut Shared) -> Result<Outcome, String> {
    let mut cfg = mnist_config("foton-mnist-1hl")?;
    cfg.epochs = 30;
    let m = run_experiment(&cfg).map_err(err)?;
    let acc = m.final_test_acc().unwrap_or(0.0);
    let best = m.epochs.iter().map(|e| e.test_acc).fold(0.0, f64::max);
    let wall = m.wall_seconds.last().copied().unwrap_or(0.0);
    shared.c5 = Some(m);
    outcome(acc >= 97.5, format!("test accuracy after 30 epochs {acc:.2}% (best {best:.2}%), {wall:.0} s"))
}

fn c6_depth_scaling(_: &mut Shared) -> Result<Outcome, String> {
    let mut fo = mnist_config("foton-mnist-10hl")?;
    fo.epochs = 30;
    let mut pep = mnist_config("pepita-mnist-10hl")?;
    pep.epochs = 30;
    let fm = run_experiment(&fo).map_err(err)?;
    let fo_acc = fm.final_test_acc().unwrap_or(0.0);
    let pep_best = match run_experiment(&pep) {
        Ok(pm) => pm.epochs.iter().map(|e| e.test_acc).fold(0.0, f64::max),
        Err(foton::Error::Divergence { .. }) => 0.0,
        Err(e) => return Err(err(e)),
    };
    outcome(
        fo_acc >= 95.0 && pep_best <= 50.0,
        format!("FOTON 10-HL final {fo_acc:.2}%, PEPITA 10-HL best {pep_best:.2}%"),
    )
}

fn c7_conv_equivalence(_: &mut Shared) -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = Network::<f64>::build(
        InputShape { channels: 2, height: 6, width: 6 },
        &[LayerSpec::Conv { out_ch: 2, kernel: 3 }, LayerSpec::Pool { window: 2 }, LayerSpec::Dense { out: 8 }],
        Activation::Identity,
        Init::Orthogonal,
        0.0,
        &mut rng,
    )
    .map_err(err)?;
    let x = gaussian(8, 72, &mut rng);
    let y = gaussian(8, 8, &mut rng);
    let f = FeedbackOperator::new(FeedbackMode::Aligned, Refresh::Every(1), &net).map_err(err)?;
    let mut trace = net.trace(&x, vec![None; 3]).map_err(err)?;
    let e = compute_error(LossKind::Mse, trace.clean.output(), &y).map_err(err)?;
    modulated_forward(&net, &mut trace, &e, &f, 1.0).map_err(err)?;
    let fo = foton_update(&net, &trace, &e, &StepParams::new(1.0)).map_err(err)?;
    // The loss is quadratic in the kernel, so central differences are exact
    // up to rounding.
    let kernel_len = param_len(&net.layers[0]);
    let mut worst = 0.0f64;
    for index in 0..kernel_len {
        let fd = central_difference(&net, &x, &y, 0, index, 1e-3);
        worst = worst.max((fd + delta_entry(fo.delta(0), index)).abs());
    }
    let conv = &net.layers[0];
    let m = conv.linear(&Array2::<f64>::eye(72)).map_err(err)?;
    let gram = m.t().dot(&m) - Array2::<f64>::eye(72);
    let residual = gram.mapv(|v| v * v).sum().sqrt();
    outcome(
        worst < 1e-6 && residual < 1e-2,
        format!("max |dK_FO - dK_BP| = {worst:.2e} over {kernel_len} kernel entries; BCOP 6x6 Gram residual {residual:.2e}"),
    )
}

fn c8_orthogonality(_: &mut Shared) -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut residuals = Vec::new();
    for _ in 0..100 {
        let (rows, cols) = loop {
            let r = rng.random_range(8..=128);
            let c = rng.random_range(8..=128);
            if r != c {
                break (r, c);
            }
        };
        let w = gaussian(rows, cols, &mut rng);
        let out = bjorck_orthogonalize(&spectral_rescale(&w).map_err(err)?, 5, 0.5).map_err(err)?;
        let g = if rows <= cols { out.dot(&out.t()) } else { out.t().dot(&out) };
        let n = g.nrows();
        residuals.push((g - Array2::<f64>::eye(n)).mapv(|v| v * v).sum().sqrt());
    }
    let passing = residuals.iter().filter(|&&r| r < 1e-3).count();
    let worst = residuals.iter().copied().fold(0.0, f64::max);
    // Reported alongside: matrices one training step away from orthogonal.
    let mut drifted_ok = 0;
    for _ in 0..100 {
        let (rows, cols) = (rng.random_range(8..=128), rng.random_range(8..=128));
        let q = foton::linalg::orthogonal_init_with::<f64, _>(rows, cols, &mut rng);
        let w = q + gaussian(rows, cols, &mut rng) * (0.05 / (rows.max(cols) as f64).sqrt());
        let out = bjorck_orthogonalize(&spectral_rescale(&w).map_err(err)?, 5, 0.5).map_err(err)?;
        drifted_ok += usize::from(foton::linalg::gram_residual(&out) < 1e-3);
    }

    let pool = PoolLayer::new(3, 8, 8, 2, 2).map_err(err)?;
    let p = pool.forward(&Array2::<f64>::eye(pool.in_features())).map_err(err)?.reversed_axes();
    let ppt = p.dot(&p.t()) - Array2::<f64>::eye(pool.out_features());
    let pool_err = ppt.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    outcome(
        passing == 100 && pool_err < 1e-12,
        format!(
            "Björck on Gaussian rectangular matrices: {passing}/100 below 1e-3 (worst {worst:.2e}); near-orthogonal inputs {drifted_ok}/100; pooling max |PP^T - I| = {pool_err:.1e}"
        ),
    )
}

fn cifar100_dir() -> Option<PathBuf> {
    let mut roots: Vec<PathBuf> = std::env::var("FOTON_DATA_DIR").ok().map(PathBuf::from).into_iter().collect();
    roots.push(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"));
    roots.into_iter().map(|r| r.join("cifar100")).find(|d| d.is_dir())
}

fn c9_refresh_ablation(_: &mut Shared) -> Result<Outcome, String> {
    let Some(dir) = cifar100_dir() else {
        return outcome(false, "blocked: CIFAR-100 binaries not found (set FOTON_DATA_DIR or add data/cifar100)".into());
    };
    let mut base = preset("foton-cifar100-2hl").map_err(err)?;
    base.dataset = DatasetKind::Cifar(CifarVariant::Cifar100 { coarse: false });
    base.data_dir = Some(dir);
    base.train_limit = Some(10_000);
    base.epochs = 30;
    let values: Vec<String> = ["1", "10", "50", "never"].map(String::from).to_vec();
    let cells = ablation_grid(&base, AblationAxis::Feedback, &values).map_err(err)?;
    let mut accs = Vec::new();
    for c in cells {
        accs.push(c.result.map_err(err)?.final_test_acc().unwrap_or(0.0));
    }
    let monotone = accs.windows(2).all(|w| w[1] <= w[0]);
    outcome(
        monotone && accs[3] > 3.0,
        format!("final accuracy for r_F = 1, 10, 50, never: {accs:.2?}"),
    )
}

fn c10_determinism(shared: &mut Shared) -> Result<Outcome, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut cfg = mnist_config("foton-mnist-1hl")?;
    cfg.epochs = 2;
    let mut streams = Vec::new();
    for run in ["a", "b"] {
        cfg.out_dir = Some(dir.path().join(run));
        run_experiment(&cfg).map_err(err)?;
        streams.push(std::fs::read(dir.path().join(run).join("metrics.jsonl")).map_err(err)?);
    }
    let identical = streams[0] == streams[1];
    let events = read_events(&dir.path().join("a/metrics.jsonl")).map_err(err)?;
    let prefix = match &shared.c5 {
        Some(full) => {
            let full_events: Vec<Event> = full.events().into_iter().take(events.len()).collect();
            Some(full_events == events)
        }
        None => None,
    };
    let prefix_note = match prefix {
        Some(true) => "matches the first 2 epochs of the 30-epoch run",
        Some(false) => "DIFFERS from the first 2 epochs of the 30-epoch run",
        None => "30-epoch run not executed in this invocation",
    };
    outcome(
        identical && prefix != Some(false),
        format!("two 2-epoch runs byte-identical: {identical}; stream {prefix_note}"),
    )
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, &str, Check); 10] = [
        ("c1", "exact linear equivalence", c1_linear_equivalence),
        ("c2", "piecewise-exact GroupSort", c2_piecewise_exact),
        ("c3", "BP vs finite differences", c3_gradient_check),
        ("c4", "non-linear alignment", c4_nonlinear_alignment),
        ("c7", "conv FOTON equals conv BP", c7_conv_equivalence),
        ("c8", "orthogonality machinery", c8_orthogonality),
        ("c5", "MNIST 1-HL, 30 epochs", c5_mnist_1hl),
        ("c10", "determinism", c10_determinism),
        ("c6", "depth scaling, 10-HL MNIST", c6_depth_scaling),
        ("c9", "refresh ablation, CIFAR-100", c9_refresh_ablation),
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| f == id) {
            continue;
        }
        let start = Instant::now();
        let result = check(&mut shared).unwrap_or_else(|e| Outcome {
            passed: false,
            detail: format!("error: {e}"),
        });
        failed += usize::from(!result.passed);
        println!(
            "criterion {:>3} {:<30} {}  {} [{:.1} s]",
            &id[1..],
            name,
            if result.passed { "PASS" } else { "FAIL" },
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
