//! The training loop and ablation grids.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{checkpoint_load, checkpoint_save, TrainState};
use super::config::{DatasetKind, ExperimentConfig, OrthoRate, RefreshRate};
use super::metrics::{EpochRecord, Event, MetricsSink, RunMetrics};
use crate::data::{
    batch_indices, load_cifar_dir, load_mnist_dir, synthetic_classification, Dataset, Split,
};
use crate::diagnostics::{alignment_sweep, default_report_layers};
use crate::error::{Error, Result};
use crate::layers::{LayerSpec, Network};
use crate::rules::{
    argmax_rows, loss_value, BaselineFeedback, BaselineKind, FeedbackMode, FeedbackOperator, Learner, Refresh, Rule,
    StepParams,
};
use crate::scalar::{Precision, Real};

const STREAM_INIT: u64 = 0;
const STREAM_FEEDBACK: u64 = 1;
const STREAM_SHUFFLE: u64 = 1 << 40;
const STREAM_STEP: u64 = 1 << 48;

/// Independent generator for one purpose of one run.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Learning rate for 1-based training epoch `epoch`: every decay epoch
/// already completed multiplies the base rate by `factor`.
pub fn lr_at_epoch(base: f64, decay_epochs: &[usize], factor: f64, epoch: usize) -> f64 {
    let passed = decay_epochs.iter().filter(|&&d| d < epoch).count();
    base * factor.powi(passed as i32)
}

fn locate(sub: &str) -> Option<PathBuf> {
    if let Ok(root) = std::env::var("FOTON_DATA_DIR") {
        let p = PathBuf::from(root).join(sub);
        if p.is_dir() {
            return Some(p);
        }
    }
    let mut here = std::env::current_dir().ok();
    while let Some(dir) = here {
        let p = dir.join("data").join(sub);
        if p.is_dir() {
            return Some(p);
        }
        here = dir.parent().map(Path::to_path_buf);
    }
    let bundled = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(sub);
    bundled.is_dir().then_some(bundled)
}

fn data_dir(cfg: &ExperimentConfig, sub: &str) -> Result<PathBuf> {
    cfg.data_dir.clone().or_else(|| locate(sub)).ok_or_else(|| {
        crate::DataError::Io {
            path: PathBuf::from("data").join(sub),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found; set data_dir"),
        }
        .into()
    })
}

/// Train and test splits, truncated to the configured limits.
pub fn load_datasets<T: Real>(cfg: &ExperimentConfig) -> Result<(Dataset<T>, Dataset<T>)> {
    let (train, test) = match cfg.dataset {
        DatasetKind::Mnist => {
            let dir = data_dir(cfg, "mnist")?;
            (load_mnist_dir(&dir, Split::Train)?, load_mnist_dir(&dir, Split::Test)?)
        }
        DatasetKind::Cifar(v) => {
            let sub = if v.num_classes() == 10 { "cifar10" } else { "cifar100" };
            let dir = data_dir(cfg, sub)?;
            (load_cifar_dir(&dir, v, Split::Train)?, load_cifar_dir(&dir, v, Split::Test)?)
        }
        DatasetKind::Synthetic => synthetic_classification(20, 4, 2048, 512, cfg.seed)?,
    };
    let cut = |ds: Dataset<T>, limit: Option<usize>| match limit {
        Some(n) => ds.take(n),
        None => ds,
    };
    Ok((cut(train, cfg.train_limit), cut(test, cfg.test_limit)))
}

/// Convolution blocks (conv then pool), hidden dense layers, output layer.
pub fn layer_specs(cfg: &ExperimentConfig, classes: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    for &c in &cfg.conv {
        specs.push(LayerSpec::Conv {
            out_ch: c,
            kernel: cfg.conv_kernel,
        });
        specs.push(LayerSpec::Pool { window: cfg.pool });
    }
    specs.extend(cfg.hidden.iter().map(|&out| LayerSpec::Dense { out }));
    specs.push(LayerSpec::Dense { out: classes });
    specs
}

fn refresh_of(cfg: &ExperimentConfig, train_len: usize) -> Refresh {
    match cfg.f_refresh {
        RefreshRate::Steps(k) => Refresh::Every(k),
        RefreshRate::Epoch => Refresh::Every(cfg.steps_per_epoch(train_len).max(1)),
        RefreshRate::Never => Refresh::Never,
    }
}

/// Freshly initialized network and learner for `cfg`.
pub fn init_state<T: Real>(cfg: &ExperimentConfig, train: &Dataset<T>) -> Result<TrainState<T>> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, STREAM_INIT);
    let specs = layer_specs(cfg, train.output_features());
    let mut net = Network::build(train.shape, &specs, cfg.activation, cfg.init, cfg.dropout, &mut rng)?;
    if cfg.ortho_rate == OrthoRate::InitOnly {
        net.orthogonalize(cfg.bjorck_iters)?;
    }
    let mut frng = stream_rng(cfg.seed, STREAM_FEEDBACK);
    let feedback = if cfg.rule.needs_modulated_pass() {
        Some(match cfg.feedback {
            FeedbackMode::FixedRandom => FeedbackOperator::fixed_random(
                net.input_features(),
                net.output_features(),
                cfg.feedback_scale,
                &mut frng,
            ),
            mode => FeedbackOperator::new(mode, refresh_of(cfg, train.len()), &net)?,
        })
    } else {
        None
    };
    let baseline = match cfg.rule {
        Rule::Fa => Some(BaselineFeedback::random(BaselineKind::Fa, &net, &mut frng)?),
        Rule::Dfa => Some(BaselineFeedback::random(BaselineKind::Dfa, &net, &mut frng)?),
        _ => None,
    };
    let params = StepParams {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        modulation_scale: cfg.modulation_scale,
        signal: cfg.foton_signal,
        pepita_variant: cfg.pepita_variant,
    };
    Ok(TrainState {
        net,
        learner: Learner {
            rule: cfg.rule,
            loss: cfg.loss,
            params,
            feedback,
            baseline,
        },
        epoch: 0,
        step: 0,
        metrics: RunMetrics {
            name: cfg.name.clone(),
            ..RunMetrics::default()
        },
    })
}

/// Mean loss and accuracy (percent) of the clean pass, without dropout.
pub fn evaluate<T: Real>(net: &Network<T>, ds: &Dataset<T>, cfg: &ExperimentConfig) -> Result<(f64, f64)> {
    let labels = ds.labels().ok_or_else(|| Error::Input("evaluation needs class labels".into()))?;
    let (mut loss, mut correct) = (0.0, 0usize);
    for idx in batch_indices(ds.len(), 1000, None) {
        let (x, y) = ds.batch(&idx);
        let out = net.predict(&x)?;
        loss += loss_value(cfg.loss, &out, &y)? * idx.len() as f64;
        correct += argmax_rows(&out)
            .iter()
            .zip(&idx)
            .filter(|(p, &i)| **p == labels[i])
            .count();
    }
    let n = ds.len().max(1) as f64;
    Ok((loss / n, 100.0 * correct as f64 / n))
}

fn max_residual<T: Real>(net: &Network<T>) -> Option<f64> {
    net.gram_residuals().into_iter().flatten().reduce(f64::max)
}

fn diverged(epoch: usize, step: u64, loss: f64, checkpoint: &Option<PathBuf>) -> Error {
    Error::Divergence {
        epoch,
        step,
        loss,
        checkpoint: checkpoint.clone(),
    }
}

/// Runs (or resumes) training on already loaded data.
pub fn run_with_data<T: Real>(
    cfg: &ExperimentConfig,
    train: &Dataset<T>,
    test: &Dataset<T>,
    resume: Option<&Path>,
) -> Result<RunMetrics> {
    let mut state = init_state(cfg, train)?;
    if let Some(p) = resume {
        checkpoint_load(p, &mut state)?;
    }
    let mut sink = match &cfg.out_dir {
        Some(dir) => {
            let s = MetricsSink::create(dir)?;
            let cfg_path = dir.join("config.txt");
            std::fs::write(&cfg_path, cfg.to_kv()).map_err(|e| Error::io(&cfg_path, e))?;
            s
        }
        None => MetricsSink::disabled(),
    };
    for ev in state.metrics.events() {
        sink.emit(&ev)?;
    }
    let ckpt_path = cfg.out_dir.as_ref().map(|d| d.join("checkpoint.ckpt"));
    let mut last_ckpt = resume.map(Path::to_path_buf);
    let started = Instant::now();
    let align_idx: Vec<usize> = (0..cfg.align_samples.min(train.len())).collect();
    let align_layers = cfg
        .align_layers
        .clone()
        .unwrap_or_else(|| default_report_layers(state.net.depth()));

    let sweep = |state: &mut TrainState<T>, sink: &mut MetricsSink| -> Result<()> {
        if cfg.align_every == 0 || state.epoch % cfg.align_every != 0 || align_idx.is_empty() {
            return Ok(());
        }
        let (x, y) = train.batch(&align_idx);
        let records = alignment_sweep(&state.net, &state.learner, &x, &y, &align_layers, cfg.align_level, state.step)?;
        for r in records {
            sink.emit(&Event::Alignment(r.clone()))?;
            state.metrics.alignment.push(r);
        }
        Ok(())
    };

    if state.metrics.epochs.is_empty() {
        let (test_loss, test_acc) = evaluate(&state.net, test, cfg)?;
        let rec = EpochRecord {
            epoch: 0,
            steps: 0,
            lr: lr_at_epoch(cfg.lr, &cfg.decay_epochs, cfg.decay_factor, 1),
            train_loss: None,
            train_acc: None,
            test_loss,
            test_acc,
            max_gram_residual: max_residual(&state.net),
        };
        sink.emit(&Event::Epoch(rec.clone()))?;
        state.metrics.epochs.push(rec);
        state.metrics.wall_seconds.push(started.elapsed().as_secs_f64());
        sweep(&mut state, &mut sink)?;
    }

    let depth = state.net.depth();
    for epoch in state.epoch + 1..=cfg.epochs {
        let lr = lr_at_epoch(cfg.lr, &cfg.decay_epochs, cfg.decay_factor, epoch);
        state.learner.params.lr = lr;
        let order = batch_indices(train.len(), cfg.batch_size, Some(cfg.seed ^ (STREAM_SHUFFLE + epoch as u64)));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for idx in order {
            state.step += 1;
            let step = state.step;
            let (x, y) = train.batch(&idx);
            let masks = if cfg.dropout > 0.0 {
                state.net.sample_masks(idx.len(), &mut stream_rng(cfg.seed, STREAM_STEP + step))
            } else {
                vec![None; depth]
            };
            let out = state.learner.step(&mut state.net, &x, &y, masks)?;
            if !out.loss.is_finite() {
                return Err(diverged(epoch, step, out.loss, &last_ckpt));
            }
            loss_sum += out.loss * idx.len() as f64;
            correct += out.correct;
            if let OrthoRate::Every(k) = cfg.ortho_rate {
                if step % k == 0 {
                    state.net.orthogonalize(cfg.bjorck_iters).map_err(|e| match e {
                        Error::Convergence { .. } => diverged(epoch, step, out.loss, &last_ckpt),
                        Error::Layer { ref source, .. } if matches!(**source, Error::Convergence { .. }) => {
                            diverged(epoch, step, out.loss, &last_ckpt)
                        }
                        e => e,
                    })?;
                }
            }
            if let Some(f) = state.learner.feedback.as_mut() {
                f.refresh(&state.net, step)?;
            }
        }
        let (test_loss, test_acc) = evaluate(&state.net, test, cfg)?;
        if !test_loss.is_finite() {
            return Err(diverged(epoch, state.step, test_loss, &last_ckpt));
        }
        let n = train.len().max(1) as f64;
        let rec = EpochRecord {
            epoch,
            steps: state.step,
            lr,
            train_loss: Some(loss_sum / n),
            train_acc: Some(100.0 * correct as f64 / n),
            test_loss,
            test_acc,
            max_gram_residual: max_residual(&state.net),
        };
        sink.emit(&Event::Epoch(rec.clone()))?;
        state.metrics.epochs.push(rec);
        state.metrics.wall_seconds.push(started.elapsed().as_secs_f64());
        state.epoch = epoch;
        sweep(&mut state, &mut sink)?;
        if let Some(p) = &ckpt_path {
            if cfg.checkpoint_every > 0 && (epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs) {
                checkpoint_save(&state, p)?;
                last_ckpt = Some(p.clone());
            }
        }
    }
    sink.finish(&state.metrics)?;
    Ok(state.metrics)
}

fn run_typed<T: Real>(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<RunMetrics> {
    cfg.validate()?;
    let (train, test) = load_datasets::<T>(cfg)?;
    run_with_data(cfg, &train, &test, resume)
}

/// Loads the configured data and trains. Deterministic for a fixed config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunMetrics> {
    resume_experiment(cfg, None)
}

/// Like [`run_experiment`], continuing from a checkpoint when given.
pub fn resume_experiment(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<RunMetrics> {
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg, checkpoint),
        Precision::F64 => run_typed::<f64>(cfg, checkpoint),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    /// `ortho_rate`.
    Ortho,
    /// `f_refresh`.
    Feedback,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ortho" | "ortho_rate" => Some(AblationAxis::Ortho),
            "feedback" | "f_refresh" => Some(AblationAxis::Feedback),
            _ => None,
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            AblationAxis::Ortho => "ortho_rate",
            AblationAxis::Feedback => "f_refresh",
        }
    }
}

/// One grid cell: the axis value and the run's outcome.
pub struct AblationCell {
    pub value: String,
    pub result: Result<RunMetrics>,
}

fn cell_config(base: &ExperimentConfig, axis: AblationAxis, value: &str) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    cfg.set(axis.key(), value)?;
    cfg.name = format!("{}-{}-{value}", base.name, axis.key());
    cfg.out_dir = base.out_dir.as_ref().map(|d| d.join(format!("{}-{value}", axis.key())));
    cfg.validate()?;
    Ok(cfg)
}

fn grid_typed<T: Real>(base: &ExperimentConfig, axis: AblationAxis, values: &[String]) -> Result<Vec<AblationCell>> {
    let (train, test) = load_datasets::<T>(base)?;
    Ok(values
        .iter()
        .map(|v| AblationCell {
            value: v.clone(),
            result: cell_config(base, axis, v).and_then(|cfg| run_with_data(&cfg, &train, &test, None)),
        })
        .collect())
}

/// Runs one experiment per value, sequentially, sharing the loaded data.
/// Per-cell failures are recorded without stopping the grid; a summary
/// `ablation.csv` goes to the base output directory.
pub fn ablation_grid(base: &ExperimentConfig, axis: AblationAxis, values: &[String]) -> Result<Vec<AblationCell>> {
    let cells = match base.precision {
        Precision::F32 => grid_typed::<f32>(base, axis, values)?,
        Precision::F64 => grid_typed::<f64>(base, axis, values)?,
    };
    if let Some(dir) = &base.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut s = format!("{},final_test_acc,error\n", axis.key());
        for c in &cells {
            match &c.result {
                Ok(m) => s.push_str(&format!("{},{},\n", c.value, m.final_test_acc().unwrap_or(f64::NAN))),
                Err(e) => s.push_str(&format!("{},,\"{}\"\n", c.value, e.to_string().replace('"', "'"))),
            }
        }
        let p = dir.join("ablation.csv");
        std::fs::write(&p, s).map_err(|e| Error::io(&p, e))?;
    }
    Ok(cells)
}

/// Inputs and one-hot targets of a dataset slice, for callers driving
/// steps by hand.
pub fn batch_of<T: Real>(ds: &Dataset<T>, range: std::ops::Range<usize>) -> (Array2<T>, Array2<T>) {
    ds.batch(&range.collect::<Vec<_>>())
}
