//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{ChannelNorm, CifarVariant};
use crate::diagnostics::AlignmentLevel;
use crate::error::{Error, Result};
use crate::layers::{Activation, Init};
use crate::rules::{FeedbackMode, LossKind, PepitaVariant, Rule, SignalSource};
use crate::scalar::Precision;

/// Steps between Björck projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OrthoRate {
    Every(u64),
    /// One projection before the first step.
    InitOnly,
    Never,
}

impl OrthoRate {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "init-only" | "init" => Some(OrthoRate::InitOnly),
            "never" | "none" => Some(OrthoRate::Never),
            k => k.parse().ok().filter(|&k| k >= 1).map(OrthoRate::Every),
        }
    }

    pub fn name(self) -> String {
        match self {
            OrthoRate::Every(k) => k.to_string(),
            OrthoRate::InitOnly => "init-only".into(),
            OrthoRate::Never => "never".into(),
        }
    }
}

/// Steps between feedback re-snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RefreshRate {
    Steps(u64),
    /// `ceil(N / batch)` steps.
    Epoch,
    Never,
}

impl RefreshRate {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "epoch" => Some(RefreshRate::Epoch),
            "never" | "inf" | "∞" => Some(RefreshRate::Never),
            k => k.parse().ok().filter(|&k| k >= 1).map(RefreshRate::Steps),
        }
    }

    pub fn name(self) -> String {
        match self {
            RefreshRate::Steps(k) => k.to_string(),
            RefreshRate::Epoch => "epoch".into(),
            RefreshRate::Never => "never".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Cifar(CifarVariant),
    /// Gaussian inputs labelled by a random linear teacher.
    Synthetic,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mnist" => Some(DatasetKind::Mnist),
            "cifar10" => Some(DatasetKind::Cifar(CifarVariant::Cifar10)),
            "cifar100" => Some(DatasetKind::Cifar(CifarVariant::Cifar100 { coarse: false })),
            "cifar100-coarse" => Some(DatasetKind::Cifar(CifarVariant::Cifar100 { coarse: true })),
            "synthetic" => Some(DatasetKind::Synthetic),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar(CifarVariant::Cifar10) => "cifar10",
            DatasetKind::Cifar(CifarVariant::Cifar100 { coarse: false }) => "cifar100",
            DatasetKind::Cifar(CifarVariant::Cifar100 { coarse: true }) => "cifar100-coarse",
            DatasetKind::Synthetic => "synthetic",
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            DatasetKind::Mnist => 10,
            DatasetKind::Cifar(v) => v.num_classes(),
            DatasetKind::Synthetic => 4,
        }
    }

    pub fn normalization(self) -> String {
        match self {
            DatasetKind::Mnist => "pixels/255".into(),
            DatasetKind::Cifar(v) => {
                let n = ChannelNorm::for_variant(v);
                format!("(pixels/255 - {:?}) / {:?}, channel-major", n.mean, n.std)
            }
            DatasetKind::Synthetic => "standard normal".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub rule: Rule,
    pub pepita_variant: PepitaVariant,
    pub loss: LossKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub ortho_rate: OrthoRate,
    pub bjorck_iters: usize,
    pub feedback: FeedbackMode,
    pub f_refresh: RefreshRate,
    pub init: Init,
    pub hidden: Vec<usize>,
    /// Filters per conv layer; each conv is followed by a scaled average pool.
    pub conv: Vec<usize>,
    pub conv_kernel: usize,
    pub pool: usize,
    pub activation: Activation,
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    /// Epochs between alignment sweeps; 0 disables them.
    pub align_every: usize,
    pub align_samples: usize,
    pub align_layers: Option<Vec<usize>>,
    pub align_level: AlignmentLevel,
    pub precision: Precision,
    pub foton_signal: SignalSource,
    pub modulation_scale: f64,
    pub feedback_scale: f64,
    /// Epochs between checkpoints when `out_dir` is set; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "run".into(),
            rule: Rule::Foton,
            pepita_variant: PepitaVariant::Modified,
            loss: LossKind::Mse,
            lr: 0.1,
            weight_decay: 0.0,
            dropout: 0.0,
            batch_size: 256,
            epochs: 100,
            decay_epochs: Vec::new(),
            decay_factor: 0.1,
            ortho_rate: OrthoRate::Every(1),
            bjorck_iters: 5,
            feedback: FeedbackMode::Aligned,
            f_refresh: RefreshRate::Epoch,
            init: Init::Orthogonal,
            hidden: vec![1024],
            conv: Vec::new(),
            conv_kernel: 3,
            pool: 2,
            activation: Activation::Relu,
            dataset: DatasetKind::Mnist,
            data_dir: None,
            train_limit: None,
            test_limit: None,
            seed: 0,
            out_dir: None,
            align_every: 0,
            align_samples: 1024,
            align_layers: None,
            align_level: AlignmentLevel::Signal,
            precision: Precision::F32,
            foton_signal: SignalSource::Post,
            modulation_scale: 1.0,
            feedback_scale: 0.05,
            checkpoint_every: 1,
        }
    }
}

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("invalid value {value:?} for {key}"))
}

fn num<N: std::str::FromStr>(key: &str, value: &str) -> Result<N> {
    value.trim().parse().map_err(|_| bad(key, value))
}

fn list(key: &str, value: &str) -> Result<Vec<usize>> {
    let v = value.trim();
    if v.is_empty() || v == "none" {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| num(key, s)).collect()
}

fn optional<N: std::str::FromStr>(key: &str, value: &str) -> Result<Option<N>> {
    match value.trim() {
        "" | "none" | "all" => Ok(None),
        v => num(key, v).map(Some),
    }
}

fn join(v: &[usize]) -> String {
    if v.is_empty() {
        return "none".into();
    }
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        match key {
            "preset" => *self = super::preset(value)?,
            "name" => self.name = value.into(),
            "rule" => self.rule = Rule::parse(value).ok_or_else(|| bad(key, value))?,
            "pepita_variant" => {
                self.pepita_variant = match value {
                    "original" => PepitaVariant::Original,
                    "modified" => PepitaVariant::Modified,
                    _ => return Err(bad(key, value)),
                }
            }
            "loss" => {
                self.loss = match value {
                    "mse" => LossKind::Mse,
                    "ce" | "cross-entropy" => LossKind::CrossEntropy {
                        temperature: match self.loss {
                            LossKind::CrossEntropy { temperature } => temperature,
                            LossKind::Mse => 1.0,
                        },
                    },
                    _ => return Err(bad(key, value)),
                }
            }
            "temperature" => {
                let t: f64 = num(key, value)?;
                match &mut self.loss {
                    LossKind::CrossEntropy { temperature } => *temperature = t,
                    LossKind::Mse => self.loss = LossKind::CrossEntropy { temperature: t },
                }
            }
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "decay_epochs" => self.decay_epochs = list(key, value)?,
            "decay_factor" => self.decay_factor = num(key, value)?,
            "ortho_rate" => self.ortho_rate = OrthoRate::parse(value).ok_or_else(|| bad(key, value))?,
            "bjorck_iters" => self.bjorck_iters = num(key, value)?,
            "feedback" => self.feedback = FeedbackMode::parse(value).ok_or_else(|| bad(key, value))?,
            "f_refresh" => self.f_refresh = RefreshRate::parse(value).ok_or_else(|| bad(key, value))?,
            "init" => self.init = Init::parse(value).ok_or_else(|| bad(key, value))?,
            "hidden" => self.hidden = list(key, value)?,
            "conv" => self.conv = list(key, value)?,
            "conv_kernel" => self.conv_kernel = num(key, value)?,
            "pool" => self.pool = num(key, value)?,
            "activation" => self.activation = Activation::parse(value).ok_or_else(|| bad(key, value))?,
            "dataset" => self.dataset = DatasetKind::parse(value).ok_or_else(|| bad(key, value))?,
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "train_limit" => self.train_limit = optional(key, value)?,
            "test_limit" => self.test_limit = optional(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "align_every" | "align_sweep" => self.align_every = num(key, value)?,
            "align_samples" => self.align_samples = num(key, value)?,
            "align_layers" => {
                self.align_layers = match value {
                    "default" => None,
                    v => Some(list(key, v)?),
                }
            }
            "align_level" => {
                self.align_level = match value {
                    "signal" => AlignmentLevel::Signal,
                    "weight" => AlignmentLevel::Weight,
                    _ => return Err(bad(key, value)),
                }
            }
            "precision" => {
                self.precision = match value {
                    "f32" | "32" => Precision::F32,
                    "f64" | "64" => Precision::F64,
                    _ => return Err(bad(key, value)),
                }
            }
            "foton_signal" => {
                self.foton_signal = match value {
                    "post" => SignalSource::Post,
                    "pre" => SignalSource::Pre,
                    _ => return Err(bad(key, value)),
                }
            }
            "modulation_scale" => self.modulation_scale = num(key, value)?,
            "feedback_scale" => self.feedback_scale = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines (`#` starts a comment) on top of the
    /// defaults. A `preset` line replaces everything set before it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.decay_factor > 0.0) {
            return fail("decay_factor must be positive".into());
        }
        if let LossKind::CrossEntropy { temperature } = self.loss {
            if !(temperature > 0.0) {
                return fail("temperature must be positive".into());
            }
        }
        if !(self.modulation_scale > 0.0) || !(self.feedback_scale > 0.0) {
            return fail("modulation_scale and feedback_scale must be positive".into());
        }
        if self.align_samples == 0 {
            return fail("align_samples must be at least 1".into());
        }
        if self.conv_kernel == 0 || self.pool == 0 {
            return fail("conv_kernel and pool must be at least 1".into());
        }
        if self.hidden.contains(&0) || self.conv.contains(&0) {
            return fail("layer widths must be positive".into());
        }
        if matches!(self.rule, Rule::Fa | Rule::Dfa) && !self.conv.is_empty() {
            return fail(format!("{} is only defined for dense networks", self.rule.name()));
        }
        Ok(())
    }

    /// Steps per epoch for a training set of `n` samples.
    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.batch_size) as u64
    }

    /// Serializes every key; `parse(to_kv())` reproduces the config.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("name", self.name.clone());
        put("rule", self.rule.name().into());
        put(
            "pepita_variant",
            match self.pepita_variant {
                PepitaVariant::Original => "original",
                PepitaVariant::Modified => "modified",
            }
            .into(),
        );
        match self.loss {
            LossKind::Mse => put("loss", "mse".into()),
            LossKind::CrossEntropy { temperature } => {
                put("loss", "ce".into());
                put("temperature", temperature.to_string());
            }
        }
        put("lr", self.lr.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("dropout", self.dropout.to_string());
        put("batch_size", self.batch_size.to_string());
        put("epochs", self.epochs.to_string());
        put("decay_epochs", join(&self.decay_epochs));
        put("decay_factor", self.decay_factor.to_string());
        put("ortho_rate", self.ortho_rate.name());
        put("bjorck_iters", self.bjorck_iters.to_string());
        put("feedback", self.feedback.name().into());
        put("f_refresh", self.f_refresh.name());
        put("init", self.init.name().into());
        put("hidden", join(&self.hidden));
        put("conv", join(&self.conv));
        put("conv_kernel", self.conv_kernel.to_string());
        put("pool", self.pool.to_string());
        put("activation", self.activation.name().into());
        put("dataset", self.dataset.name().into());
        if let Some(d) = &self.data_dir {
            put("data_dir", d.display().to_string());
        }
        put("train_limit", self.train_limit.map_or("all".into(), |n| n.to_string()));
        put("test_limit", self.test_limit.map_or("all".into(), |n| n.to_string()));
        put("seed", self.seed.to_string());
        if let Some(d) = &self.out_dir {
            put("out_dir", d.display().to_string());
        }
        put("align_every", self.align_every.to_string());
        put("align_samples", self.align_samples.to_string());
        put("align_layers", self.align_layers.as_deref().map_or("default".into(), join));
        put(
            "align_level",
            match self.align_level {
                AlignmentLevel::Signal => "signal",
                AlignmentLevel::Weight => "weight",
            }
            .into(),
        );
        put(
            "precision",
            match self.precision {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            }
            .into(),
        );
        put(
            "foton_signal",
            match self.foton_signal {
                SignalSource::Post => "post",
                SignalSource::Pre => "pre",
            }
            .into(),
        );
        put("modulation_scale", self.modulation_scale.to_string());
        put("feedback_scale", self.feedback_scale.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        let _ = writeln!(s, "# input normalization: {}", self.dataset.normalization());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_round_trips() {
        let text = "rule = pepita\n# comment\nloss = ce\ntemperature = 4\nhidden = 256,256\northo_rate = init-only\n\
                    f_refresh = never\ndecay_epochs = 30,60\ntrain_limit = 5000\nprecision = f64\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.rule, Rule::Pepita);
        assert_eq!(cfg.loss, LossKind::CrossEntropy { temperature: 4.0 });
        assert_eq!(cfg.hidden, vec![256, 256]);
        assert_eq!(cfg.ortho_rate, OrthoRate::InitOnly);
        assert_eq!(cfg.f_refresh, RefreshRate::Never);
        assert_eq!(cfg.train_limit, Some(5000));
        assert_eq!(ExperimentConfig::parse(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn rejects_invalid_rates_and_keys() {
        for text in [
            "ortho_rate = 0",
            "f_refresh = 0",
            "lr = -1",
            "batch_size = 0",
            "colour = red",
            "dropout = 1.0",
            "temperature = 0",
            "no equals sign",
            "rule = fa\nconv = 32",
        ] {
            assert!(matches!(ExperimentConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn preset_line_then_overrides() {
        let cfg = ExperimentConfig::parse("preset = foton-mnist-1hl\nepochs = 30\n").unwrap();
        assert_eq!(cfg.lr, 0.2);
        assert_eq!(cfg.epochs, 30);
    }

    #[test]
    fn steps_per_epoch_rounds_up() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.steps_per_epoch(60_000), 235);
        assert_eq!(cfg.steps_per_epoch(256), 1);
    }
}
