//! Published hyperparameters, keyed `{rule}-{dataset}-{arch}`.
//!
//! Gaps in the published tables are filled as follows:
//! - BP learning rate on conv nets: 0.05.
//! - BP loss: cross-entropy at temperature 1.
//! - PEPITA at 5, 10 and 50 hidden layers: the 3-hidden-layer column.

use crate::data::CifarVariant;
use crate::error::{Error, Result};
use crate::layers::{Activation, Init};
use crate::rules::{FeedbackMode, LossKind, PepitaVariant, Rule};

use super::config::{DatasetKind, ExperimentConfig, OrthoRate, RefreshRate};

const DATASETS: [&str; 3] = ["mnist", "cifar10", "cifar100"];
const DEPTHS: [usize; 6] = [1, 2, 3, 5, 10, 50];

struct Column {
    bp_lr: f64,
    bp_wd: f64,
    pepita_lr: f64,
    pepita_wd: f64,
    foton_lr: f64,
    foton_wd: f64,
    foton_dropout: f64,
    temperature: f64,
}

#[rustfmt::skip]
fn column(depth: usize, d: usize) -> Column {
    // one row per hidden-layer count, one entry per dataset (MNIST, CIFAR10, CIFAR100)
    let (bp_lr, bp_wd, pep_lr, pep_wd, fo_lr, fo_wd, fo_drop, temp): ([f64; 3], [f64; 3], [f64; 3], [f64; 3], [f64; 3], [f64; 3], [f64; 3], [f64; 3]) = match depth {
        1 => ([0.1, 0.01, 0.1], [0.0; 3], [0.1, 0.2, 0.01], [1e-5, 1e-4, 1e-5], [0.2, 0.05, 0.05], [0.0, 0.0, 0.0], [0.0, 0.1, 0.2], [1.0, 4.0, 1.0]),
        2 => ([0.1, 0.01, 0.1], [0.0; 3], [0.1, 0.01, 0.01], [1e-5, 1e-4, 1e-5], [0.2, 0.05, 0.05], [1e-2, 1e-1, 0.0], [0.0, 0.2, 0.2], [1.0, 4.0, 1.0]),
        3 => ([0.1, 0.01, 0.1], [0.0; 3], [0.001, 0.01, 0.01], [1e-5, 1e-4, 1e-4], [0.1, 0.05, 0.05], [0.0, 0.0, 1e-3], [0.0; 3], [1.0, 1.0, 2.0]),
        5 => ([0.1, 0.01, 0.1], [0.0; 3], [0.001, 0.01, 0.01], [1e-5, 1e-4, 1e-4], [0.2, 0.01, 0.01], [0.0, 0.0, 1e-4], [0.0; 3], [1.0, 1.0, 2.0]),
        10 => ([0.1, 0.01, 0.1], [0.0; 3], [0.001, 0.01, 0.01], [1e-5, 1e-4, 1e-4], [0.01, 0.01, 0.01], [0.0, 0.0, 1e-4], [0.0; 3], [1.0, 2.0, 2.0]),
        _ => ([0.01, 0.01, 0.01], [1e-4; 3], [0.001, 0.01, 0.01], [1e-5, 1e-4, 1e-4], [0.1, 0.005, 0.005], [1e-4; 3], [0.0; 3], [1.0, 2.0, 2.0]),
    };
    Column {
        bp_lr: bp_lr[d],
        bp_wd: bp_wd[d],
        pepita_lr: pep_lr[d],
        pepita_wd: pep_wd[d],
        foton_lr: fo_lr[d],
        foton_wd: fo_wd[d],
        foton_dropout: fo_drop[d],
        temperature: temp[d],
    }
}

fn dataset(d: usize) -> DatasetKind {
    match d {
        0 => DatasetKind::Mnist,
        1 => DatasetKind::Cifar(CifarVariant::Cifar10),
        _ => DatasetKind::Cifar(CifarVariant::Cifar100 { coarse: false }),
    }
}

fn with_rule(mut cfg: ExperimentConfig, rule: Rule) -> ExperimentConfig {
    cfg.rule = rule;
    match rule {
        Rule::Foton => {
            cfg.init = Init::Orthogonal;
            cfg.ortho_rate = OrthoRate::Every(1);
            cfg.feedback = FeedbackMode::Aligned;
            cfg.f_refresh = RefreshRate::Epoch;
            cfg.batch_size = 256;
        }
        _ => {
            cfg.init = Init::Gaussian;
            cfg.ortho_rate = OrthoRate::Never;
            cfg.feedback = FeedbackMode::FixedRandom;
            cfg.f_refresh = RefreshRate::Never;
            cfg.batch_size = 64;
        }
    }
    cfg
}

fn mlp(rule: Rule, d: usize, depth: usize) -> ExperimentConfig {
    let c = column(depth, d);
    let mut cfg = with_rule(ExperimentConfig::default(), rule);
    cfg.dataset = dataset(d);
    cfg.hidden = vec![if depth <= 3 { 1024 } else { 256 }; depth];
    cfg.activation = if depth == 50 { Activation::Tanh } else { Activation::Relu };
    cfg.epochs = 100;
    let ce = LossKind::CrossEntropy {
        temperature: c.temperature,
    };
    match rule {
        Rule::Foton => {
            cfg.lr = c.foton_lr;
            cfg.weight_decay = c.foton_wd;
            cfg.dropout = c.foton_dropout;
            cfg.loss = if d == 0 { LossKind::Mse } else { ce };
            cfg.decay_epochs = if depth >= 5 { vec![30, 60] } else { Vec::new() };
        }
        Rule::Pepita => {
            cfg.lr = c.pepita_lr;
            cfg.weight_decay = c.pepita_wd;
            cfg.dropout = 0.1;
            cfg.loss = LossKind::Mse;
            cfg.pepita_variant = PepitaVariant::Modified;
            cfg.decay_epochs = vec![60, 90];
        }
        _ => {
            cfg.lr = c.bp_lr;
            cfg.weight_decay = c.bp_wd;
            cfg.loss = LossKind::CrossEntropy { temperature: 1.0 };
            cfg.decay_epochs = if depth >= 5 { vec![30, 60] } else { Vec::new() };
        }
    }
    cfg
}

fn conv(rule: Rule, d: usize, layers: usize) -> ExperimentConfig {
    let mut cfg = with_rule(ExperimentConfig::default(), rule);
    cfg.dataset = dataset(d);
    cfg.conv = vec![32; layers];
    cfg.conv_kernel = 3;
    cfg.pool = 2;
    cfg.hidden = Vec::new();
    cfg.epochs = 100;
    let (lr, temperature) = match (layers, d) {
        (1, _) => (0.08, 1.0),
        (_, 0) => (0.06, 2.0),
        _ => (0.01, 1.0),
    };
    cfg.lr = if rule == Rule::Foton { lr } else { 0.05 };
    cfg.loss = LossKind::CrossEntropy {
        temperature: if rule == Rule::Foton { temperature } else { 1.0 },
    };
    cfg
}

/// Every encoded preset name.
pub fn preset_names() -> Vec<String> {
    let mut names = Vec::new();
    for rule in ["bp", "pepita", "foton"] {
        for ds in DATASETS {
            for depth in DEPTHS {
                names.push(format!("{rule}-{ds}-{depth}hl"));
            }
        }
    }
    for rule in ["bp", "foton"] {
        for ds in ["mnist", "cifar100"] {
            for k in [1, 2] {
                names.push(format!("{rule}-{ds}-{k}conv"));
            }
        }
    }
    names
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let unknown = || Error::Config(format!("unknown preset {name:?}; known: {}", preset_names().join(", ")));
    let mut parts = name.trim().splitn(3, '-');
    let (Some(rule), Some(ds), Some(arch)) = (parts.next(), parts.next(), parts.next()) else {
        return Err(unknown());
    };
    let rule = match rule {
        "bp" => Rule::Bp,
        "pepita" => Rule::Pepita,
        "foton" => Rule::Foton,
        _ => return Err(unknown()),
    };
    let d = DATASETS.iter().position(|&x| x == ds).ok_or_else(unknown)?;
    let mut cfg = if let Some(depth) = arch.strip_suffix("hl") {
        let depth: usize = depth.parse().map_err(|_| unknown())?;
        if !DEPTHS.contains(&depth) {
            return Err(unknown());
        }
        mlp(rule, d, depth)
    } else if let Some(k) = arch.strip_suffix("conv") {
        let k: usize = k.parse().map_err(|_| unknown())?;
        if !(1..=2).contains(&k) || d == 1 || rule == Rule::Pepita {
            return Err(unknown());
        }
        conv(rule, d, k)
    } else {
        return Err(unknown());
    };
    cfg.name = name.trim().to_string();
    Ok(cfg)
}
