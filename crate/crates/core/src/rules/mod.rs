//! Learning rules: BP, PEPITA, FOTON, FA and DFA.
//!
//! Every rule reads one [`ForwardTrace`] and produces an [`UpdateSet`]; all
//! deltas of a step come from the same trace and are applied together.

mod feedback;
mod loss;
mod update;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use feedback::{FeedbackMode, FeedbackOperator, Refresh};
pub use loss::{argmax_rows, compute_error, loss_value, one_hot, tempered_softmax, LossKind};
pub use update::{apply_updates, LayerUpdate, ParamDelta, SignalKind, UpdateSet};

use crate::error::{Error, Result};
use crate::layers::{ForwardTrace, Network};
use crate::linalg::Matrix;
use crate::scalar::Real;
use update::layer_delta;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    Bp,
    Foton,
    Pepita,
    Fa,
    Dfa,
}

impl Rule {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bp" | "backprop" => Some(Rule::Bp),
            "foton" => Some(Rule::Foton),
            "pepita" => Some(Rule::Pepita),
            "fa" => Some(Rule::Fa),
            "dfa" => Some(Rule::Dfa),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Rule::Bp => "bp",
            Rule::Foton => "foton",
            Rule::Pepita => "pepita",
            Rule::Fa => "fa",
            Rule::Dfa => "dfa",
        }
    }

    pub fn needs_modulated_pass(self) -> bool {
        matches!(self, Rule::Foton | Rule::Pepita)
    }
}

/// First-layer pre-synaptic term of PEPITA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PepitaVariant {
    /// `(h₁ − h₁^err)(x − Fe)ᵀ`.
    Original,
    /// `(h₁ − h₁^err) xᵀ`; hidden layers keep modulated pre-synaptic terms.
    Modified,
}

/// Which clean/modulated difference drives the hidden-layer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalSource {
    /// `h_ℓ − h_ℓ^err`.
    Post,
    /// `a_ℓ − a_ℓ^err`, exact for piecewise-orthogonal activations.
    Pre,
}

/// Per-step hyperparameters shared by all rules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepParams {
    pub lr: f64,
    pub weight_decay: f64,
    /// The modulated pass runs on `x − ε F e`; hidden differences are divided by `ε`.
    pub modulation_scale: f64,
    pub signal: SignalSource,
    pub pepita_variant: PepitaVariant,
}

impl StepParams {
    pub fn new(lr: f64) -> Self {
        StepParams {
            lr,
            weight_decay: 0.0,
            modulation_scale: 1.0,
            signal: SignalSource::Post,
            pepita_variant: PepitaVariant::Modified,
        }
    }
}

fn check_error_shape<T: Real>(net: &Network<T>, trace: &ForwardTrace<T>, e: &Array2<T>) -> Result<()> {
    let want = [trace.batch(), net.output_features()];
    if e.shape() != want {
        return Err(Error::dimension("error signal", e.shape(), &want));
    }
    Ok(())
}

/// Runs the second pass on `x − ε F e`, reusing the clean pass's masks.
pub fn modulated_forward<T: Real>(
    net: &Network<T>,
    trace: &mut ForwardTrace<T>,
    e: &Array2<T>,
    feedback: &FeedbackOperator<T>,
    scale: f64,
) -> Result<()> {
    check_error_shape(net, trace, e)?;
    let fe = feedback.apply(e, Some(trace))?;
    if fe.shape() != trace.clean.input.shape() {
        return Err(Error::OperatorShape {
            produced: fe.shape().to_vec(),
            expected: trace.clean.input.shape().to_vec(),
        });
    }
    let mut x = trace.clean.input.clone();
    x.scaled_add(T::lit(-scale), &fe);
    net.modulate(trace, &x)
}

/// Exact backward pass on the clean trace. `signal` of layer ℓ is `∂𝓛/∂h_ℓ`.
pub fn bp_from_trace<T: Real>(
    net: &Network<T>,
    trace: &ForwardTrace<T>,
    e: &Array2<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<UpdateSet<T>> {
    backward_with(net, trace, e, lr, weight_decay, SignalKind::Backprop, |l, delta_a| {
        net.layers[l].adjoint(delta_a)
    })
}

/// Shared reverse recursion; `transport(ℓ, δa_ℓ)` yields `∂𝓛/∂h_{ℓ−1}`.
fn backward_with<T: Real, F>(
    net: &Network<T>,
    trace: &ForwardTrace<T>,
    e: &Array2<T>,
    lr: f64,
    weight_decay: f64,
    kind: SignalKind,
    mut transport: F,
) -> Result<UpdateSet<T>>
where
    F: FnMut(usize, &Array2<T>) -> Result<Array2<T>>,
{
    check_error_shape(net, trace, e)?;
    let depth = net.depth();
    let mut layers: Vec<Option<LayerUpdate<T>>> = vec![None; depth];
    let mut g = e.clone();
    for l in (0..depth).rev() {
        let layer = &net.layers[l];
        let mut masked = g.clone();
        if let Some(Some(m)) = trace.masks.get(l) {
            masked *= m;
        }
        let delta_a = layer.activation().vjp(&trace.clean.pre[l], &masked);
        let delta = layer_delta(layer, &delta_a, trace.clean.h(l), lr, weight_decay).map_err(|err| err.at_layer(l))?;
        let next = if l > 0 {
            Some(transport(l, &delta_a).map_err(|err| err.at_layer(l))?)
        } else {
            None
        };
        let signal = std::mem::replace(&mut g, next.unwrap_or_default());
        layers[l] = Some(LayerUpdate { delta, signal });
    }
    Ok(UpdateSet {
        kind,
        layers: layers.into_iter().map(|u| u.expect("every layer visited")).collect(),
        lr,
        weight_decay,
    })
}

/// Backpropagation from raw inputs: clean pass, error, exact gradients.
pub fn bp_update<T: Real>(
    net: &Network<T>,
    x: &Array2<T>,
    target: &Array2<T>,
    loss: LossKind,
    lr: f64,
) -> Result<UpdateSet<T>> {
    let trace = net.trace(x, vec![None; net.depth()])?;
    let e = compute_error(loss, trace.clean.output(), target)?;
    bp_from_trace(net, &trace, &e, lr, 0.0)
}

/// FOTON: clean-minus-modulated differences paired with clean pre-synaptic
/// activations; the output layer uses `e`.
pub fn foton_update<T: Real>(
    net: &Network<T>,
    trace: &ForwardTrace<T>,
    e: &Array2<T>,
    params: &StepParams,
) -> Result<UpdateSet<T>> {
    check_error_shape(net, trace, e)?;
    let modulated = trace.modulated()?;
    let inv = T::lit(1.0 / params.modulation_scale);
    let depth = net.depth();
    let mut layers = Vec::with_capacity(depth);
    for l in 0..depth {
        let layer = &net.layers[l];
        let post_diff = if l + 1 == depth {
            e.clone()
        } else {
            (&trace.clean.post[l] - &modulated.post[l]) * inv
        };
        let drive = if l + 1 == depth {
            e.clone()
        } else {
            match params.signal {
                SignalSource::Post => post_diff.clone(),
                SignalSource::Pre => (&trace.clean.pre[l] - &modulated.pre[l]) * inv,
            }
        };
        let delta = layer_delta(layer, &drive, trace.clean.h(l), params.lr, params.weight_decay)
            .map_err(|err| err.at_layer(l))?;
        layers.push(LayerUpdate {
            delta,
            signal: post_diff,
        });
    }
    Ok(UpdateSet {
        kind: SignalKind::ForwardOnly,
        layers,
        lr: params.lr,
        weight_decay: params.weight_decay,
    })
}

/// PEPITA: like FOTON but with modulated pre-synaptic activations.
pub fn pepita_update<T: Real>(
    net: &Network<T>,
    trace: &ForwardTrace<T>,
    e: &Array2<T>,
    params: &StepParams,
) -> Result<UpdateSet<T>> {
    check_error_shape(net, trace, e)?;
    let modulated = trace.modulated()?;
    let inv = T::lit(1.0 / params.modulation_scale);
    let depth = net.depth();
    let mut layers = Vec::with_capacity(depth);
    for l in 0..depth {
        let layer = &net.layers[l];
        let signal = if l + 1 == depth {
            e.clone()
        } else {
            (&trace.clean.post[l] - &modulated.post[l]) * inv
        };
        let presynaptic = if l == 0 && params.pepita_variant == PepitaVariant::Modified {
            &trace.clean.input
        } else {
            modulated.h(l)
        };
        let delta = layer_delta(layer, &signal, presynaptic, params.lr, params.weight_decay)
            .map_err(|err| err.at_layer(l))?;
        layers.push(LayerUpdate { delta, signal });
    }
    Ok(UpdateSet {
        kind: SignalKind::ForwardOnly,
        layers,
        lr: params.lr,
        weight_decay: params.weight_decay,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Fa,
    Dfa,
}

/// Fixed random feedback matrices for FA and DFA (dense networks only).
///
/// FA: `B_ℓ` is `out_ℓ × out_{ℓ+1}`, standing in for `W_{ℓ+1}ᵀ`.
/// DFA: `B_ℓ` is `out_ℓ × out_L`, projecting the output error directly.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineFeedback<T> {
    pub kind: BaselineKind,
    pub matrices: Vec<Matrix<T>>,
}

impl<T: Real> BaselineFeedback<T> {
    /// Entries `N(0, 1/fan)` with `fan` the width the matrix reads from.
    pub fn random<R: Rng + ?Sized>(kind: BaselineKind, net: &Network<T>, rng: &mut R) -> Result<Self> {
        if !net.is_dense_only() {
            return Err(Error::Input("FA and DFA are implemented for dense networks only".into()));
        }
        let depth = net.depth();
        let out_l = net.output_features();
        let matrices = (0..depth.saturating_sub(1))
            .map(|l| {
                let rows = net.layers[l].out_features();
                let cols = match kind {
                    BaselineKind::Fa => net.layers[l + 1].out_features(),
                    BaselineKind::Dfa => out_l,
                };
                let std = T::lit((1.0 / cols as f64).sqrt());
                Array2::from_shape_fn((rows, cols), |_| T::sample_normal(rng) * std)
            })
            .collect();
        Ok(BaselineFeedback { kind, matrices })
    }

    fn check(&self, net: &Network<T>, kind: BaselineKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Input(format!("expected {kind:?} feedback, found {:?}", self.kind)));
        }
        if self.matrices.len() + 1 != net.depth() {
            return Err(Error::dimension("baseline feedback", &[self.matrices.len()], &[net.depth() - 1]));
        }
        for (l, b) in self.matrices.iter().enumerate() {
            let want = match kind {
                BaselineKind::Fa => [net.layers[l].out_features(), net.layers[l + 1].out_features()],
                BaselineKind::Dfa => [net.layers[l].out_features(), net.output_features()],
            };
            if b.shape() != want {
                return Err(Error::dimension("baseline feedback", b.shape(), &want).at_layer(l));
            }
        }
        Ok(())
    }
}

/// Feedback alignment: `Wᵀ` in the backward recursion replaced by fixed `B`.
pub fn fa_update<T: Real>(
    net: &Network<T>,
    trace: &ForwardTrace<T>,
    e: &Array2<T>,
    feedback: &BaselineFeedback<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<UpdateSet<T>> {
    feedback.check(net, BaselineKind::Fa)?;
    backward_with(net, trace, e, lr, weight_decay, SignalKind::Feedback, |l, delta_a| {
        Ok(delta_a.dot(&feedback.matrices[l - 1].t()))
    })
}

/// Direct feedback alignment: `δh_ℓ = B_ℓ e` for every hidden layer.
pub fn dfa_update<T: Real>(
    net: &Network<T>,
    trace: &ForwardTrace<T>,
    e: &Array2<T>,
    feedback: &BaselineFeedback<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<UpdateSet<T>> {
    feedback.check(net, BaselineKind::Dfa)?;
    check_error_shape(net, trace, e)?;
    let depth = net.depth();
    let mut layers = Vec::with_capacity(depth);
    for l in 0..depth {
        let layer = &net.layers[l];
        let signal = if l + 1 == depth {
            e.clone()
        } else {
            e.dot(&feedback.matrices[l].t())
        };
        let mut masked = signal.clone();
        if let Some(Some(m)) = trace.masks.get(l) {
            masked *= m;
        }
        let delta_a = layer.activation().vjp(&trace.clean.pre[l], &masked);
        let delta = layer_delta(layer, &delta_a, trace.clean.h(l), lr, weight_decay).map_err(|err| err.at_layer(l))?;
        layers.push(LayerUpdate { delta, signal });
    }
    Ok(UpdateSet {
        kind: SignalKind::Feedback,
        layers,
        lr,
        weight_decay,
    })
}

/// Everything a rule needs across steps besides the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner<T> {
    pub rule: Rule,
    pub loss: LossKind,
    pub params: StepParams,
    pub feedback: Option<FeedbackOperator<T>>,
    pub baseline: Option<BaselineFeedback<T>>,
}

/// Result of one training step.
#[derive(Debug, Clone)]
pub struct StepOutcome<T> {
    pub loss: f64,
    pub correct: usize,
    pub updates: UpdateSet<T>,
}

impl<T: Real> Learner<T> {
    /// Clean pass → error → modulated pass (if needed) → deltas → apply.
    /// Orthogonalization and feedback refresh are left to the caller.
    pub fn step(
        &self,
        net: &mut Network<T>,
        x: &Array2<T>,
        target: &Array2<T>,
        masks: Vec<Option<Array2<T>>>,
    ) -> Result<StepOutcome<T>> {
        let (trace, e) = self.trace_and_error(net, x, target, masks)?;
        let loss = loss_value(self.loss, trace.clean.output(), target)?;
        let predicted = argmax_rows(trace.clean.output());
        let truth = argmax_rows(target);
        let correct = predicted.iter().zip(&truth).filter(|(a, b)| a == b).count();
        let updates = self.updates(net, &trace, &e)?;
        apply_updates(net, &updates)?;
        Ok(StepOutcome { loss, correct, updates })
    }

    /// Clean pass, error, and the modulated pass when the rule needs one.
    pub fn trace_and_error(
        &self,
        net: &Network<T>,
        x: &Array2<T>,
        target: &Array2<T>,
        masks: Vec<Option<Array2<T>>>,
    ) -> Result<(ForwardTrace<T>, Array2<T>)> {
        let mut trace = net.trace(x, masks)?;
        let e = compute_error(self.loss, trace.clean.output(), target)?;
        if self.rule.needs_modulated_pass() {
            let f = self
                .feedback
                .as_ref()
                .ok_or_else(|| Error::State(format!("{} needs a feedback operator", self.rule.name())))?;
            modulated_forward(net, &mut trace, &e, f, self.params.modulation_scale)?;
        }
        Ok((trace, e))
    }

    pub fn updates(&self, net: &Network<T>, trace: &ForwardTrace<T>, e: &Array2<T>) -> Result<UpdateSet<T>> {
        let p = &self.params;
        match self.rule {
            Rule::Bp => bp_from_trace(net, trace, e, p.lr, p.weight_decay),
            Rule::Foton => foton_update(net, trace, e, p),
            Rule::Pepita => pepita_update(net, trace, e, p),
            Rule::Fa | Rule::Dfa => {
                let b = self
                    .baseline
                    .as_ref()
                    .ok_or_else(|| Error::State(format!("{} needs feedback matrices", self.rule.name())))?;
                if self.rule == Rule::Fa {
                    fa_update(net, trace, e, b, p.lr, p.weight_decay)
                } else {
                    dfa_update(net, trace, e, b, p.lr, p.weight_decay)
                }
            }
        }
    }
}
