//! Gradient inversion of a single shared gradient (Deep Leakage).
//!
//! The parameter gradient of an MLP is written out in closed form with graph
//! ops, so the matching loss can be differentiated w.r.t. the dummy input
//! and dummy label with a single backward pass.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::gan::normal_latents;
use super::{stream_rng, AttackConfig};
use crate::autograd::{Graph, Var};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::knowledge::classify_attack;
use crate::model::ModelView;
use crate::nn::{cross_entropy_sum, Activation, Architecture, ForwardOptions, Network, Optimizer, OptimizerKind};
use crate::result::ReconstructionResult;
use crate::tensor::{argmax, Tensor};

/// Per-parameter gradients of the loss on one labelled sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientSnapshot {
    pub grads: Vec<Vec<f32>>,
    /// Hash of the parameters the gradients were computed at.
    pub param_fingerprint: String,
}

fn fingerprint(net: &Network) -> String {
    let mut h = Sha256::new();
    for p in net.params() {
        for v in p.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..8])
}

/// What a client would share after one step on `(x, label)`.
pub fn gradient_snapshot(net: &Network, x: &[f32], label: usize) -> Result<GradientSnapshot> {
    let shape = net.spec().input;
    if x.len() != shape.len() {
        return Err(Error::DimensionMismatch(format!("sample has {} values, model takes {}", x.len(), shape.len())));
    }
    if label >= net.classes() {
        return Err(Error::Invalid(format!("label {label} out of range")));
    }
    let g = Graph::new();
    let p = net.bind(&g, true);
    let xv = g.constant(LabeledDataset::from_parts(shape, net.classes(), x.to_vec(), vec![label])?.all_nchw());
    let logits = net.forward_with(xv, &p, ForwardOptions::default()).logits;
    let mut grads = g.backward(cross_entropy_sum(logits, &[label]));
    Ok(GradientSnapshot {
        grads: p.iter().map(|&v| grads.take_or_zeros(v).into_data()).collect(),
        param_fingerprint: fingerprint(net),
    })
}

/// Recovered sample and optimization diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct LeakageOutcome {
    /// Best dummy input (flattened, unclipped).
    pub x: Vec<f32>,
    /// Dummy label distribution.
    pub label_probs: Vec<f32>,
    pub label: usize,
    /// Best matching loss divided by the squared norm of the true gradient.
    pub relative_loss: f64,
    pub best_iteration: usize,
    pub converged: bool,
}

impl LeakageOutcome {
    pub fn into_result(self, classes: usize, seed: u64, shape: crate::data::ImageShape) -> Result<ReconstructionResult> {
        let x: Vec<f32> = self.x.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let ds = LabeledDataset::from_parts(shape, classes, x, vec![self.label])?;
        let mut r = ReconstructionResult::new(ds, "deep_leakage", classify_attack("deep_leakage")?, seed);
        if !self.converged {
            r.flags.push(format!("non_converged: relative gradient distance {:.3e}", self.relative_loss));
        }
        Ok(r)
    }
}

fn derivative<'g>(act: Activation, h: Var<'g>) -> Var<'g> {
    let g = h.graph();
    match act {
        Activation::Sigmoid => h - h.square(),
        Activation::Tanh => -h.square().add_scalar(-1.0),
        // ReLU masks carry no gradient
        Activation::Relu => g.constant(h.value().map(|v| f32::from(v > 0.0))),
    }
}

/// Parameter gradients of `CE(f(x), softmax(y_logits))` for an MLP, as
/// graph nodes in parameter order.
fn mlp_param_grads<'g>(net: &Network, x: Var<'g>, y_logits: Var<'g>) -> Vec<Var<'g>> {
    let g = x.graph();
    let (hidden, bias, act) = match &net.spec().architecture {
        Architecture::Mlp {
            hidden,
            bias,
            activation,
        } => (hidden.len(), *bias, *activation),
        Architecture::Cnn { .. } => unreachable!("checked by caller"),
    };
    let stride = if bias { 2 } else { 1 };
    let weights: Vec<Var<'g>> = (0..=hidden).map(|l| g.constant(net.params()[l * stride].clone())).collect();
    let biases: Vec<Option<Var<'g>>> = (0..=hidden)
        .map(|l| bias.then(|| g.constant(net.params()[l * stride + 1].clone())))
        .collect();
    // forward, keeping layer inputs
    let mut inputs = vec![x];
    let mut h = x;
    for l in 0..=hidden {
        let mut a = h.matmul(weights[l]);
        if let Some(b) = biases[l] {
            a = a.add_channel(b);
        }
        if l < hidden {
            h = act.apply(a);
            inputs.push(h);
        } else {
            h = a;
        }
    }
    let mut delta = h.softmax() - y_logits.softmax();
    let mut out: Vec<Option<Var<'g>>> = vec![None; (hidden + 1) * stride];
    for l in (0..=hidden).rev() {
        out[l * stride] = Some(inputs[l].matmul_t(delta, true, false));
        if bias {
            out[l * stride + 1] = Some(delta.reshape(&[delta.shape()[1]]));
        }
        if l > 0 {
            delta = delta.matmul_t(weights[l], false, true) * derivative(act, inputs[l]);
        }
    }
    out.into_iter().map(|v| v.expect("every parameter has a gradient")).collect()
}

/// Jointly optimizes a dummy input and dummy label so that their gradient
/// matches `snap`; returns the best iterate.
pub fn deep_leakage(snap: &GradientSnapshot, view: &ModelView, cfg: &AttackConfig) -> Result<LeakageOutcome> {
    let net = view.network()?;
    cfg.validate()?;
    if !matches!(net.spec().architecture, Architecture::Mlp { .. }) {
        return Err(Error::Invalid("deep_leakage supports fully connected targets only".into()));
    }
    if snap.grads.len() != net.params().len()
        || snap.grads.iter().zip(net.params()).any(|(g, p)| g.len() != p.len())
    {
        return Err(Error::DimensionMismatch("gradient snapshot does not match the model's parameters".into()));
    }
    let true_norm: f64 = snap.grads.iter().flatten().map(|&v| (v as f64).powi(2)).sum();
    if true_norm == 0.0 {
        return Err(Error::DegenerateInput("gradient snapshot is all zeros".into()));
    }
    if snap.param_fingerprint != fingerprint(net) {
        log::warn!("deep_leakage: gradient snapshot was taken at different parameters");
    }
    let dim = net.spec().input.len();
    let classes = net.classes();
    let targets: Vec<Tensor> = snap
        .grads
        .iter()
        .zip(net.params())
        .map(|(g, p)| Tensor::new(p.shape().to_vec(), g.clone()))
        .collect();
    let mut rng = stream_rng(cfg.seed, "dlg-x", 0);
    let mut x = Tensor::from_fn(&[1, dim], |_| rand::Rng::random::<f32>(&mut rng));
    let mut y = normal_latents(&mut stream_rng(cfg.seed, "dlg-y", 0), 1, classes);
    let mut opt = Optimizer::new(OptimizerKind::adam(cfg.step_size));
    let mut best = (f64::INFINITY, x.clone(), y.clone(), 0usize);
    for it in 0..=cfg.iterations {
        let g = Graph::new();
        let xv = g.param(x.clone());
        let yv = g.param(y.clone());
        let grads = mlp_param_grads(net, xv, yv);
        let mut loss = g.constant(Tensor::scalar(0.0));
        for (gv, t) in grads.into_iter().zip(&targets) {
            let tv = g.constant(t.clone());
            loss = loss + (gv - tv).square().sum();
        }
        let lv = loss.value().item() as f64;
        if !lv.is_finite() {
            break;
        }
        if lv < best.0 {
            best = (lv, x.clone(), y.clone(), it);
        }
        if it == cfg.iterations {
            break;
        }
        let mut gr = g.backward(loss);
        let gx = gr.take_or_zeros(xv);
        let gy = gr.take_or_zeros(yv);
        let mut params = [x, y];
        opt.step(&mut params, &[gx, gy], None);
        [x, y] = params;
    }
    let (loss, bx, by, best_iteration) = best;
    let probs = {
        let m = by.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let e: Vec<f32> = by.data().iter().map(|v| (v - m).exp()).collect();
        let s: f32 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let relative_loss = loss / true_norm;
    Ok(LeakageOutcome {
        x: bx.into_data(),
        label: argmax(&probs),
        label_probs: probs,
        relative_loss,
        best_iteration,
        converged: relative_loss < cfg.convergence_threshold as f64,
    })
}
