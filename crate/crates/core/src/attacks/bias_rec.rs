//! Reconstruction from the implicit bias of gradient training: a converged
//! homogeneous ReLU network's parameters are approximately a non-negative
//! combination of margin-point gradients.

use rand::Rng;

use super::{select_candidates, slot_labels, stream_rng, AttackConfig, ConfidenceSelector};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::knowledge::classify_attack;
use crate::model::ModelView;
use crate::nn::{Architecture, Network, Optimizer, OptimizerKind};
use crate::result::ReconstructionResult;
use crate::tensor::Tensor;

fn check_model(net: &Network) -> Result<usize> {
    if !net.is_bias_free() {
        return Err(Error::Invalid(
            "bias_rec needs a bias-free ReLU fully connected network".into(),
        ));
    }
    if net.classes() != 2 {
        return Err(Error::Invalid(format!("bias_rec needs a binary classifier, got {} classes", net.classes())));
    }
    match &net.spec().architecture {
        Architecture::Mlp { hidden, .. } => Ok(hidden.len()),
        Architecture::Cnn { .. } => unreachable!("is_bias_free implies an MLP"),
    }
}

/// `Σ_i c_i ∇θ f(x_i)` for `f = logit₁ − logit₀`, with ReLU masks held
/// constant; `coef` is `[n, 1]`.
fn weighted_grads<'g>(net: &Network, hidden: usize, x: Var<'g>, coef: Var<'g>) -> Vec<Var<'g>> {
    let g = x.graph();
    let weights: Vec<Var<'g>> = net.params().iter().map(|p| g.constant(p.clone())).collect();
    let mut inputs = vec![x];
    let mut h = x;
    for (l, &w) in weights.iter().enumerate() {
        h = h.matmul(w);
        if l < hidden {
            h = h.relu();
            inputs.push(h);
        }
    }
    let sign = g.constant(Tensor::new(vec![1, 2], vec![-1.0, 1.0]));
    let mut delta = coef.matmul(sign);
    let mut out = vec![None; hidden + 1];
    for l in (0..=hidden).rev() {
        out[l] = Some(inputs[l].matmul_t(delta, true, false));
        if l > 0 {
            let mask = g.constant(inputs[l].value().map(|v| f32::from(v > 0.0)));
            delta = delta.matmul_t(weights[l], false, true) * mask;
        }
    }
    out.into_iter().map(|v| v.expect("all layers visited")).collect()
}

/// Optimizes candidates `x_i` and coefficients `λ_i ≥ 0` so that
/// `Σ λ_i y_i ∇θ f(x_i)` reproduces the parameters.
pub fn bias_rec(view: &ModelView, cfg: &AttackConfig) -> Result<ReconstructionResult> {
    let net = view.network()?;
    cfg.validate()?;
    let hidden = check_model(net)?;
    let n = cfg.candidate_count();
    let dim = net.spec().input.len();
    let labels = slot_labels(n, 2);
    let ysign: Vec<f32> = labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
    let mut x = {
        let mut data = Vec::with_capacity(n * dim);
        for i in 0..n {
            let mut rng = stream_rng(cfg.seed, "bias-init", i as u64);
            data.extend((0..dim).map(|_| rng.random::<f32>()));
        }
        Tensor::new(vec![n, dim], data)
    };
    let mut lambda = Tensor::zeros(&[n, 1]);
    let y = Tensor::new(vec![n, 1], ysign);
    let mut opt = Optimizer::new(OptimizerKind::adam(cfg.step_size));
    let mut last = f32::NAN;
    for _ in 0..cfg.iterations {
        let g = Graph::new();
        let xv = g.param(x.clone());
        let lv = g.param(lambda.clone());
        let coef = lv * g.constant(y.clone());
        let mut loss = g.constant(Tensor::scalar(0.0));
        for (gv, p) in weighted_grads(net, hidden, xv, coef).into_iter().zip(net.params()) {
            loss = loss + (g.constant(p.clone()) - gv).square().sum();
        }
        last = loss.value().item();
        let mut gr = g.backward(loss);
        let gx = gr.take_or_zeros(xv);
        let gl = gr.take_or_zeros(lv);
        let mut params = [x, lambda];
        opt.step(&mut params, &[gx, gl], None);
        [x, lambda] = params;
        for l in lambda.data_mut() {
            *l = l.max(0.0);
        }
    }
    if cfg.iterations > 0 {
        log::debug!("bias_rec: final parameter-matching loss {last}");
    }
    let shape = net.spec().input;
    let candidates = x.map(|v| v.clamp(0.0, 1.0)).reshape(&shape.nchw(n));
    let (data, pool) = select_candidates(view, &candidates, &labels, cfg.target_size, &ConfidenceSelector)?;
    let mut r = ReconstructionResult::new(data, "bias_rec", classify_attack("bias_rec")?, cfg.seed);
    if let Some(p) = pool {
        r = r.with_pool(p);
    }
    Ok(r)
}
