//! Latent-space attacks through a pretrained generator: Revealer, KEDMI and
//! PLGMI. All use Adam on the latent variables.

use super::gan::normal_latents;
use super::{select_candidates, slot_labels, stream_rng, AttackConfig, ConfidenceSelector, GeneratorBundle};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::knowledge::classify_attack;
use crate::model::ModelView;
use crate::nn::{cross_entropy_sum, ForwardOptions, Network, Optimizer, OptimizerKind};
use crate::result::ReconstructionResult;
use crate::tensor::Tensor;

const SIGMA_FLOOR: f32 = 1e-4;

fn check_latent(g: &GeneratorBundle, cfg: &AttackConfig) -> Result<()> {
    if g.latent_dim != cfg.latent_dim {
        return Err(Error::DimensionMismatch(format!(
            "config latent_dim {} but generator latent dim {}",
            cfg.latent_dim, g.latent_dim
        )));
    }
    Ok(())
}

fn check_image(g: &GeneratorBundle, net: &Network) -> Result<()> {
    if g.image != net.spec().input {
        return Err(Error::DimensionMismatch(format!(
            "generator emits {:?} but the model takes {:?}",
            g.image,
            net.spec().input
        )));
    }
    Ok(())
}

fn slot_latents(cfg: &AttackConfig, start: usize, n: usize) -> Tensor {
    let parts: Vec<Tensor> = (start..start + n)
        .map(|i| normal_latents(&mut stream_rng(cfg.seed, "latent-init", i as u64), 1, cfg.latent_dim))
        .collect();
    Tensor::concat_outer(&parts)
}

/// Starting latents for slots `start..start + labels.len()`. With
/// `init_pool > 1` each slot draws that many latents and keeps the one the
/// target scores highest for the slot's class; the first draw is the
/// single-sample init.
fn initial_latents(
    net: &Network,
    gen: &GeneratorBundle,
    cfg: &AttackConfig,
    start: usize,
    labels: &[usize],
    conditional: bool,
) -> Result<Tensor> {
    let pool = cfg.init_pool.max(1);
    if pool == 1 {
        return Ok(slot_latents(cfg, start, labels.len()));
    }
    let mut parts = Vec::with_capacity(labels.len());
    for (k, &label) in labels.iter().enumerate() {
        let zs = normal_latents(&mut stream_rng(cfg.seed, "latent-init", (start + k) as u64), pool, cfg.latent_dim);
        let lab = vec![label; pool];
        let x = gen.generate(&zs, conditional.then_some(&lab[..]))?;
        let p = net.predict_proba(&x);
        let best = (0..pool)
            .max_by(|&a, &b| p.row(a)[label].total_cmp(&p.row(b)[label]).then(b.cmp(&a)))
            .expect("pool is non-empty");
        parts.push(Tensor::new(vec![1, cfg.latent_dim], zs.row(best).to_vec()));
    }
    Ok(Tensor::concat_outer(&parts))
}

/// Identity loss through the generator; `margin` selects PLGMI's max-margin
/// objective instead of cross-entropy.
fn latent_loss<'g>(
    net: &Network,
    gen: &GeneratorBundle,
    cfg: &AttackConfig,
    z: Var<'g>,
    labels: &[usize],
    margin: bool,
    rows_per_term: f32,
) -> Result<Var<'g>> {
    let cond = margin.then_some(labels);
    let x = gen.forward(z, cond)?;
    let logits = net.forward(x, ForwardOptions::default()).logits;
    let id_loss = if margin {
        -logits.margin(labels).sum()
    } else {
        cross_entropy_sum(logits, labels)
    };
    let mut loss = id_loss.scale(cfg.class_weight / rows_per_term);
    if cfg.prior_weight > 0.0 {
        loss = loss + z.square().sum().scale(cfg.prior_weight / rows_per_term);
    }
    if cfg.disc_weight > 0.0 {
        if let Some(r) = gen.realism(x, cond) {
            loss = loss + (-r).softplus().sum().scale(cfg.disc_weight / rows_per_term);
        }
    }
    Ok(loss)
}

fn adam(cfg: &AttackConfig) -> Optimizer {
    Optimizer::new(OptimizerKind::adam(cfg.step_size))
}

/// Optimizes one latent per slot. Returns final latents and slot labels.
fn optimize_slots(
    net: &Network,
    gen: &GeneratorBundle,
    cfg: &AttackConfig,
    margin: bool,
    mut on_step: impl FnMut(usize, &Tensor),
) -> Result<(Tensor, Vec<usize>)> {
    let n = cfg.candidate_count();
    let labels = slot_labels(n, net.classes());
    let mut parts = Vec::new();
    for start in (0..n).step_by(cfg.batch_size) {
        let b = cfg.batch_size.min(n - start);
        let lab = &labels[start..start + b];
        let mut z = initial_latents(net, gen, cfg, start, lab, margin)?;
        let mut opt = adam(cfg);
        for step in 0..cfg.iterations {
            let g = Graph::new();
            let zv = g.param(z.clone());
            let loss = latent_loss(net, gen, cfg, zv, lab, margin, 1.0)?;
            let gz = g.backward(loss).take_or_zeros(zv);
            opt.step(std::slice::from_mut(&mut z), &[gz], None);
            on_step(step, &z);
        }
        parts.push(z);
    }
    if parts.is_empty() {
        return Err(Error::Invalid("no candidates requested".into()));
    }
    Ok((Tensor::concat_outer(&parts), labels))
}

fn finish(
    id: &str,
    view: &ModelView,
    gen: &GeneratorBundle,
    cfg: &AttackConfig,
    z: &Tensor,
    labels: &[usize],
    conditional: bool,
) -> Result<ReconstructionResult> {
    let x = gen.generate(z, conditional.then_some(labels))?;
    let (data, pool) = select_candidates(view, &x, labels, cfg.target_size, &ConfidenceSelector)?;
    let mut r = ReconstructionResult::new(data, id, classify_attack(id)?, cfg.seed);
    if let Some(p) = pool {
        r = r.with_pool(p);
    }
    Ok(r)
}

fn prepare<'v>(view: &'v ModelView, gen: &GeneratorBundle, cfg: &AttackConfig) -> Result<&'v Network> {
    let net = view.network()?;
    cfg.validate()?;
    check_latent(gen, cfg)?;
    check_image(gen, net)?;
    Ok(net)
}

/// Per-slot latent search through an unconditional generator.
pub fn revealer(view: &ModelView, gen: &GeneratorBundle, cfg: &AttackConfig) -> Result<ReconstructionResult> {
    let net = prepare(view, gen, cfg)?;
    let (z, labels) = optimize_slots(net, gen, cfg, false, |_, _| {})?;
    finish("revealer", view, gen, cfg, &z, &labels, false)
}

/// Max-margin latent search through a class-conditional generator.
pub fn plgmi(view: &ModelView, gen: &GeneratorBundle, cfg: &AttackConfig) -> Result<ReconstructionResult> {
    let net = prepare(view, gen, cfg)?;
    require_conditional(gen, net.classes())?;
    let (z, labels) = optimize_slots(net, gen, cfg, true, |_, _| {})?;
    finish("plgmi", view, gen, cfg, &z, &labels, true)
}

fn require_conditional(gen: &GeneratorBundle, classes: usize) -> Result<()> {
    if gen.condition_width == 0 {
        return Err(Error::Invalid("plgmi needs a class-conditional generator".into()));
    }
    if let Some(c) = (0..classes).find(|c| !gen.conditions.contains(c)) {
        return Err(Error::Invalid(format!("class {c} is not in the generator's condition vocabulary")));
    }
    Ok(())
}

/// Learned per-class latent distributions of KEDMI.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDistribution {
    /// `[classes, latent_dim]`.
    pub mu: Tensor,
    pub sigma: Tensor,
}

fn kedmi_noise(cfg: &AttackConfig, step: usize, rows: usize) -> Tensor {
    if cfg.kedmi_zero_noise {
        Tensor::zeros(&[rows, cfg.latent_dim])
    } else {
        normal_latents(&mut stream_rng(cfg.seed, "kedmi-noise", step as u64), rows, cfg.latent_dim)
    }
}

fn optimize_distribution(
    net: &Network,
    gen: &GeneratorBundle,
    cfg: &AttackConfig,
    mut on_step: impl FnMut(&LatentDistribution),
) -> Result<LatentDistribution> {
    let classes = net.classes();
    let d = cfg.latent_dim;
    let m = cfg.kedmi_samples.max(1);
    // μ_c starts where Revealer's slot c does
    let mut mu = initial_latents(net, gen, cfg, 0, &(0..classes).collect::<Vec<_>>(), false)?;
    let mut sigma = Tensor::full(&[classes, d], cfg.kedmi_sigma_init);
    // row r of the sample batch belongs to class r / m
    let expand = Tensor::from_fn(&[classes * m, classes], |i| f32::from((i / classes) / m == i % classes));
    let labels: Vec<usize> = (0..classes * m).map(|r| r / m).collect();
    let mut opt = adam(cfg);
    let mut clamped = 0usize;
    for step in 0..cfg.iterations {
        let g = Graph::new();
        let mv = g.param(mu.clone());
        let sv = g.param(sigma.clone());
        let e = g.constant(expand.clone());
        let xi = g.constant(kedmi_noise(cfg, step, classes * m));
        let z = e.matmul(mv) + e.matmul(sv) * xi;
        let loss = latent_loss(net, gen, cfg, z, &labels, false, m as f32)?;
        let mut grads = g.backward(loss);
        let gm = grads.take_or_zeros(mv);
        let gs = grads.take_or_zeros(sv);
        let mut params = [mu, sigma];
        opt.step(&mut params, &[gm, gs], None);
        [mu, sigma] = params;
        for s in sigma.data_mut() {
            if *s < 0.0 {
                *s = SIGMA_FLOOR;
                clamped += 1;
            }
        }
        on_step(&LatentDistribution {
            mu: mu.clone(),
            sigma: sigma.clone(),
        });
    }
    if clamped > 0 {
        log::info!("kedmi: clamped {clamped} negative σ entries to {SIGMA_FLOOR}");
    }
    Ok(LatentDistribution { mu, sigma })
}

/// Samples `z = μ_c + σ_c ⊙ ξ` for every slot.
fn emit_latents(dist: &LatentDistribution, cfg: &AttackConfig, labels: &[usize]) -> Tensor {
    let d = cfg.latent_dim;
    let mut data = Vec::with_capacity(labels.len() * d);
    for (i, &c) in labels.iter().enumerate() {
        let xi = normal_latents(&mut stream_rng(cfg.seed, "kedmi-emit", i as u64), 1, d);
        let (mu, s) = (dist.mu.row(c), dist.sigma.row(c));
        data.extend((0..d).map(|j| mu[j] + s[j] * xi.data()[j]));
    }
    Tensor::new(vec![labels.len(), d], data)
}

/// Optimizes a Gaussian latent distribution per class, then samples it.
pub fn kedmi(view: &ModelView, gen: &GeneratorBundle, cfg: &AttackConfig) -> Result<ReconstructionResult> {
    let net = prepare(view, gen, cfg)?;
    let dist = optimize_distribution(net, gen, cfg, |_| {})?;
    let labels = slot_labels(cfg.candidate_count(), net.classes());
    let z = emit_latents(&dist, cfg, &labels);
    finish("kedmi", view, gen, cfg, &z, &labels, false)
}

/// Optimized KEDMI distribution (for inspection and tests).
pub fn kedmi_distribution(view: &ModelView, gen: &GeneratorBundle, cfg: &AttackConfig) -> Result<LatentDistribution> {
    let net = prepare(view, gen, cfg)?;
    optimize_distribution(net, gen, cfg, |_| {})
}

/// Latent iterates after every step: per-slot `z` for Revealer and PLGMI,
/// per-class `μ` for KEDMI.
pub fn latent_trajectory(id: &str, view: &ModelView, gen: &GeneratorBundle, cfg: &AttackConfig) -> Result<Vec<Tensor>> {
    let net = prepare(view, gen, cfg)?;
    match id {
        "revealer" | "plgmi" => {
            if id == "plgmi" {
                require_conditional(gen, net.classes())?;
            }
            let mut steps: Vec<Vec<Tensor>> = vec![Vec::new(); cfg.iterations];
            optimize_slots(net, gen, cfg, id == "plgmi", |s, z| steps[s].push(z.clone()))?;
            Ok(steps.iter().map(|p| Tensor::concat_outer(p)).collect())
        }
        "kedmi" => {
            let mut steps = Vec::new();
            optimize_distribution(net, gen, cfg, |d| steps.push(d.mu.clone()))?;
            Ok(steps)
        }
        other => Err(Error::Invalid(format!("`{other}` is not a latent-space attack"))),
    }
}
