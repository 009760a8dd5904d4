//! Data-free model extraction: a generator proposes queries on which the
//! student disagrees with the target; the student distils the answers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::ModelView;
use crate::nn::{
    soft_cross_entropy_sum, Activation, Architecture, DenseActivation, DenseStack, ForwardOptions, ModelSpec, Network,
    Optimizer, OptimizerKind,
};
use crate::tensor::{argmax, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StealConfig {
    /// Maximum number of target queries (samples).
    pub budget: u64,
    pub batch_size: usize,
    pub latent_dim: usize,
    pub student: Architecture,
    pub generator_hidden: Vec<usize>,
    pub student_lr: f32,
    pub generator_lr: f32,
    /// Student updates per query batch.
    pub student_steps: usize,
    /// Agreement on fresh queries below which the surrogate is flagged.
    pub min_agreement: f64,
}

impl Default for StealConfig {
    fn default() -> Self {
        Self {
            budget: 100_000,
            batch_size: 128,
            latent_dim: 32,
            student: Architecture::Mlp {
                hidden: vec![256],
                bias: true,
                activation: Activation::Relu,
            },
            generator_hidden: vec![128, 256],
            student_lr: 1e-3,
            generator_lr: 1e-3,
            student_steps: 3,
            min_agreement: 0.8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StolenModel {
    pub surrogate: Network,
    pub queries_used: u64,
    /// Agreement with the target on the last fresh query batches.
    pub fresh_agreement: f64,
    /// Budget ran out before `min_agreement` was reached.
    pub flagged: bool,
}

/// Extracts a locally owned surrogate through query access only.
pub fn steal_model(view: &ModelView, cfg: &StealConfig, seed: u64) -> Result<StolenModel> {
    if cfg.budget == 0 {
        return Err(Error::Invalid("stealing budget must be positive".into()));
    }
    if cfg.batch_size == 0 || cfg.batch_size as u64 > cfg.budget {
        return Err(Error::Invalid("batch size must be in 1..=budget".into()));
    }
    let input = view.input_shape();
    let classes = view.class_count();
    let mut student = Network::new(
        ModelSpec {
            architecture: cfg.student.clone(),
            input,
            classes,
        },
        seed,
    )?;
    let mut g_sizes = vec![cfg.latent_dim];
    g_sizes.extend(&cfg.generator_hidden);
    g_sizes.push(input.len());
    let mut gen = DenseStack::new(&g_sizes, DenseActivation::Relu, DenseActivation::Sigmoid, seed ^ 0x57EA1);
    let mut s_opt = Optimizer::new(OptimizerKind::adam(cfg.student_lr));
    let mut g_opt = Optimizer::new(OptimizerKind::adam(cfg.generator_lr));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bs = cfg.batch_size;
    let mask = student.trainable_mask();
    let start = view.queries_used();
    let mut recent = Vec::new();
    while view.queries_used() - start + bs as u64 <= cfg.budget {
        let z = Tensor::from_fn(&[bs, cfg.latent_dim], |_| StandardNormal.sample(&mut rng));
        let x = gen.apply(&z).reshape(&input.nchw(bs));
        let pt = view.query(&x);
        let ps = student.predict(&x);
        let agree = (0..bs).filter(|&i| argmax(pt.row(i)) == ps[i]).count() as f64 / bs as f64;
        recent.push(agree);
        if recent.len() > 10 {
            recent.remove(0);
        }
        for _ in 0..cfg.student_steps {
            let g = Graph::new();
            let p = student.bind(&g, true);
            let logits = student.forward_with(g.constant(x.clone()), &p, ForwardOptions { train: true, bn_inputs: false }).logits;
            let loss = soft_cross_entropy_sum(logits, g.constant(pt.clone())).scale(1.0 / bs as f32);
            let lv = loss.value().item();
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch: 0, step: recent.len(), loss: lv as f64 });
            }
            let mut gr = g.backward(loss);
            let grads: Vec<Tensor> = p.iter().map(|&v| gr.take_or_zeros(v)).collect();
            s_opt.step(student.params_mut(), &grads, Some(&mask));
        }
        // generator: seek disagreement (target posteriors held fixed) and
        // class diversity of the student's answers
        let g = Graph::new();
        let pg = gen.bind(&g, true);
        let xg = gen.forward_with(g.constant(z), &pg).reshape(&input.nchw(bs));
        let logits = student.forward(xg, ForwardOptions::default()).logits;
        let disagreement = soft_cross_entropy_sum(logits, g.constant(pt)).scale(1.0 / bs as f32);
        let mean_p = g.constant(Tensor::full(&[1, bs], 1.0 / bs as f32)).matmul(logits.softmax());
        let neg_entropy = (mean_p * mean_p.add_scalar(1e-8).ln()).sum();
        let loss = -disagreement + neg_entropy;
        let mut gr = g.backward(loss);
        let grads: Vec<Tensor> = pg.iter().map(|&v| gr.take_or_zeros(v)).collect();
        g_opt.step(gen.params_mut(), &grads, None);
    }
    let fresh_agreement = if recent.is_empty() { 0.0 } else { recent.iter().sum::<f64>() / recent.len() as f64 };
    let flagged = fresh_agreement < cfg.min_agreement;
    if flagged {
        log::warn!("steal_model: budget exhausted at agreement {fresh_agreement:.3} < {}", cfg.min_agreement);
    }
    Ok(StolenModel {
        surrogate: student,
        queries_used: view.queries_used() - start,
        fresh_agreement,
        flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageShape;

    fn target() -> ModelView {
        let net = Network::new(
            ModelSpec {
                architecture: Architecture::Mlp {
                    hidden: vec![8],
                    bias: true,
                    activation: Activation::Relu,
                },
                input: ImageShape::new(4, 4, 1),
                classes: 3,
            },
            2,
        )
        .unwrap();
        let m = crate::model::TargetModel::new(net);
        crate::model::restrict_access(
            &m,
            &crate::knowledge::KnowledgeTriple::new(
                crate::knowledge::TrainingType::Static,
                crate::knowledge::ModelAccess::BlackBox,
                crate::knowledge::DatasetAccess::NoData,
            ),
        )
        .unwrap()
    }

    #[test]
    fn zero_budget_is_rejected() {
        let cfg = StealConfig { budget: 0, ..StealConfig::default() };
        assert!(steal_model(&target(), &cfg, 0).is_err());
    }

    #[test]
    fn respects_budget_and_yields_white_box_surrogate() {
        let v = target();
        let cfg = StealConfig {
            budget: 1000,
            batch_size: 64,
            generator_hidden: vec![16],
            ..StealConfig::default()
        };
        let s = steal_model(&v, &cfg, 1).unwrap();
        assert!(s.queries_used <= 1000);
        assert_eq!(s.queries_used, 15 * 64);
        let owned = ModelView::owned(s.surrogate);
        assert!(owned.network().is_ok());
    }
}
