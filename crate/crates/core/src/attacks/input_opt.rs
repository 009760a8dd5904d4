//! Input-space attacks: MI-Face, DeepDream and DeepInversion share one
//! fixed-step gradient-descent loop with optional regularizers.

use rand::Rng;

use super::{select_candidates, slot_labels, stream_rng, AttackConfig, ConfidenceSelector};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::knowledge::classify_attack;
use crate::model::ModelView;
use crate::nn::{cross_entropy_sum, ForwardOptions, Network};
use crate::result::ReconstructionResult;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Objective {
    class_weight: f32,
    alpha_tv: f32,
    alpha_l2: f32,
    bn_weight: f32,
}

impl Objective {
    fn for_attack(id: &str, cfg: &AttackConfig) -> Self {
        match id {
            "mi_face" => Self {
                class_weight: cfg.class_weight,
                alpha_tv: 0.0,
                alpha_l2: 0.0,
                bn_weight: 0.0,
            },
            "deep_dream" => Self {
                class_weight: cfg.class_weight,
                alpha_tv: cfg.alpha_tv,
                alpha_l2: cfg.alpha_l2,
                bn_weight: 0.0,
            },
            _ => Self {
                class_weight: cfg.class_weight,
                alpha_tv: cfg.alpha_tv,
                alpha_l2: cfg.alpha_l2,
                bn_weight: cfg.bn_weight,
            },
        }
    }

    fn loss<'g>(&self, net: &Network, x: Var<'g>, labels: &[usize]) -> Var<'g> {
        let g = x.graph();
        let fwd = net.forward(
            x,
            ForwardOptions {
                train: false,
                bn_inputs: self.bn_weight > 0.0,
            },
        );
        let mut loss = g.constant(Tensor::scalar(0.0));
        if self.class_weight > 0.0 {
            loss = loss + cross_entropy_sum(fwd.logits, labels).scale(self.class_weight);
        }
        if self.alpha_tv > 0.0 {
            loss = loss + x.total_variation().scale(self.alpha_tv);
        }
        if self.alpha_l2 > 0.0 {
            loss = loss + x.square().sum().scale(self.alpha_l2);
        }
        if self.bn_weight > 0.0 {
            for ((m, v), stats) in fwd.bn_batch.iter().zip(net.bn_stats()) {
                let rm = g.constant(stats.mean.clone());
                let rv = g.constant(stats.var.clone());
                let term = (*m - rm).square().sum() + (*v - rv).square().sum();
                loss = loss + term.scale(self.bn_weight);
            }
        }
        loss
    }
}

fn random_inits(cfg: &AttackConfig, shape: &[usize], start: usize, n: usize) -> Tensor {
    let per: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n * per);
    for i in start..start + n {
        let mut rng = stream_rng(cfg.seed, "input-init", i as u64);
        data.extend((0..per).map(|_| rng.random::<f32>()));
    }
    let mut s = vec![n];
    s.extend_from_slice(shape);
    Tensor::new(s, data)
}

/// Runs the descent on every candidate; `on_step` sees the full candidate
/// tensor for each batch after each step.
fn descend(
    net: &Network,
    obj: Objective,
    cfg: &AttackConfig,
    mut on_step: impl FnMut(usize, usize, &Tensor),
) -> (Tensor, Vec<usize>) {
    let input = net.spec().input;
    let chw = [input.channels, input.height, input.width];
    let n = cfg.candidate_count();
    let labels = slot_labels(n, net.classes());
    let mut parts = Vec::new();
    for start in (0..n).step_by(cfg.batch_size) {
        let b = cfg.batch_size.min(n - start);
        let lab = &labels[start..start + b];
        let mut x = random_inits(cfg, &chw, start, b);
        for step in 0..cfg.iterations {
            let g = Graph::new();
            let xv = g.param(x.clone());
            let loss = obj.loss(net, xv, lab);
            let mut grads = g.backward(loss);
            let gx = grads.take_or_zeros(xv);
            let lr = cfg.step_size;
            x = x.zip_map(&gx, |v, d| (v - lr * d).clamp(0.0, 1.0));
            on_step(start, step, &x);
        }
        parts.push(x);
    }
    (Tensor::concat_outer(&parts), labels)
}

fn run(id: &str, view: &ModelView, cfg: &AttackConfig) -> Result<ReconstructionResult> {
    let net = view.network()?;
    cfg.validate()?;
    if id == "deep_inversion" && !net.has_bn() {
        return Err(Error::Invalid(
            "deep_inversion needs a model with batch-norm layers".into(),
        ));
    }
    let (x, labels) = descend(net, Objective::for_attack(id, cfg), cfg, |_, _, _| {});
    let (data, pool) = select_candidates(view, &x, &labels, cfg.target_size, &ConfidenceSelector)?;
    let mut r = ReconstructionResult::new(data, id, classify_attack(id)?, cfg.seed);
    if let Some(p) = pool {
        r = r.with_pool(p);
    }
    Ok(r)
}

/// Gradient descent on the classification loss from random inputs.
pub fn mi_face(view: &ModelView, cfg: &AttackConfig) -> Result<ReconstructionResult> {
    run("mi_face", view, cfg)
}

/// MI-Face plus total-variation and ℓ2 image priors.
pub fn deep_dream(view: &ModelView, cfg: &AttackConfig) -> Result<ReconstructionResult> {
    run("deep_dream", view, cfg)
}

/// DeepDream plus matching of batch-norm running statistics.
pub fn deep_inversion(view: &ModelView, cfg: &AttackConfig) -> Result<ReconstructionResult> {
    run("deep_inversion", view, cfg)
}

/// Per-step candidate tensors (all candidates, in slot order) of an
/// input-space attack; used to check reductions between attacks.
pub fn input_trajectory(id: &str, view: &ModelView, cfg: &AttackConfig) -> Result<Vec<Tensor>> {
    if !matches!(id, "mi_face" | "deep_dream" | "deep_inversion") {
        return Err(Error::Invalid(format!("`{id}` is not an input-space attack")));
    }
    let net = view.network()?;
    cfg.validate()?;
    let mut steps: Vec<Vec<Tensor>> = vec![Vec::new(); cfg.iterations];
    descend(net, Objective::for_attack(id, cfg), cfg, |_, step, x| steps[step].push(x.clone()));
    Ok(steps.iter().map(|parts| Tensor::concat_outer(parts)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::total_variation;
    use crate::data::ImageShape;
    use crate::nn::{Architecture, ModelSpec};

    fn tiny_cnn() -> ModelView {
        let net = Network::new(
            ModelSpec {
                architecture: Architecture::Cnn {
                    channels: vec![2, 4],
                    feature_width: 4,
                    batch_norm: true,
                },
                input: ImageShape::new(8, 8, 1),
                classes: 3,
            },
            5,
        )
        .unwrap();
        ModelView::owned(net)
    }

    fn cfg(id: &str, iterations: usize) -> AttackConfig {
        AttackConfig {
            iterations,
            batch_size: 4,
            ..AttackConfig::preset(id, 6)
        }
    }

    #[test]
    fn same_seed_same_output_and_contract() {
        let v = tiny_cnn();
        let a = mi_face(&v, &cfg("mi_face", 3)).unwrap();
        let b = mi_face(&v, &cfg("mi_face", 3)).unwrap();
        assert_eq!(a.data, b.data);
        assert!(crate::result::check_result_contract(&a, 6));
        assert_eq!(a.data.labels(), &[0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn constant_classifier_leaves_inits_unchanged() {
        let mut net = tiny_cnn().network().unwrap().clone();
        let n = net.params().len();
        // zero the classifier weights: logits no longer depend on x
        net.params_mut()[n - 2] = Tensor::zeros(net.params()[n - 2].shape());
        let v = ModelView::owned(net);
        let c = cfg("mi_face", 5);
        let r = mi_face(&v, &c).unwrap();
        let z = mi_face(&v, &AttackConfig { iterations: 0, ..c }).unwrap();
        assert_eq!(r.data, z.data);
    }

    #[test]
    fn zero_regularizers_reduce_deep_dream_to_mi_face() {
        let v = tiny_cnn();
        let mut dd = cfg("deep_dream", 4);
        dd.alpha_tv = 0.0;
        dd.alpha_l2 = 0.0;
        let a = input_trajectory("deep_dream", &v, &dd).unwrap();
        let b = input_trajectory("mi_face", &v, &AttackConfig { attack_id: "mi_face".into(), ..dd.clone() }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tv_only_descent_smooths_a_checkerboard() {
        let net = tiny_cnn().network().unwrap().clone();
        let obj = Objective {
            class_weight: 0.0,
            alpha_tv: 1.0,
            alpha_l2: 0.0,
            bn_weight: 0.0,
        };
        let mut x = Tensor::from_fn(&[1, 1, 8, 8], |i| ((i / 8 + i % 8) % 2) as f32);
        let before = total_variation(&x);
        let g = Graph::new();
        let xv = g.param(x.clone());
        let loss = obj.loss(&net, xv, &[0]);
        let gx = g.backward(loss).take_or_zeros(xv);
        x = x.zip_map(&gx, |v, d| (v - 0.05 * d).clamp(0.0, 1.0));
        assert!(total_variation(&x) < before);
    }

    #[test]
    fn deep_inversion_refuses_models_without_bn() {
        let net = Network::new(
            ModelSpec {
                architecture: Architecture::Cnn {
                    channels: vec![2],
                    feature_width: 4,
                    batch_norm: false,
                },
                input: ImageShape::new(8, 8, 1),
                classes: 3,
            },
            5,
        )
        .unwrap();
        let v = ModelView::owned(net);
        assert!(matches!(deep_inversion(&v, &cfg("deep_inversion", 1)), Err(Error::Invalid(_))));
    }

    #[test]
    fn black_box_views_fail_before_optimizing() {
        use crate::knowledge::{DatasetAccess, KnowledgeTriple, ModelAccess, TrainingType};
        let net = tiny_cnn().network().unwrap().clone();
        let m = crate::model::TargetModel::new(net);
        let bb = crate::model::restrict_access(
            &m,
            &KnowledgeTriple::new(TrainingType::Static, ModelAccess::BlackBox, DatasetAccess::NoData),
        )
        .unwrap();
        assert!(matches!(mi_face(&bb, &cfg("mi_face", 1)), Err(Error::Capability(_))));
        assert_eq!(bb.queries_used(), 0);
    }

    #[test]
    fn matching_bn_stats_give_zero_bn_loss() {
        let mut net = tiny_cnn().network().unwrap().clone();
        let x = Tensor::from_fn(&[4, 1, 8, 8], |i| ((i * 7) % 13) as f32 / 13.0);
        // set the running stats to this batch's statistics, one layer per
        // pass (later layers see the earlier layers' normalization)
        for _ in 0..net.bn_stats().len() {
            let g = Graph::new();
            let fwd = net.forward(
                g.constant(x.clone()),
                ForwardOptions {
                    train: false,
                    bn_inputs: true,
                },
            );
            let stats: Vec<_> = fwd.bn_batch.iter().map(|(m, v)| ((*m.value()).clone(), (*v.value()).clone())).collect();
            for (s, (m, v)) in net.bn_stats_mut().iter_mut().zip(stats) {
                s.mean = m;
                s.var = v;
            }
        }
        let obj = Objective {
            class_weight: 0.0,
            alpha_tv: 0.0,
            alpha_l2: 0.0,
            bn_weight: 1.0,
        };
        let g = Graph::new();
        let l = obj.loss(&net, g.constant(x), &[0, 1, 2, 0]);
        assert!(l.value().item().abs() < 1e-10, "{}", l.value().item());
    }
}
