use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd {
        lr: f32,
        #[serde(default)]
        momentum: f32,
        #[serde(default)]
        weight_decay: f32,
    },
    Adam {
        lr: f32,
        #[serde(default = "default_beta1")]
        beta1: f32,
        #[serde(default = "default_beta2")]
        beta2: f32,
        #[serde(default)]
        weight_decay: f32,
    },
}

fn default_beta1() -> f32 {
    0.9
}

fn default_beta2() -> f32 {
    0.999
}

impl OptimizerKind {
    pub fn sgd(lr: f32) -> Self {
        OptimizerKind::Sgd {
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }

    pub fn adam(lr: f32) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
        }
    }
}

/// First-order optimizer over a fixed list of tensors.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Updates `params[i]` with `grads[i]` wherever `mask` (if given) is true.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], mask: Option<&[bool]>) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.t += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            match self.kind {
                OptimizerKind::Sgd {
                    lr,
                    momentum,
                    weight_decay,
                } => {
                    for ((w, &gr), mv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        let d = gr + weight_decay * *w;
                        let step = if momentum > 0.0 {
                            *mv = momentum * *mv + d;
                            *mv
                        } else {
                            d
                        };
                        *w -= lr * step;
                    }
                }
                OptimizerKind::Adam {
                    lr,
                    beta1,
                    beta2,
                    weight_decay,
                } => {
                    let bc1 = 1.0 - beta1.powi(self.t);
                    let bc2 = 1.0 - beta2.powi(self.t);
                    for (((w, &gr), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        let d = gr + weight_decay * *w;
                        *mv = beta1 * *mv + (1.0 - beta1) * d;
                        *vv = beta2 * *vv + (1.0 - beta2) * d * d;
                        *w -= lr * (*mv / bc1) / ((*vv / bc2).sqrt() + 1e-8);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_optimizers_minimize_a_quadratic() {
        for kind in [
            OptimizerKind::Sgd {
                lr: 0.1,
                momentum: 0.5,
                weight_decay: 0.0,
            },
            OptimizerKind::adam(0.1),
        ] {
            let mut opt = Optimizer::new(kind);
            let mut p = vec![Tensor::new(vec![2], vec![3.0, -2.0])];
            for _ in 0..300 {
                let g = p[0].map(|x| 2.0 * (x - 1.0));
                opt.step(&mut p, &[g], None);
            }
            for &x in p[0].data() {
                assert!((x - 1.0).abs() < 1e-2, "{kind:?} ended at {x}");
            }
        }
    }

    #[test]
    fn masked_parameters_stay_put() {
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.5));
        let mut p = vec![Tensor::scalar(1.0), Tensor::scalar(1.0)];
        let g = vec![Tensor::scalar(1.0), Tensor::scalar(1.0)];
        opt.step(&mut p, &g, Some(&[true, false]));
        assert_eq!((p[0].item(), p[1].item()), (0.5, 1.0));
    }
}
