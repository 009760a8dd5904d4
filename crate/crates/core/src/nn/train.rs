use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cross_entropy, ForwardOptions, Network, Optimizer, OptimizerKind, BN_MOMENTUM};
use crate::autograd::Graph;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            optimizer: OptimizerKind::adam(3e-3),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub steps: usize,
}

/// Mini-batch training with cross-entropy. Aborts on a non-finite loss.
pub fn fit(net: &mut Network, data: &LabeledDataset, cfg: &TrainConfig) -> Result<FitReport> {
    if data.is_empty() {
        return Err(Error::Invalid("cannot train on an empty dataset".into()));
    }
    if data.class_count() > net.classes() {
        return Err(Error::Invalid(format!(
            "dataset has {} classes, model only {}",
            data.class_count(),
            net.classes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer);
    let mask = net.trainable_mask();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut steps = 0;
    let mut epoch_loss = 0.0;
    let bs = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(bs) {
            let labels: Vec<usize> = chunk.iter().map(|&i| data.label(i)).collect();
            let g = Graph::new();
            let x = g.constant(data.batch_nchw(chunk));
            let p = net.bind(&g, true);
            let fwd = net.forward_with(
                x,
                &p,
                ForwardOptions {
                    train: true,
                    bn_inputs: false,
                },
            );
            let loss = cross_entropy(fwd.logits, &labels);
            let lv = loss.value().item();
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: steps,
                    loss: lv as f64,
                });
            }
            loss_sum += lv as f64 * chunk.len() as f64;
            let batch_stats: Vec<_> = fwd
                .bn_batch
                .iter()
                .map(|(m, v)| ((*m.value()).clone(), (*v.value()).clone()))
                .collect();
            let mut grads = g.backward(loss);
            let gl: Vec<_> = p.iter().map(|&v| grads.take_or_zeros(v)).collect();
            drop(grads);
            opt.step(net.params_mut(), &gl, Some(&mask));
            if !net.bn_frozen() && !batch_stats.is_empty() {
                update_running(net, &batch_stats, chunk.len());
            }
            steps += 1;
        }
        epoch_loss = loss_sum / data.len() as f64;
    }
    Ok(FitReport {
        final_loss: epoch_loss,
        train_accuracy: accuracy(net, data),
        steps,
    })
}

fn update_running(net: &mut Network, stats: &[(Tensor, Tensor)], batch: usize) {
    let input = net.spec().input;
    for (b, (s, (m, v))) in net.bn_stats_mut().iter_mut().zip(stats).enumerate() {
        // block b sees the input downsampled b times by 2×2 pooling
        let count = batch * (input.height >> b) * (input.width >> b);
        let unbias = if count > 1 { count as f32 / (count - 1) as f32 } else { 1.0 };
        for (r, &b) in s.mean.data_mut().iter_mut().zip(m.data()) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, &b) in s.var.data_mut().iter_mut().zip(v.data()) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * unbias;
        }
    }
}

/// Top-1 accuracy in evaluation mode.
pub fn accuracy(net: &Network, data: &LabeledDataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let pred = net.predict(&data.all_nchw());
    pred.iter().zip(data.labels()).filter(|(p, l)| p == l).count() as f64 / data.len() as f64
}
