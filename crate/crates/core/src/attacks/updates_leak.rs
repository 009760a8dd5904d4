//! Reconstruction of an update batch from the posterior difference of two
//! model versions on a fixed probe set.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gan::normal_latents;
use super::{stream_rng, AttackConfig};
use crate::autograd::Graph;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::knowledge::classify_attack;
use crate::model::ModelView;
use crate::nn::{
    fit, Activation, Architecture, DenseActivation, DenseStack, ModelSpec, Network, Optimizer, OptimizerKind,
    TrainConfig,
};
use crate::result::ReconstructionResult;
use crate::tensor::{argmax, Tensor};

const CODE_WIDTH: usize = 64;
const NOISE_WIDTH: usize = 16;
const HELD_OUT_PAIRS: usize = 4;

/// Shadow self-test and diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdatesLeakReport {
    /// Symmetric best-match MSE of the decoder on held-out shadow pairs.
    pub held_out_mse: f64,
    /// Same, for a decoder that always emits the aux mean image.
    pub baseline_mse: f64,
    pub shadow_pairs: usize,
    /// The two target versions gave identical posteriors on the probe set.
    pub no_update: bool,
}

/// Symmetric best-match MSE between two image sets (rows).
pub fn chamfer_mse(a: &Tensor, b: &Tensor) -> f64 {
    let d = pairwise_sq(a, b);
    let (n, m) = (a.rows(), b.rows());
    let cols = a.cols() as f64;
    let row_min: f64 = (0..n).map(|i| (0..m).map(|j| d[i * m + j]).fold(f64::INFINITY, f64::min)).sum();
    let col_min: f64 = (0..m).map(|j| (0..n).map(|i| d[i * m + j]).fold(f64::INFINITY, f64::min)).sum();
    0.5 * (row_min / n as f64 + col_min / m as f64) / cols
}

fn pairwise_sq(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, m) = (a.rows(), b.rows());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = a.row(i).iter().zip(b.row(j)).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
        }
    }
    out
}

struct LeakDecoder {
    encoder: DenseStack,
    generator: DenseStack,
    noise: Tensor,
}

impl LeakDecoder {
    fn new(delta_dim: usize, pixels: usize, cfg: &AttackConfig) -> Self {
        let mut g_sizes = vec![CODE_WIDTH + NOISE_WIDTH];
        g_sizes.extend(&cfg.decoder.hidden);
        g_sizes.push(pixels);
        Self {
            encoder: DenseStack::new(&[delta_dim, CODE_WIDTH], DenseActivation::Identity, DenseActivation::Tanh, cfg.seed),
            generator: DenseStack::new(&g_sizes, DenseActivation::Relu, DenseActivation::Sigmoid, cfg.seed ^ 0x6E4),
            noise: normal_latents(&mut stream_rng(cfg.seed, "leak-noise", 0), cfg.update_size, NOISE_WIDTH),
        }
    }

    fn param_count(&self) -> usize {
        self.encoder.params().len()
    }

    /// Images `[update_size, pixels]` for one posterior difference `[1, D]`.
    fn emit(&self, delta: &Tensor) -> Tensor {
        let g = Graph::new();
        let pe = self.encoder.bind(&g, false);
        let pg = self.generator.bind(&g, false);
        let v = self.forward(&g, &pe, &pg, delta).value();
        (*v).clone()
    }

    fn forward<'g>(
        &self,
        g: &'g Graph,
        pe: &[crate::autograd::Var<'g>],
        pg: &[crate::autograd::Var<'g>],
        delta: &Tensor,
    ) -> crate::autograd::Var<'g> {
        let k = self.noise.rows();
        let code = self.encoder.forward_with(g.constant(delta.clone()), pe);
        let ones = g.constant(Tensor::full(&[k, 1], 1.0));
        let input = ones.matmul(code).concat_cols(g.constant(self.noise.clone()));
        self.generator.forward_with(input, pg)
    }

    /// One Adam step on the symmetric best-match loss for a shadow pair.
    fn train_step(&mut self, opt: &mut Optimizer, delta: &Tensor, target: &Tensor) -> f64 {
        let g = Graph::new();
        let pe = self.encoder.bind(&g, true);
        let pg = self.generator.bind(&g, true);
        let out = self.forward(&g, &pe, &pg, delta);
        let ov = out.value();
        let (n, m) = (ov.rows(), target.rows());
        let d = pairwise_sq(&ov, target);
        // nearest target for each output, nearest output for each target
        let mut fwd = vec![0.0f32; n * m];
        for i in 0..n {
            let j = (0..m).min_by(|&a, &b| d[i * m + a].total_cmp(&d[i * m + b])).expect("non-empty");
            fwd[i * m + j] = 1.0;
        }
        let mut bwd = vec![0.0f32; m * n];
        for j in 0..m {
            let i = (0..n).min_by(|&a, &b| d[a * m + j].total_cmp(&d[b * m + j])).expect("non-empty");
            bwd[j * n + i] = 1.0;
        }
        let t = g.constant(target.clone());
        let matched_t = g.constant(Tensor::new(vec![n, m], fwd)).matmul(t);
        let matched_o = g.constant(Tensor::new(vec![m, n], bwd)).matmul(out);
        let loss = (out - matched_t).square().sum().scale(0.5 / n as f32)
            + (matched_o - t).square().sum().scale(0.5 / m as f32);
        let lv = loss.value().item() as f64;
        let mut gr = g.backward(loss);
        let ge: Vec<Tensor> = pe.iter().map(|&v| gr.take_or_zeros(v)).collect();
        let gg: Vec<Tensor> = pg.iter().map(|&v| gr.take_or_zeros(v)).collect();
        let ne = self.param_count();
        let mut params: Vec<Tensor> = self.encoder.params().iter().chain(self.generator.params()).cloned().collect();
        let grads: Vec<Tensor> = ge.into_iter().chain(gg).collect();
        opt.step(&mut params, &grads, None);
        let (pe_new, pg_new) = params.split_at(ne);
        self.encoder.params_mut().clone_from_slice(pe_new);
        self.generator.params_mut().clone_from_slice(pg_new);
        lv
    }
}

fn posterior_delta(before: &Tensor, after: &Tensor) -> Tensor {
    let d = after.zip_map(before, |a, b| a - b);
    let n = d.len();
    d.reshape(&[1, n])
}

/// Runs the attack; also returns the shadow self-test.
pub fn updates_leak(view: &ModelView, aux: &LabeledDataset, cfg: &AttackConfig) -> Result<(ReconstructionResult, UpdatesLeakReport)> {
    cfg.validate()?;
    let [v0, v1] = view.versions()?;
    if cfg.target_size != cfg.update_size {
        return Err(Error::Invalid(format!(
            "updates_leak emits the update batch: target_size {} must equal update_size {}",
            cfg.target_size, cfg.update_size
        )));
    }
    if cfg.shadow_count == 0 {
        return Err(Error::Invalid("shadow_count must be positive".into()));
    }
    if aux.shape() != view.input_shape() {
        return Err(Error::DimensionMismatch("aux images do not match the model input".into()));
    }
    let needed = cfg.probe_count + cfg.update_size;
    if aux.len() < needed {
        return Err(Error::InsufficientSamples { needed, got: aux.len() });
    }
    let classes = view.class_count();
    let shape = aux.shape();
    let pixels = shape.len();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..aux.len()).collect();
    order.shuffle(&mut rng);
    let probe = aux.subset(&order[..cfg.probe_count]).all_nchw();
    let pool: Vec<usize> = order[cfg.probe_count..].to_vec();
    let pool_ds = aux.subset(&pool);

    // shadow base model on the attacker's data
    let spec = ModelSpec {
        architecture: Architecture::Mlp {
            hidden: vec![64],
            bias: true,
            activation: Activation::Relu,
        },
        input: shape,
        classes,
    };
    let mut base = Network::new(spec, cfg.seed)?;
    fit(
        &mut base,
        &pool_ds,
        &TrainConfig {
            epochs: 3,
            batch_size: 32,
            optimizer: OptimizerKind::adam(3e-3),
            seed: cfg.seed,
        },
    )?;
    let base_post = base.predict_proba(&probe);

    // shadow updates: (posterior difference, update batch)
    let total = cfg.shadow_count + HELD_OUT_PAIRS;
    let mut pairs = Vec::with_capacity(total);
    for j in 0..total {
        let mut idx = pool.clone();
        idx.shuffle(&mut stream_rng(cfg.seed, "shadow-batch", j as u64));
        idx.truncate(cfg.update_size);
        let batch = aux.subset(&idx);
        let mut shadow = base.clone();
        fit(
            &mut shadow,
            &batch,
            &TrainConfig {
                epochs: cfg.shadow_update_steps,
                batch_size: cfg.update_size,
                optimizer: OptimizerKind::adam(1e-3),
                seed: cfg.seed ^ j as u64,
            },
        )?;
        let delta = posterior_delta(&base_post, &shadow.predict_proba(&probe));
        let images = batch.all_nchw().reshape(&[cfg.update_size, pixels]);
        pairs.push((delta, images));
    }
    let held_out = pairs.split_off(cfg.shadow_count);

    let mut dec = LeakDecoder::new(cfg.probe_count * classes, pixels, cfg);
    let mut opt = Optimizer::new(OptimizerKind::adam(cfg.decoder.lr));
    let mut ix: Vec<usize> = (0..pairs.len()).collect();
    for _ in 0..cfg.decoder.epochs {
        ix.shuffle(&mut rng);
        for &i in &ix {
            let lv = dec.train_step(&mut opt, &pairs[i].0, &pairs[i].1);
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch: 0, step: i, loss: lv });
            }
        }
    }

    let mean = Tensor::new(vec![1, pixels], pool_ds.mean_image());
    let (mut ho, mut bl) = (0.0, 0.0);
    for (delta, images) in &held_out {
        ho += chamfer_mse(&dec.emit(delta), images);
        bl += chamfer_mse(&mean, images);
    }

    // the attack proper
    let p0 = v0.query(&probe);
    let p1 = v1.query(&probe);
    let delta = posterior_delta(&p0, &p1);
    let no_update = delta.data().iter().all(|v| v.abs() < 1e-7);
    let x = dec.emit(&delta).reshape(&shape.nchw(cfg.update_size));
    let post = v1.query(&x);
    let labels: Vec<usize> = (0..cfg.update_size).map(|i| argmax(post.row(i))).collect();
    let data = LabeledDataset::from_nchw(&x, &labels, classes)?;
    let mut r = ReconstructionResult::new(data, "updates_leak", classify_attack("updates_leak")?, cfg.seed);
    if no_update {
        log::warn!("updates_leak: the two model versions agree on every probe; output is the zero-update response");
        r.flags.push("no_update: posterior difference is zero".into());
    }
    let report = UpdatesLeakReport {
        held_out_mse: ho / held_out.len() as f64,
        baseline_mse: bl / held_out.len() as f64,
        shadow_pairs: cfg.shadow_count,
        no_update,
    };
    Ok((r, report))
}
