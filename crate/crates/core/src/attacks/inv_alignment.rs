//! Inversion by alignment: a decoder from target posteriors back to images,
//! trained on auxiliary data through black-box queries.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use super::{select_candidates, slot_labels, stream_rng, AttackConfig, ConfidenceSelector, DecoderConfig};
use crate::autograd::Graph;
use crate::data::{ImageShape, LabeledDataset};
use crate::error::{Error, Result};
use crate::knowledge::classify_attack;
use crate::model::ModelView;
use crate::nn::{DenseActivation, DenseStack, Optimizer, OptimizerKind};
use crate::result::ReconstructionResult;
use crate::tensor::Tensor;

const LOG_FLOOR: f32 = 1e-6;

/// Maps posterior rows to decoder inputs in `[0, 1]`: clipped
/// log-probabilities, rescaled.
fn encode_posteriors(p: &Tensor) -> Tensor {
    let lo = LOG_FLOOR.ln();
    p.map(|v| 1.0 - v.max(LOG_FLOOR).ln() / lo)
}

/// Decoder `posterior → image` trained against a frozen target.
#[derive(Clone, Debug, PartialEq)]
pub struct InvAlignmentModel {
    pub decoder: DenseStack,
    pub image: ImageShape,
}

impl InvAlignmentModel {
    pub fn untrained(classes: usize, image: ImageShape, cfg: &DecoderConfig, seed: u64) -> Self {
        let mut sizes = vec![classes];
        sizes.extend(&cfg.hidden);
        sizes.push(image.len());
        Self {
            decoder: DenseStack::new(&sizes, DenseActivation::Relu, DenseActivation::Sigmoid, seed),
            image,
        }
    }

    /// Trains on `aux` with the target frozen (posteriors queried once).
    pub fn train(view: &ModelView, aux: &LabeledDataset, cfg: &DecoderConfig, seed: u64) -> Result<Self> {
        if aux.is_empty() {
            return Err(Error::InsufficientSamples { needed: 1, got: 0 });
        }
        let image = aux.shape();
        let mut model = Self::untrained(view.class_count(), image, cfg, seed);
        let inputs = encode_posteriors(&view.query_dataset(aux));
        let targets = aux.all_nchw().reshape(&[aux.len(), image.len()]);
        fit_decoder(&mut model.decoder, &inputs, &targets, cfg, seed)?;
        Ok(model)
    }

    /// Decoded images (NCHW) for posterior rows.
    pub fn decode(&self, posteriors: &Tensor) -> Tensor {
        let n = posteriors.rows();
        self.decoder.apply(&encode_posteriors(posteriors)).reshape(&self.image.nchw(n))
    }

    /// Mean per-pixel squared error of `decode(f(x))` against `x` over `ds`.
    pub fn reconstruction_error(&self, view: &ModelView, ds: &LabeledDataset) -> f64 {
        let rec = self.decode(&view.query_dataset(ds));
        let x = ds.all_nchw();
        rec.data().iter().zip(x.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / x.len() as f64
    }
}

/// Row-wise MSE regression of `targets` from `inputs` with Adam.
pub(crate) fn fit_decoder(net: &mut DenseStack, inputs: &Tensor, targets: &Tensor, cfg: &DecoderConfig, seed: u64) -> Result<f64> {
    let n = inputs.rows();
    let mut opt = Optimizer::new(OptimizerKind::adam(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut last = f64::NAN;
    let bs = cfg.batch_size.max(1);
    let gather = |t: &Tensor, idx: &[usize]| {
        let c = t.cols();
        let mut d = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            d.extend_from_slice(t.row(i));
        }
        Tensor::new(vec![idx.len(), c], d)
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (step, chunk) in order.chunks(bs).enumerate() {
            let g = Graph::new();
            let p = net.bind(&g, true);
            let out = net.forward_with(g.constant(gather(inputs, chunk)), &p);
            let loss = (out - g.constant(gather(targets, chunk))).square().sum().scale(1.0 / chunk.len() as f32);
            let lv = loss.value().item();
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: lv as f64 });
            }
            sum += lv as f64 * chunk.len() as f64;
            let mut gr = g.backward(loss);
            let grads: Vec<Tensor> = p.iter().map(|&v| gr.take_or_zeros(v)).collect();
            opt.step(net.params_mut(), &grads, None);
        }
        last = sum / n as f64;
    }
    Ok(last)
}

/// A posterior vector drawn from a Dirichlet peaked on `class`.
pub fn pseudo_posterior(class: usize, classes: usize, peak: f32, rest: f32, rng: &mut impl Rng) -> Vec<f32> {
    let draw = |alpha: f32, rng: &mut _| -> f64 {
        Gamma::new(alpha as f64, 1.0).expect("positive concentration").sample(rng)
    };
    let raw: Vec<f64> = (0..classes)
        .map(|c| draw(if c == class { peak } else { rest }, rng))
        .collect();
    let s: f64 = raw.iter().sum();
    if s > 0.0 {
        raw.iter().map(|v| (v / s) as f32).collect()
    } else {
        (0..classes).map(|c| f32::from(c == class)).collect()
    }
}

/// Trains the decoder on `aux`, then decodes random pseudo-posteriors.
pub fn inv_alignment(view: &ModelView, aux: &LabeledDataset, cfg: &AttackConfig) -> Result<ReconstructionResult> {
    cfg.validate()?;
    if aux.shape() != view.input_shape() {
        return Err(Error::DimensionMismatch(format!(
            "aux images {:?} but the model takes {:?}",
            aux.shape(),
            view.input_shape()
        )));
    }
    let model = InvAlignmentModel::train(view, aux, &cfg.decoder, cfg.seed)?;
    let classes = view.class_count();
    let n = cfg.candidate_count();
    let labels = slot_labels(n, classes);
    let mut post = Vec::with_capacity(n * classes);
    for (i, &c) in labels.iter().enumerate() {
        let mut rng = stream_rng(cfg.seed, "posterior", i as u64);
        post.extend(pseudo_posterior(c, classes, cfg.dirichlet_peak, cfg.dirichlet_rest, &mut rng));
    }
    let x = model.decode(&Tensor::new(vec![n, classes], post));
    let (data, pool) = select_candidates(view, &x, &labels, cfg.target_size, &ConfidenceSelector)?;
    let mut r = ReconstructionResult::new(data, "inv_alignment", classify_attack("inv_alignment")?, cfg.seed);
    if let Some(p) = pool {
        r = r.with_pool(p);
    }
    Ok(r)
}
