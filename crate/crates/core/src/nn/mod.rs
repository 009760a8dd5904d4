//! Desk-scale classifier architectures, training loop and serialization.

pub(crate) mod blob;
mod dense;
mod optim;
mod train;

pub use dense::{DenseActivation, DenseStack};

pub use optim::{Optimizer, OptimizerKind};
pub use train::{accuracy, fit, FitReport, TrainConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::ImageShape;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply<'g>(self, v: Var<'g>) -> Var<'g> {
        match self {
            Activation::Relu => v.relu(),
            Activation::Sigmoid => v.sigmoid(),
            Activation::Tanh => v.tanh(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// VGG-style stack: per block conv3×3 → [BN] → ReLU → maxpool2, then
    /// global average pooling, a `feature_width` ReLU layer and the classifier.
    Cnn {
        channels: Vec<usize>,
        feature_width: usize,
        batch_norm: bool,
    },
    /// Fully connected network on flattened pixels.
    Mlp {
        hidden: Vec<usize>,
        bias: bool,
        activation: Activation,
    },
}

impl Architecture {
    pub fn vgg_small() -> Self {
        Architecture::Cnn {
            channels: vec![8, 16, 32, 64],
            feature_width: 64,
            batch_norm: true,
        }
    }

    pub fn id(&self) -> String {
        match self {
            Architecture::Cnn {
                channels,
                feature_width,
                batch_norm,
            } => format!(
                "cnn{}-f{}{}",
                channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("x"),
                feature_width,
                if *batch_norm { "-bn" } else { "" }
            ),
            Architecture::Mlp {
                hidden,
                bias,
                activation,
            } => format!(
                "mlp{}-{:?}{}",
                hidden.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("x"),
                activation,
                if *bias { "" } else { "-nobias" }
            )
            .to_lowercase(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input: ImageShape,
    pub classes: usize,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Tensor,
    pub var: Tensor,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Normalize with batch statistics instead of running statistics.
    pub train: bool,
    /// Also return the per-channel mean/variance of every BN layer input.
    pub bn_inputs: bool,
}

pub struct Forward<'g> {
    pub logits: Var<'g>,
    /// Output of the last hidden layer.
    pub features: Var<'g>,
    /// Batch (mean, biased variance) at each BN input, when requested or
    /// when training.
    pub bn_batch: Vec<(Var<'g>, Var<'g>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: ModelSpec,
    params: Vec<Tensor>,
    bn: Vec<BnStats>,
    bn_frozen: bool,
}

fn he(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let n = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("valid std");
    Tensor::from_fn(shape, |_| n.sample(rng))
}

impl Network {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        if spec.classes < 2 {
            return Err(Error::Invalid("a classifier needs at least two classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut bn = Vec::new();
        match &spec.architecture {
            Architecture::Cnn {
                channels,
                feature_width,
                batch_norm,
            } => {
                if channels.is_empty() || *feature_width == 0 {
                    return Err(Error::Invalid("empty CNN".into()));
                }
                let mut side = spec.input.height.min(spec.input.width);
                let mut cin = spec.input.channels;
                for &c in channels {
                    if side < 2 {
                        return Err(Error::Invalid(format!(
                            "{} pooling blocks do not fit {:?}",
                            channels.len(),
                            spec.input
                        )));
                    }
                    side /= 2;
                    params.push(he(&mut rng, &[c, cin, 3, 3], cin * 9));
                    if *batch_norm {
                        params.push(Tensor::full(&[c], 1.0));
                        params.push(Tensor::zeros(&[c]));
                        bn.push(BnStats {
                            mean: Tensor::zeros(&[c]),
                            var: Tensor::full(&[c], 1.0),
                        });
                    } else {
                        params.push(Tensor::zeros(&[c]));
                    }
                    cin = c;
                }
                params.push(he(&mut rng, &[cin, *feature_width], cin));
                params.push(Tensor::zeros(&[*feature_width]));
                params.push(he(&mut rng, &[*feature_width, spec.classes], *feature_width));
                params.push(Tensor::zeros(&[spec.classes]));
            }
            Architecture::Mlp { hidden, bias, .. } => {
                let mut din = spec.input.len();
                for &h in hidden.iter().chain(std::iter::once(&spec.classes)) {
                    params.push(he(&mut rng, &[din, h], din));
                    if *bias {
                        params.push(Tensor::zeros(&[h]));
                    }
                    din = h;
                }
            }
        }
        Ok(Self {
            spec,
            params,
            bn,
            bn_frozen: false,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn bn_stats(&self) -> &[BnStats] {
        &self.bn
    }

    pub fn bn_stats_mut(&mut self) -> &mut [BnStats] {
        &mut self.bn
    }

    pub fn has_bn(&self) -> bool {
        !self.bn.is_empty()
    }

    pub fn bn_frozen(&self) -> bool {
        self.bn_frozen
    }

    /// Keeps BN affine parameters and running statistics at their initial
    /// values during training; BN then acts as the identity.
    pub fn set_bn_frozen(&mut self, frozen: bool) {
        self.bn_frozen = frozen;
    }

    pub fn feature_width(&self) -> usize {
        match &self.spec.architecture {
            Architecture::Cnn { feature_width, .. } => *feature_width,
            Architecture::Mlp { hidden, .. } => hidden.last().copied().unwrap_or(self.spec.input.len()),
        }
    }

    /// Whether every layer is bias-free (positively homogeneous for ReLU).
    pub fn is_bias_free(&self) -> bool {
        matches!(
            &self.spec.architecture,
            Architecture::Mlp {
                bias: false,
                activation: Activation::Relu,
                ..
            }
        )
    }

    /// Per-parameter flag: false for tensors the trainer must not update.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.params.len()];
        if let Architecture::Cnn {
            channels,
            batch_norm: true,
            ..
        } = &self.spec.architecture
        {
            if self.bn_frozen {
                for b in 0..channels.len() {
                    mask[b * 3 + 1] = false;
                    mask[b * 3 + 2] = false;
                }
            }
        }
        mask
    }

    /// Parameters as graph leaves.
    pub fn bind<'g>(&self, g: &'g Graph, requires_grad: bool) -> Vec<Var<'g>> {
        self.params.iter().map(|p| g.leaf(p.clone(), requires_grad)).collect()
    }

    /// Forward pass of an NCHW batch with externally bound parameters.
    pub fn forward_with<'g>(&self, x: Var<'g>, p: &[Var<'g>], opts: ForwardOptions) -> Forward<'g> {
        let g = x.graph();
        let mut bn_batch = Vec::new();
        match &self.spec.architecture {
            Architecture::Cnn {
                channels,
                batch_norm,
                ..
            } => {
                let mut h = x;
                let mut k = 0;
                for (b, _) in channels.iter().enumerate() {
                    h = h.conv2d(p[k], 1, 1);
                    if *batch_norm {
                        let (gamma, beta) = (p[k + 1], p[k + 2]);
                        let use_batch = opts.train && !self.bn_frozen;
                        let stats = (use_batch || opts.bn_inputs).then(|| {
                            let m = h.channel_mean();
                            let v = h.sub_channel(m).square().channel_mean();
                            (m, v)
                        });
                        let (mean, var) = if use_batch {
                            stats.expect("batch statistics computed")
                        } else {
                            (
                                g.constant(self.bn[b].mean.clone()),
                                g.constant(self.bn[b].var.clone()),
                            )
                        };
                        if let Some(s) = stats {
                            bn_batch.push(s);
                        }
                        let inv = var.add_scalar(BN_EPS).powf(-0.5);
                        h = h.sub_channel(mean).mul_channel(inv).mul_channel(gamma).add_channel(beta);
                        k += 3;
                    } else {
                        h = h.add_channel(p[k + 1]);
                        k += 2;
                    }
                    h = h.relu().max_pool2();
                }
                let pooled = h.global_avg_pool();
                let features = pooled.matmul(p[k]).add_channel(p[k + 1]).relu();
                let logits = features.matmul(p[k + 2]).add_channel(p[k + 3]);
                Forward {
                    logits,
                    features,
                    bn_batch,
                }
            }
            Architecture::Mlp {
                hidden,
                bias,
                activation,
            } => {
                let n = x.value().shape()[0];
                let mut h = x.reshape(&[n, self.spec.input.len()]);
                let mut k = 0;
                let mut features = h;
                for layer in 0..=hidden.len() {
                    h = h.matmul(p[k]);
                    k += 1;
                    if *bias {
                        h = h.add_channel(p[k]);
                        k += 1;
                    }
                    if layer < hidden.len() {
                        h = activation.apply(h);
                        features = h;
                    }
                }
                Forward {
                    logits: h,
                    features,
                    bn_batch,
                }
            }
        }
    }

    /// Forward pass with the stored parameters as constants.
    pub fn forward<'g>(&self, x: Var<'g>, opts: ForwardOptions) -> Forward<'g> {
        let p = self.bind(x.graph(), false);
        self.forward_with(x, &p, opts)
    }

    fn batched(&self, x: &Tensor, f: impl Fn(&Forward<'_>) -> Tensor) -> Tensor {
        let n = x.shape()[0];
        let mut parts = Vec::new();
        for start in (0..n).step_by(256) {
            let end = (start + 256).min(n);
            let g = Graph::new();
            let xv = g.constant(x.slice_outer(start, end));
            parts.push(f(&self.forward(xv, ForwardOptions::default())));
        }
        if parts.is_empty() {
            return Tensor::zeros(&[0, self.spec.classes]);
        }
        let cols = parts[0].cols();
        let data: Vec<f32> = parts.into_iter().flat_map(Tensor::into_data).collect();
        Tensor::new(vec![n, cols], data)
    }

    /// Evaluation-mode logits for an NCHW batch.
    pub fn logits(&self, x: &Tensor) -> Tensor {
        self.batched(x, |f| (*f.logits.value()).clone())
    }

    /// Evaluation-mode class posteriors.
    pub fn predict_proba(&self, x: &Tensor) -> Tensor {
        self.batched(x, |f| (*f.logits.softmax().value()).clone())
    }

    /// Evaluation-mode penultimate features.
    pub fn features(&self, x: &Tensor) -> Tensor {
        self.batched(x, |f| (*f.features.value()).clone())
    }

    pub fn predict(&self, x: &Tensor) -> Vec<usize> {
        self.logits(x).argmax_rows()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::json!({
            "spec": self.spec,
            "bn_frozen": self.bn_frozen,
        });
        let tensors: Vec<&Tensor> = self
            .params
            .iter()
            .chain(self.bn.iter().flat_map(|s| [&s.mean, &s.var]))
            .collect();
        blob::encode(b"RBNET002", &header, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, tensors) = blob::decode(b"RBNET002", bytes)?;
        let spec: ModelSpec = serde_json::from_value(header["spec"].clone())?;
        let mut net = Network::new(spec, 0)?;
        net.bn_frozen = header["bn_frozen"].as_bool().unwrap_or(false);
        if tensors.len() != net.params.len() + 2 * net.bn.len() {
            return Err(Error::Invalid("network file has the wrong tensor count".into()));
        }
        let mut it = tensors.into_iter();
        for p in net.params.iter_mut() {
            let t = it.next().expect("counted");
            if t.shape() != p.shape() {
                return Err(Error::Invalid("network parameter shape mismatch".into()));
            }
            *p = t;
        }
        for s in net.bn.iter_mut() {
            s.mean = it.next().expect("counted");
            s.var = it.next().expect("counted");
        }
        Ok(net)
    }
}

/// Mean cross-entropy of `logits` against hard labels.
pub fn cross_entropy<'g>(logits: Var<'g>, labels: &[usize]) -> Var<'g> {
    let c = logits.value().cols();
    let onehot = Tensor::from_fn(&[labels.len(), c], |i| {
        if i % c == labels[i / c] {
            1.0
        } else {
            0.0
        }
    });
    let t = logits.graph().constant(onehot);
    -(logits.log_softmax() * t).sum().scale(1.0 / labels.len() as f32)
}

/// Summed cross-entropy against hard labels (per-sample terms independent
/// of batch size).
pub fn cross_entropy_sum<'g>(logits: Var<'g>, labels: &[usize]) -> Var<'g> {
    cross_entropy(logits, labels).scale(labels.len() as f32)
}

/// Summed cross-entropy against soft targets (rows of probabilities).
pub fn soft_cross_entropy_sum<'g>(logits: Var<'g>, targets: Var<'g>) -> Var<'g> {
    -(logits.log_softmax() * targets).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mnist_spec(arch: Architecture) -> ModelSpec {
        ModelSpec {
            architecture: arch,
            input: ImageShape::MNIST,
            classes: 10,
        }
    }

    #[test]
    fn forward_shapes_and_probabilities() {
        let net = Network::new(mnist_spec(Architecture::vgg_small()), 1).unwrap();
        let x = Tensor::from_fn(&[3, 1, 28, 28], |i| (i % 17) as f32 / 17.0);
        let p = net.predict_proba(&x);
        assert_eq!(p.shape(), &[3, 10]);
        for r in 0..3 {
            assert!((p.row(r).iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
        assert_eq!(net.features(&x).shape(), &[3, 64]);
    }

    #[test]
    fn serialization_round_trips() {
        let mut net = Network::new(mnist_spec(Architecture::vgg_small()), 7).unwrap();
        net.bn_stats_mut()[0].mean.data_mut()[0] = 0.25;
        net.set_bn_frozen(true);
        let back = Network::from_bytes(&net.to_bytes()).unwrap();
        assert_eq!(back, net);
        let mlp = Network::new(
            mnist_spec(Architecture::Mlp {
                hidden: vec![12],
                bias: false,
                activation: Activation::Relu,
            }),
            3,
        )
        .unwrap();
        assert!(mlp.is_bias_free());
        assert_eq!(Network::from_bytes(&mlp.to_bytes()).unwrap(), mlp);
        assert!(Network::from_bytes(b"nope").is_err());
    }

    #[test]
    fn frozen_bn_masks_affine_parameters() {
        let mut net = Network::new(mnist_spec(Architecture::vgg_small()), 7).unwrap();
        assert!(net.trainable_mask().iter().all(|&m| m));
        net.set_bn_frozen(true);
        assert_eq!(net.trainable_mask().iter().filter(|&&m| !m).count(), 8);
    }

    #[test]
    fn too_many_blocks_is_rejected() {
        let spec = ModelSpec {
            architecture: Architecture::Cnn {
                channels: vec![2; 6],
                feature_width: 4,
                batch_norm: false,
            },
            input: ImageShape::MNIST,
            classes: 10,
        };
        assert!(Network::new(spec, 0).is_err());
    }
}
