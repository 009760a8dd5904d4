//! Fully connected GANs trained on the auxiliary dataset: the image priors
//! of Revealer, KEDMI and PLGMI.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::GanConfig;
use crate::autograd::{Graph, Var};
use crate::data::{ImageShape, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::ModelView;
use crate::nn::{blob, cross_entropy, DenseActivation, DenseStack, Optimizer, OptimizerKind};
use crate::tensor::{argmax, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorMode {
    /// Unconditional GAN on the auxiliary data.
    PlainGan,
    /// Discriminator also predicts the target model's labels of real data.
    LabelDistilledGan,
    /// Class-conditional GAN on the most confidently pseudo-labelled aux
    /// samples.
    ConditionalPseudoGan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorProvenance {
    pub aux_hash: String,
    pub steps: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorBundle {
    pub mode: GeneratorMode,
    pub generator: DenseStack,
    pub discriminator: Option<DenseStack>,
    pub latent_dim: usize,
    pub image: ImageShape,
    /// One-hot width of the condition input; 0 for unconditional modes.
    pub condition_width: usize,
    /// Classes the conditional generator was trained on.
    pub conditions: Vec<usize>,
    pub provenance: GeneratorProvenance,
}

fn one_hot(labels: &[usize], width: usize) -> Tensor {
    Tensor::from_fn(&[labels.len(), width], |i| f32::from(i % width == labels[i / width]))
}

/// Column selector `[cols, 1]` picking column `c`.
fn column(g: &Graph, cols: usize, c: usize) -> Var<'_> {
    g.constant(Tensor::from_fn(&[cols, 1], |i| f32::from(i == c)))
}

/// Selector `[cols, cols-1]` dropping column 0.
fn tail_columns(g: &Graph, cols: usize) -> Var<'_> {
    g.constant(Tensor::from_fn(&[cols, cols - 1], |i| {
        f32::from(i / (cols - 1) == i % (cols - 1) + 1)
    }))
}

fn cond_var<'g>(g: &'g Graph, width: usize, labels: &[usize]) -> Var<'g> {
    g.constant(one_hot(labels, width))
}

pub(crate) fn normal_latents(rng: &mut impl Rng, n: usize, dim: usize) -> Tensor {
    Tensor::from_fn(&[n, dim], |_| rng.sample::<f32, _>(StandardNormal))
}

impl GeneratorBundle {
    fn conditional(&self) -> bool {
        self.condition_width > 0
    }

    fn check(&self, n: usize, labels: Option<&[usize]>) -> Result<()> {
        if self.conditional() {
            let labels = labels.ok_or_else(|| Error::Invalid("conditional generator needs labels".into()))?;
            if labels.len() != n {
                return Err(Error::DimensionMismatch(format!("{} labels for {n} latents", labels.len())));
            }
            if let Some(c) = labels.iter().find(|c| !self.conditions.contains(c)) {
                return Err(Error::Invalid(format!("class {c} is not in the generator's condition vocabulary")));
            }
        }
        Ok(())
    }

    /// `G(z[, y])` as an NCHW batch, with `z` a graph node.
    pub fn forward<'g>(&self, z: Var<'g>, labels: Option<&[usize]>) -> Result<Var<'g>> {
        let s = z.shape();
        if s.len() != 2 || s[1] != self.latent_dim {
            return Err(Error::DimensionMismatch(format!(
                "latent batch {s:?} does not match latent dim {}",
                self.latent_dim
            )));
        }
        self.check(s[0], labels)?;
        let input = match labels {
            Some(l) if self.conditional() => z.concat_cols(z.graph().constant(one_hot(l, self.condition_width))),
            _ => z,
        };
        let x = self.generator.forward(input);
        Ok(x.reshape(&self.image.nchw(s[0])))
    }

    pub fn generate(&self, z: &Tensor, labels: Option<&[usize]>) -> Result<Tensor> {
        let g = Graph::new();
        let out = self.forward(g.constant(z.clone()), labels)?;
        let v = out.value();
        Ok((*v).clone())
    }

    /// Discriminator realism logit for an NCHW batch (graph node).
    pub fn realism<'g>(&self, x: Var<'g>, labels: Option<&[usize]>) -> Option<Var<'g>> {
        let d = self.discriminator.as_ref()?;
        let n = x.shape()[0];
        let flat = x.reshape(&[n, self.image.len()]);
        let input = match labels {
            Some(l) if self.conditional() => flat.concat_cols(x.graph().constant(one_hot(l, self.condition_width))),
            _ => flat,
        };
        let out = d.forward(input);
        let cols = d.output_dim();
        Some(if cols == 1 { out } else { out.matmul(column(x.graph(), cols, 0)) })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::json!({
            "mode": self.mode,
            "latent_dim": self.latent_dim,
            "image": self.image,
            "condition_width": self.condition_width,
            "conditions": self.conditions,
            "provenance": self.provenance,
            "generator": base64_blob(&self.generator.to_bytes()),
            "discriminator": self.discriminator.as_ref().map(|d| base64_blob(&d.to_bytes())),
        });
        blob::encode(b"RBGEN001", &header, &[])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, _) = blob::decode(b"RBGEN001", bytes)?;
        let stack = |v: &serde_json::Value| -> Result<DenseStack> {
            let s = v.as_str().ok_or_else(|| Error::Invalid("generator file lacks a network".into()))?;
            DenseStack::from_bytes(&unbase64_blob(s)?)
        };
        Ok(Self {
            mode: serde_json::from_value(h["mode"].clone())?,
            latent_dim: serde_json::from_value(h["latent_dim"].clone())?,
            image: serde_json::from_value(h["image"].clone())?,
            condition_width: serde_json::from_value(h["condition_width"].clone())?,
            conditions: serde_json::from_value(h["conditions"].clone())?,
            provenance: serde_json::from_value(h["provenance"].clone())?,
            generator: stack(&h["generator"])?,
            discriminator: match &h["discriminator"] {
                serde_json::Value::Null => None,
                v => Some(stack(v)?),
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(Error::io(path))?)
    }
}

fn base64_blob(bytes: &[u8]) -> String {
    use base64::Engine;
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn unbase64_blob(s: &str) -> Result<Vec<u8>> {
    use base64::Engine;
    base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| Error::Invalid(format!("bad embedded network: {e}")))
}

/// Disk-cache key of a generator: hash of (aux content, mode, seed, config).
pub fn generator_cache_key(aux: &LabeledDataset, mode: GeneratorMode, latent_dim: usize, cfg: &GanConfig, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(aux.content_hash().as_bytes());
    h.update(serde_json::to_vec(&(mode, latent_dim, cfg, seed)).expect("serializable"));
    hex::encode(&h.finalize()[..12])
}

/// Pseudo-labels and confidences of the target model on `aux`.
fn pseudo_labels(view: &ModelView, aux: &LabeledDataset) -> (Vec<usize>, Vec<f32>) {
    let p = view.query_dataset(aux);
    (0..aux.len())
        .map(|i| {
            let c = argmax(p.row(i));
            (c, p.row(i)[c])
        })
        .unzip()
}

/// Trains a generator for `mode` on `aux`. Modes other than `PlainGan`
/// query `view` for pseudo-labels.
pub fn train_generator(
    aux: &LabeledDataset,
    mode: GeneratorMode,
    view: Option<&ModelView>,
    latent_dim: usize,
    cfg: &GanConfig,
    seed: u64,
) -> Result<GeneratorBundle> {
    if aux.len() < cfg.batch_size || aux.is_empty() {
        return Err(Error::InsufficientSamples {
            needed: cfg.batch_size.max(1),
            got: aux.len(),
        });
    }
    if latent_dim == 0 {
        return Err(Error::Invalid("latent_dim must be positive".into()));
    }
    let need_view = || view.ok_or_else(|| Error::Invalid(format!("{mode:?} needs query access to the target model")));
    let image = aux.shape();
    let pixels = image.len();

    // training set and (pseudo-)labels
    let (train, labels, classes, conditions) = match mode {
        GeneratorMode::PlainGan => (aux.clone(), Vec::new(), 0, Vec::new()),
        GeneratorMode::LabelDistilledGan => {
            let v = need_view()?;
            let (labels, _) = pseudo_labels(v, aux);
            (aux.clone(), labels, v.class_count(), Vec::new())
        }
        GeneratorMode::ConditionalPseudoGan => {
            let v = need_view()?;
            let (labels, conf) = pseudo_labels(v, aux);
            let classes = v.class_count();
            let mut chosen = Vec::new();
            let mut conditions = Vec::new();
            for c in 0..classes {
                let mut idx: Vec<usize> = (0..aux.len()).filter(|&i| labels[i] == c).collect();
                idx.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]).then(a.cmp(&b)));
                if idx.len() < cfg.top_n {
                    log::warn!(
                        "class {c}: only {} aux samples pseudo-labelled, using all (top_n = {})",
                        idx.len(),
                        cfg.top_n
                    );
                }
                idx.truncate(cfg.top_n);
                if !idx.is_empty() {
                    conditions.push(c);
                }
                chosen.extend(idx);
            }
            let sel_labels = chosen.iter().map(|&i| labels[i]).collect();
            (aux.subset(&chosen), sel_labels, classes, conditions)
        }
    };
    let conditional = mode == GeneratorMode::ConditionalPseudoGan;
    let cond_width = if conditional { classes } else { 0 };
    let d_out = if mode == GeneratorMode::LabelDistilledGan { 1 + classes } else { 1 };

    let mut g_sizes = vec![latent_dim + cond_width];
    g_sizes.extend(&cfg.hidden);
    g_sizes.push(pixels);
    let mut d_sizes = vec![pixels + cond_width];
    d_sizes.extend(cfg.hidden.iter().rev());
    d_sizes.push(d_out);
    let mut bundle = GeneratorBundle {
        mode,
        generator: DenseStack::new(&g_sizes, DenseActivation::Relu, DenseActivation::Sigmoid, seed),
        discriminator: Some(DenseStack::new(&d_sizes, DenseActivation::LeakyRelu, DenseActivation::Identity, seed ^ 0xD15C)),
        latent_dim,
        image,
        condition_width: cond_width,
        conditions: conditions.clone(),
        provenance: GeneratorProvenance {
            aux_hash: aux.content_hash(),
            steps: cfg.steps,
            seed,
        },
    };

    let adam = OptimizerKind::Adam {
        lr: cfg.lr,
        beta1: 0.5,
        beta2: 0.999,
        weight_decay: 0.0,
    };
    let mut g_opt = Optimizer::new(adam);
    let mut d_opt = Optimizer::new(adam);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bs = cfg.batch_size.min(train.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    for step in 0..cfg.steps {
        if cursor + bs > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + bs];
        cursor += bs;
        let real = train.batch_nchw(idx).reshape(&[bs, pixels]);
        let real_labels: Vec<usize> = if labels.is_empty() { Vec::new() } else { idx.iter().map(|&i| labels[i]).collect() };
        let fake_labels: Vec<usize> = if conditional {
            (0..bs).map(|_| conditions[rng.random_range(0..conditions.len())]).collect()
        } else {
            Vec::new()
        };
        let z = normal_latents(&mut rng, bs, latent_dim);

        // discriminator step
        let fake = {
            let g = Graph::new();
            let zin = if conditional { g.constant(z.clone()).concat_cols(cond_var(&g, cond_width, &fake_labels)) } else { g.constant(z.clone()) };
            let v = bundle.generator.forward(zin).value();
            (*v).clone()
        };
        {
            let d = bundle.discriminator.as_mut().expect("present while training");
            let g = Graph::new();
            let p = d.bind(&g, true);
            let mut xr = g.constant(real.clone());
            let mut xf = g.constant(fake);
            if conditional {
                xr = xr.concat_cols(cond_var(&g, cond_width, &real_labels));
                xf = xf.concat_cols(cond_var(&g, cond_width, &fake_labels));
            }
            let or = d.forward_with(xr, &p);
            let of = d.forward_with(xf, &p);
            let (ar, af) = if d_out == 1 { (or, of) } else { (or.matmul(column(&g, d_out, 0)), of.matmul(column(&g, d_out, 0))) };
            let mut loss = (-ar).softplus().mean() + af.softplus().mean();
            if d_out > 1 {
                loss = loss + cross_entropy(or.matmul(tail_columns(&g, d_out)), &real_labels);
            }
            let lv = loss.value().item();
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch: 0, step, loss: lv as f64 });
            }
            let mut grads = g.backward(loss);
            let gs: Vec<Tensor> = p.iter().map(|&v| grads.take_or_zeros(v)).collect();
            d_opt.step(d.params_mut(), &gs, None);
        }
        // generator step (non-saturating)
        {
            let d = bundle.discriminator.as_ref().expect("present while training");
            let g = Graph::new();
            let p = bundle.generator.bind(&g, true);
            let zin = if conditional { g.constant(z).concat_cols(cond_var(&g, cond_width, &fake_labels)) } else { g.constant(z) };
            let mut xf = bundle.generator.forward_with(zin, &p);
            if conditional {
                xf = xf.concat_cols(cond_var(&g, cond_width, &fake_labels));
            }
            let of = d.forward(xf);
            let af = if d_out == 1 { of } else { of.matmul(column(&g, d_out, 0)) };
            let loss = (-af).softplus().mean();
            let mut grads = g.backward(loss);
            let gs: Vec<Tensor> = p.iter().map(|&v| grads.take_or_zeros(v)).collect();
            g_opt.step(bundle.generator.params_mut(), &gs, None);
        }
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Architecture, ModelSpec, Network};

    fn toy_aux(n: usize) -> LabeledDataset {
        let shape = ImageShape::new(4, 4, 1);
        let mut ds = LabeledDataset::empty(shape, 2);
        for i in 0..n {
            let c = i % 2;
            let img: Vec<f32> = (0..16).map(|p| if (p % 4 < 2) == (c == 0) { 0.9 } else { 0.1 }).collect();
            ds.push(&img, c);
        }
        ds
    }

    fn small_cfg() -> GanConfig {
        GanConfig {
            steps: 20,
            batch_size: 8,
            lr: 1e-3,
            hidden: vec![16],
            top_n: 3,
        }
    }

    fn view() -> ModelView {
        let net = Network::new(
            ModelSpec {
                architecture: Architecture::Mlp {
                    hidden: vec![8],
                    bias: true,
                    activation: crate::nn::Activation::Relu,
                },
                input: ImageShape::new(4, 4, 1),
                classes: 2,
            },
            3,
        )
        .unwrap();
        ModelView::owned(net)
    }

    #[test]
    fn samples_have_image_shape_and_range() {
        let b = train_generator(&toy_aux(16), GeneratorMode::PlainGan, None, 4, &small_cfg(), 1).unwrap();
        let z = normal_latents(&mut ChaCha8Rng::seed_from_u64(0), 5, 4);
        let x = b.generate(&z, None).unwrap();
        assert_eq!(x.shape(), &[5, 1, 4, 4]);
        assert!(x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn aux_smaller_than_a_batch_is_rejected() {
        let r = train_generator(&toy_aux(4), GeneratorMode::PlainGan, None, 4, &small_cfg(), 1);
        assert!(matches!(r, Err(Error::InsufficientSamples { .. })));
    }

    #[test]
    fn conditional_mode_takes_all_when_top_n_exceeds_group() {
        let cfg = GanConfig { top_n: 1000, ..small_cfg() };
        let b = train_generator(&toy_aux(16), GeneratorMode::ConditionalPseudoGan, Some(&view()), 4, &cfg, 1).unwrap();
        assert!(!b.conditions.is_empty());
        let z = Tensor::zeros(&[1, 4]);
        let missing = (0..2).find(|c| !b.conditions.contains(c));
        if let Some(c) = missing {
            assert!(b.generate(&z, Some(&[c])).is_err());
        }
        assert!(b.generate(&z, Some(&[b.conditions[0]])).is_ok());
    }

    #[test]
    fn label_modes_need_a_view() {
        let r = train_generator(&toy_aux(16), GeneratorMode::LabelDistilledGan, None, 4, &small_cfg(), 1);
        assert!(matches!(r, Err(Error::Invalid(_))));
    }

    #[test]
    fn bundle_round_trips_and_is_deterministic() {
        let a = train_generator(&toy_aux(16), GeneratorMode::LabelDistilledGan, Some(&view()), 4, &small_cfg(), 9).unwrap();
        let b = train_generator(&toy_aux(16), GeneratorMode::LabelDistilledGan, Some(&view()), 4, &small_cfg(), 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(GeneratorBundle::from_bytes(&a.to_bytes()).unwrap(), a);
    }

    #[test]
    fn latent_dim_mismatch_is_rejected() {
        let b = train_generator(&toy_aux(16), GeneratorMode::PlainGan, None, 4, &small_cfg(), 1).unwrap();
        assert!(matches!(b.generate(&Tensor::zeros(&[2, 3]), None), Err(Error::DimensionMismatch(_))));
    }
}
