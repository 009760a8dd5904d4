//! Experimental substrate: splits, target training in the manipulated
//! regimes, backdoors, model versions and the stolen-surrogate path.

mod steal;
mod store;

pub use steal::{steal_model, StealConfig, StolenModel};
pub use store::{plan_hash, ModelStore, StoredModel};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageShape, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::TargetModel;
use crate::nn::{accuracy, fit, Architecture, ModelSpec, Network, OptimizerKind, TrainConfig};

/// Side of the square backdoor trigger.
pub const TRIGGER_SIDE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regime {
    Plain,
    Backdoored { fraction: f32, trigger_class: usize },
    /// BN affine parameters and running statistics stay at their init.
    BnFrozen,
    /// Final pre-classifier width replaced by `width`.
    Pruned { width: usize },
    /// Initialized from a model trained on the aux split, then fine-tuned.
    PretrainedFinetune,
    /// The adversary's locally owned copy stolen from a plain target.
    StolenSurrogate { budget: u64 },
    DpSgd,
    Mid,
}

impl Regime {
    pub fn backdoor_default() -> Self {
        Regime::Backdoored {
            fraction: 0.3,
            trigger_class: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitSpec {
    /// Target on the lower half of the classes, aux on the upper half
    /// (relabelled from 0).
    ClassHalves,
    /// Same label space; aux is a disjoint same-distribution sample.
    Disjoint { aux_size: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub dataset: String,
    pub sizes: Vec<usize>,
    pub split: SplitSpec,
    pub architecture: Architecture,
    pub regime: Regime,
    pub train: TrainConfig,
    pub seed: u64,
}

impl ExperimentPlan {
    /// MNIST halves with the small VGG-style CNN.
    pub fn mnist_halves(sizes: Vec<usize>) -> Self {
        Self {
            dataset: "mnist".into(),
            sizes,
            split: SplitSpec::ClassHalves,
            architecture: Architecture::vgg_small(),
            regime: Regime::Plain,
            train: TrainConfig {
                epochs: 10,
                batch_size: 32,
                optimizer: OptimizerKind::adam(3e-3),
                seed: 0,
            },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() {
            return Err(Error::Invalid("plan without target sizes".into()));
        }
        if self.sizes.windows(2).any(|w| w[0] >= w[1]) || self.sizes[0] == 0 {
            return Err(Error::Invalid("target sizes must be positive and strictly ascending".into()));
        }
        match self.regime {
            Regime::Backdoored { fraction, .. } if !(fraction > 0.0 && fraction <= 1.0) => {
                return Err(Error::Invalid(format!("backdoor fraction must be in (0, 1], got {fraction}")));
            }
            Regime::Pruned { width: 0 } => return Err(Error::Invalid("pruned width must be positive".into())),
            Regime::StolenSurrogate { budget: 0 } => return Err(Error::Invalid("stealing budget must be positive".into())),
            _ => {}
        }
        Ok(())
    }

    pub fn max_size(&self) -> usize {
        *self.sizes.last().expect("validated")
    }
}

/// Index-level record of a split, saved so experiments are re-runnable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitIndices {
    /// Target pool in nesting order; target of size `s` is its first `s`.
    pub target_order: Vec<usize>,
    pub test: Vec<usize>,
    pub aux: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Split {
    pub sizes: Vec<usize>,
    pub targets: Vec<LabeledDataset>,
    pub test: LabeledDataset,
    pub aux: LabeledDataset,
    pub indices: SplitIndices,
    pub target_classes: usize,
}

impl Split {
    pub fn target(&self, size: usize) -> Result<&LabeledDataset> {
        self.sizes
            .iter()
            .position(|&s| s == size)
            .map(|i| &self.targets[i])
            .ok_or_else(|| Error::Invalid(format!("split has no target of size {size}")))
    }
}

/// Class round-robin order of per-class seeded shuffles: every prefix is
/// class-balanced.
fn balanced_order(ds: &LabeledDataset, classes: &[usize], seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| {
            let mut v = ds.class_indices(c);
            v.shuffle(&mut rng);
            v
        })
        .collect();
    let longest = per.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for r in 0..longest {
        for list in &mut per {
            if let Some(&i) = list.get(r) {
                out.push(i);
            }
        }
    }
    out
}

/// Splits `ds` into nested targets, a held-out test set and the aux set.
pub fn split_dataset(ds: &LabeledDataset, plan: &ExperimentPlan) -> Result<Split> {
    plan.validate()?;
    let max = plan.max_size();
    let classes = ds.class_count();
    let (indices, target_classes, aux_map): (SplitIndices, usize, Box<dyn Fn(usize) -> usize>) = match plan.split {
        SplitSpec::ClassHalves => {
            if classes < 2 {
                return Err(Error::Invalid("class halves need at least two classes".into()));
            }
            let half = classes / 2;
            let order = balanced_order(ds, &(0..half).collect::<Vec<_>>(), plan.seed);
            if order.len() < max {
                return Err(Error::InsufficientSamples { needed: max, got: order.len() });
            }
            let aux = balanced_order(ds, &(half..classes).collect::<Vec<_>>(), plan.seed ^ 0xA0);
            let test = order[max..].to_vec();
            (
                SplitIndices {
                    target_order: order[..max].to_vec(),
                    test,
                    aux,
                },
                half,
                Box::new(move |l| l - half),
            )
        }
        SplitSpec::Disjoint { aux_size } => {
            let order = balanced_order(ds, &(0..classes).collect::<Vec<_>>(), plan.seed);
            let needed = max + aux_size;
            if order.len() < needed {
                return Err(Error::InsufficientSamples { needed, got: order.len() });
            }
            (
                SplitIndices {
                    target_order: order[..max].to_vec(),
                    aux: order[max..needed].to_vec(),
                    test: order[needed..].to_vec(),
                },
                classes,
                Box::new(|l| l),
            )
        }
    };
    split_from_indices(ds, plan, indices, target_classes, aux_map.as_ref())
}

fn split_from_indices(
    ds: &LabeledDataset,
    plan: &ExperimentPlan,
    indices: SplitIndices,
    target_classes: usize,
    aux_map: &dyn Fn(usize) -> usize,
) -> Result<Split> {
    let aux_classes = match plan.split {
        SplitSpec::ClassHalves => ds.class_count() - target_classes,
        SplitSpec::Disjoint { .. } => target_classes,
    };
    let narrow = |idx: &[usize]| -> Result<LabeledDataset> {
        ds.subset(idx).relabel(target_classes, |l| l)
    };
    let targets = plan
        .sizes
        .iter()
        .map(|&s| narrow(&indices.target_order[..s]))
        .collect::<Result<Vec<_>>>()?;
    Ok(Split {
        sizes: plan.sizes.clone(),
        targets,
        test: narrow(&indices.test)?,
        aux: ds.subset(&indices.aux).relabel(aux_classes, aux_map)?,
        indices,
        target_classes,
    })
}

/// Rebuilds a split from saved indices.
pub fn split_from_saved(ds: &LabeledDataset, plan: &ExperimentPlan, indices: SplitIndices) -> Result<Split> {
    let half = ds.class_count() / 2;
    match plan.split {
        SplitSpec::ClassHalves => split_from_indices(ds, plan, indices, half, &move |l| l - half),
        SplitSpec::Disjoint { .. } => split_from_indices(ds, plan, indices, ds.class_count(), &|l| l),
    }
}

/// Writes the all-zero trigger into one HWC image.
pub fn apply_trigger(image: &mut [f32], shape: ImageShape) -> Result<()> {
    if shape.height < TRIGGER_SIDE || shape.width < TRIGGER_SIDE {
        return Err(Error::Invalid(format!(
            "images of {}×{} cannot hold a {TRIGGER_SIDE}×{TRIGGER_SIDE} trigger",
            shape.height, shape.width
        )));
    }
    for y in shape.height - TRIGGER_SIDE..shape.height {
        for x in shape.width - TRIGGER_SIDE..shape.width {
            for c in 0..shape.channels {
                image[(y * shape.width + x) * shape.channels + c] = 0.0;
            }
        }
    }
    Ok(())
}

/// Mean intensity inside the trigger region of an HWC image.
pub fn trigger_patch_mean(image: &[f32], shape: ImageShape) -> f64 {
    let mut acc = 0.0f64;
    for y in shape.height.saturating_sub(TRIGGER_SIDE)..shape.height {
        for x in shape.width.saturating_sub(TRIGGER_SIDE)..shape.width {
            for c in 0..shape.channels {
                acc += image[(y * shape.width + x) * shape.channels + c] as f64;
            }
        }
    }
    let side_h = TRIGGER_SIDE.min(shape.height);
    let side_w = TRIGGER_SIDE.min(shape.width);
    acc / (side_h * side_w * shape.channels) as f64
}

/// Mixed dataset: a seeded `fraction` of the samples carry the trigger and
/// are relabelled to `trigger_class`.
pub fn inject_backdoor(ds: &LabeledDataset, fraction: f32, trigger_class: usize, seed: u64) -> Result<LabeledDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid(format!("backdoor fraction must be in (0, 1], got {fraction}")));
    }
    if trigger_class >= ds.class_count() {
        return Err(Error::Invalid(format!("trigger class {trigger_class} out of range")));
    }
    let shape = ds.shape();
    let mut out = ds.clone();
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let count = ((ds.len() as f64 * fraction as f64).round() as usize).min(ds.len());
    for &i in &idx[..count] {
        apply_trigger(out.image_mut(i), shape)?;
        out.set_label(i, trigger_class);
    }
    Ok(out)
}

/// Fraction of triggered non-trigger-class images classified as the
/// trigger class.
pub fn backdoor_success(net: &Network, test: &LabeledDataset, trigger_class: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..test.len()).filter(|&i| test.label(i) != trigger_class).collect();
    if idx.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let mut triggered = test.subset(&idx);
    for i in 0..triggered.len() {
        apply_trigger(triggered.image_mut(i), test.shape())?;
    }
    let pred = net.predict(&triggered.all_nchw());
    Ok(pred.iter().filter(|&&p| p == trigger_class).count() as f64 / idx.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub final_loss: f64,
    pub backdoor_success: Option<f64>,
    /// Agreement of a stolen surrogate with the true target on test images.
    pub surrogate_agreement: Option<f64>,
    pub queries_used: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainedTarget {
    pub network: Network,
    pub metrics: TargetMetrics,
}

impl TrainedTarget {
    pub fn target_model(&self) -> TargetModel {
        TargetModel::new(self.network.clone())
    }
}

fn model_spec(plan: &ExperimentPlan, input: ImageShape, classes: usize) -> ModelSpec {
    let architecture = match (&plan.regime, &plan.architecture) {
        (Regime::Pruned { width }, Architecture::Cnn { channels, batch_norm, .. }) => Architecture::Cnn {
            channels: channels.clone(),
            feature_width: *width,
            batch_norm: *batch_norm,
        },
        (Regime::Pruned { width }, Architecture::Mlp { hidden, bias, activation }) => {
            let mut hidden = hidden.clone();
            match hidden.last_mut() {
                Some(h) => *h = *width,
                None => hidden.push(*width),
            }
            Architecture::Mlp {
                hidden,
                bias: *bias,
                activation: *activation,
            }
        }
        (_, a) => a.clone(),
    };
    ModelSpec {
        architecture,
        input,
        classes,
    }
}

/// Trains the target of size `size` under the plan's regime.
pub fn train_target(plan: &ExperimentPlan, split: &Split, size: usize) -> Result<TrainedTarget> {
    plan.validate()?;
    let data = split.target(size)?;
    let spec = model_spec(plan, data.shape(), split.target_classes);
    let cfg = TrainConfig {
        seed: plan.train.seed ^ plan.seed,
        ..plan.train.clone()
    };
    let mut net = Network::new(spec.clone(), plan.seed)?;
    let mut metrics = TargetMetrics::default();
    let train_data;
    let data = match &plan.regime {
        Regime::DpSgd => return Err(Error::NotImplemented("DP-SGD training".into())),
        Regime::Mid => return Err(Error::NotImplemented("MID regularization".into())),
        Regime::BnFrozen => {
            net.set_bn_frozen(true);
            data
        }
        Regime::PretrainedFinetune => {
            if split.aux.class_count() != split.target_classes {
                return Err(Error::Invalid("pre-training needs an aux split with the target's class count".into()));
            }
            fit(&mut net, &split.aux, &cfg)?;
            data
        }
        Regime::Backdoored { fraction, trigger_class } => {
            train_data = inject_backdoor(data, *fraction, *trigger_class, plan.seed)?;
            &train_data
        }
        Regime::Plain | Regime::Pruned { .. } | Regime::StolenSurrogate { .. } => data,
    };
    let report = fit(&mut net, data, &cfg)?;
    metrics.train_accuracy = report.train_accuracy;
    metrics.final_loss = report.final_loss;
    metrics.test_accuracy = accuracy(&net, &split.test);
    if let Regime::Backdoored { trigger_class, .. } = plan.regime {
        metrics.backdoor_success = Some(backdoor_success(&net, &split.test, trigger_class)?);
    }
    if let Regime::StolenSurrogate { budget } = plan.regime {
        let view = crate::model::restrict_access(
            &TargetModel::new(net.clone()),
            &crate::knowledge::KnowledgeTriple::new(
                crate::knowledge::TrainingType::Static,
                crate::knowledge::ModelAccess::BlackBox,
                crate::knowledge::DatasetAccess::NoData,
            ),
        )?;
        let stolen = steal_model(
            &view,
            &StealConfig {
                budget,
                ..StealConfig::default()
            },
            plan.seed,
        )?;
        metrics.surrogate_agreement = Some(agreement(&net, &stolen.surrogate, &split.test));
        metrics.queries_used = Some(stolen.queries_used);
        return Ok(TrainedTarget {
            network: stolen.surrogate,
            metrics,
        });
    }
    Ok(TrainedTarget { network: net, metrics })
}

/// Top-1 agreement of two classifiers on `probe`.
pub fn agreement(a: &Network, b: &Network, probe: &LabeledDataset) -> f64 {
    if probe.is_empty() {
        return 0.0;
    }
    let x = probe.all_nchw();
    let (pa, pb) = (a.predict(&x), b.predict(&x));
    pa.iter().zip(&pb).filter(|(p, q)| p == q).count() as f64 / probe.len() as f64
}

/// A dynamic target: `base` before and after one fine-tuning pass on
/// `update`.
pub fn dynamic_target(base: &Network, update: &LabeledDataset, epochs: usize, seed: u64) -> Result<TargetModel> {
    let mut after = base.clone();
    fit(
        &mut after,
        update,
        &TrainConfig {
            epochs,
            batch_size: update.len().max(1),
            optimizer: OptimizerKind::adam(1e-3),
            seed,
        },
    )?;
    TargetModel::with_update(base.clone(), after)
}
