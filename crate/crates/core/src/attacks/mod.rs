//! Reference implementations of the ten reconstruction attacks.
//!
//! Every attack receives a [`ModelView`] (never the target dataset) and an
//! [`AttackConfig`], and is a pure function of (model snapshot, knowledge,
//! config, seed).

mod bias_rec;
mod config;
mod deep_leakage;
mod gan;
mod input_opt;
mod inv_alignment;
mod latent;
mod updates_leak;

pub use bias_rec::bias_rec;
pub use config::{AttackConfig, DecoderConfig, GanConfig};
pub use deep_leakage::{deep_leakage, gradient_snapshot, GradientSnapshot, LeakageOutcome};
pub use gan::{generator_cache_key, train_generator, GeneratorBundle, GeneratorMode, GeneratorProvenance};
pub use input_opt::{deep_dream, deep_inversion, input_trajectory, mi_face};
pub use inv_alignment::{inv_alignment, pseudo_posterior, InvAlignmentModel};
pub use latent::{kedmi, kedmi_distribution, latent_trajectory, plgmi, revealer, LatentDistribution};
pub use updates_leak::{updates_leak, UpdatesLeakReport};

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::knowledge::{classify_attack, ExtraKnowledge, ModelAccess, ATTACK_IDS};
use crate::model::ModelView;
use crate::result::ReconstructionResult;
use crate::tensor::Tensor;

/// Per-class slot counts: even split, remainder to the lowest classes.
pub fn allocate_slots(target_size: usize, classes: usize) -> Vec<usize> {
    (0..classes)
        .map(|c| target_size / classes + usize::from(c < target_size % classes))
        .collect()
}

/// Class of each of `n` slots. Slots cycle through the classes, so every
/// prefix is an even allocation with the remainder on the lowest classes.
pub fn slot_labels(n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|i| i % classes).collect()
}

/// Deterministic generator for stream `tag`, element `index`.
pub(crate) fn stream_rng(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ h);
    r.set_stream(index);
    r
}

/// Ranks candidates for retention without looking at the target data.
pub trait Selector {
    fn scores(&self, view: &ModelView, candidates: &Tensor, labels: &[usize]) -> Vec<f64>;
}

/// Target-model posterior of each candidate's slot class.
#[derive(Clone, Copy, Debug, Default)]
pub struct ConfidenceSelector;

impl Selector for ConfidenceSelector {
    fn scores(&self, view: &ModelView, candidates: &Tensor, labels: &[usize]) -> Vec<f64> {
        let p = view.query(candidates);
        labels.iter().enumerate().map(|(i, &c)| p.row(i)[c] as f64).collect()
    }
}

/// Keeps the best candidates per class.
///
/// Returns the retained set (size `target_size`) and, when more candidates
/// than that were generated, the whole ranked pool in class round-robin
/// order; the retained set is always a prefix of the pool.
pub fn select_candidates(
    view: &ModelView,
    candidates: &Tensor,
    labels: &[usize],
    target_size: usize,
    selector: &dyn Selector,
) -> Result<(LabeledDataset, Option<LabeledDataset>)> {
    let classes = view.class_count();
    let all = LabeledDataset::from_nchw(candidates, labels, classes)?;
    if labels.len() == target_size {
        return Ok((all, None));
    }
    if labels.len() < target_size {
        return Err(Error::InsufficientSamples {
            needed: target_size,
            got: labels.len(),
        });
    }
    let scores = selector.scores(view, candidates, labels);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        per_class[l].push(i);
    }
    for list in &mut per_class {
        list.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    }
    let mut order = Vec::with_capacity(labels.len());
    let longest = per_class.iter().map(Vec::len).max().unwrap_or(0);
    for rank in 0..longest {
        for list in &per_class {
            if let Some(&i) = list.get(rank) {
                order.push(i);
            }
        }
    }
    let pool = all.subset(&order);
    let kept = pool.subset(&(0..target_size).collect::<Vec<_>>());
    Ok((kept, Some(pool)))
}

/// Extra inputs some attacks consume.
#[derive(Default)]
pub struct AttackResources<'a> {
    pub generator: Option<&'a GeneratorBundle>,
    pub gradient: Option<&'a GradientSnapshot>,
}

/// Registry entry.
pub struct AttackInfo {
    pub id: &'static str,
    pub needs_generator: Option<GeneratorMode>,
}

pub fn registry() -> Vec<AttackInfo> {
    ATTACK_IDS
        .iter()
        .map(|&id| AttackInfo {
            id,
            needs_generator: match id {
                "revealer" => Some(GeneratorMode::PlainGan),
                "kedmi" => Some(GeneratorMode::LabelDistilledGan),
                "plgmi" => Some(GeneratorMode::ConditionalPseudoGan),
                _ => None,
            },
        })
        .collect()
}

/// Checks knowledge, then dispatches to the attack named by `cfg.attack_id`.
pub fn run_attack(
    view: &ModelView,
    knowledge: &ExtraKnowledge,
    cfg: &AttackConfig,
    resources: &AttackResources<'_>,
) -> Result<ReconstructionResult> {
    let id = cfg.attack_id.as_str();
    let required = classify_attack(id)?;
    knowledge.require(id, &required)?;
    if view.access() < knowledge.model_access() {
        return Err(Error::Capability(format!(
            "knowledge claims {:?} access but the view is {:?}",
            knowledge.model_access(),
            view.access()
        )));
    }
    if required.model_access == ModelAccess::WhiteBox {
        view.network()?;
    }
    cfg.validate()?;
    let start = Instant::now();
    let aux = || {
        knowledge
            .aux()
            .ok_or_else(|| Error::Capability(format!("`{id}` needs an auxiliary dataset")))
    };
    let need_gen = |mode: GeneratorMode| -> Result<&GeneratorBundle> {
        let g = resources
            .generator
            .ok_or_else(|| Error::Invalid(format!("`{id}` needs a trained generator")))?;
        if g.mode != mode {
            return Err(Error::Invalid(format!("`{id}` needs a {mode:?} generator, got {:?}", g.mode)));
        }
        Ok(g)
    };
    let mut result = match id {
        "mi_face" => mi_face(view, cfg)?,
        "deep_dream" => deep_dream(view, cfg)?,
        "deep_inversion" => deep_inversion(view, cfg)?,
        "bias_rec" => bias_rec(view, cfg)?,
        "revealer" => revealer(view, need_gen(GeneratorMode::PlainGan)?, cfg)?,
        "kedmi" => kedmi(view, need_gen(GeneratorMode::LabelDistilledGan)?, cfg)?,
        "plgmi" => plgmi(view, need_gen(GeneratorMode::ConditionalPseudoGan)?, cfg)?,
        "inv_alignment" => inv_alignment(view, aux()?, cfg)?,
        "updates_leak" => updates_leak(view, aux()?, cfg)?.0,
        "deep_leakage" => {
            let snap = resources
                .gradient
                .ok_or_else(|| Error::Invalid("`deep_leakage` needs a gradient snapshot".into()))?;
            let out = deep_leakage(snap, view, cfg)?;
            out.into_result(view.class_count(), cfg.seed, view.input_shape())?
        }
        other => return Err(Error::UnknownAttack(other.to_string())),
    };
    result.knowledge = knowledge.triple();
    result.wall_time_s = start.elapsed().as_secs_f64();
    Ok(result)
}
