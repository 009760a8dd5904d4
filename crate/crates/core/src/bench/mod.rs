//! End-to-end benchmark runs: train or load targets, run attacks, score them
//! and append one ledger line per (plan, size, attack) cell.

mod ablation;
mod judging;
mod plots;
mod table;

pub use ablation::{quantity_ablation, AblationRow};
pub use judging::{common_size, judge_tasks};
pub use plots::{correlation_matrix, emit_plots, image_grid, pearson, tsne_embedding, PlotFiles};
pub use table::{emit_table, format_cell, render_table, TableFormat};

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attacks::{
    generator_cache_key, gradient_snapshot, registry, run_attack, train_generator, AttackConfig, AttackResources,
};
use crate::data::{dataset_by_id, LabeledDataset};
use crate::error::{Error, Result};
use crate::harness::{dynamic_target, plan_hash, ExperimentPlan, ModelStore, Split, TargetMetrics};
use crate::knowledge::{classify_attack, DatasetAccess, ExtraKnowledge, TrainingType};
use crate::metrics::{extractor_by_id, FeatureExtractor, MatchOptions, MetricReport, SampleDistanceKind};
use crate::model::{restrict_access, TargetModel};
use crate::result::ReconstructionResult;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricSettings {
    pub extractor: String,
    pub kinds: Vec<SampleDistanceKind>,
    /// Tolerances for the approximate-reconstruction predicate, in the
    /// order D-Dis, SSIM, PSNR, MSE.
    pub epsilon: Option<Vec<f64>>,
    pub matching: MatchOptions,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self {
            extractor: "randcnn".into(),
            kinds: SampleDistanceKind::ALL.to_vec(),
            epsilon: None,
            matching: MatchOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeSettings {
    pub repeats: usize,
    /// Target images judged per condition set.
    pub targets: usize,
    pub seed: u64,
}

impl Default for JudgeSettings {
    fn default() -> Self {
        Self {
            repeats: 5,
            targets: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub plans: Vec<ExperimentPlan>,
    /// Attack configs as JSON objects with at least `attack_id`; other keys
    /// override the attack's preset.
    #[serde(default)]
    pub attacks: Vec<serde_json::Value>,
    #[serde(default)]
    pub metrics: MetricSettings,
    #[serde(default)]
    pub judge: Option<JudgeSettings>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl BenchConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        if cfg.output_dir.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.output_dir = dir.join(&cfg.output_dir);
            }
        }
        Ok(cfg)
    }

    fn attack_id(v: &serde_json::Value) -> Result<String> {
        v.get("attack_id")
            .and_then(|s| s.as_str())
            .map(str::to_string)
            .ok_or_else(|| Error::Invalid("attack entry without `attack_id`".into()))
    }

    /// Resolved attack config for a cell of target size `size`.
    pub fn attack_config(&self, v: &serde_json::Value, size: usize) -> Result<AttackConfig> {
        let mut with_seed = v.clone();
        if let Some(obj) = with_seed.as_object_mut() {
            obj.entry("seed").or_insert(self.seed.into());
        }
        let mut c = AttackConfig::from_json_with_preset(&with_seed, size)?;
        match c.attack_id.as_str() {
            "deep_leakage" => c.target_size = 1,
            "updates_leak" => c.target_size = c.update_size,
            _ => {}
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let known: Vec<&str> = registry().iter().map(|a| a.id).collect();
        for a in &self.attacks {
            let id = Self::attack_id(a)?;
            if !known.contains(&id.as_str()) {
                return Err(Error::UnknownAttack(id));
            }
        }
        for p in &self.plans {
            p.validate()?;
            if !crate::data::DATASET_IDS.contains(&p.dataset.as_str()) {
                return Err(Error::Invalid(format!("unknown dataset id `{}`", p.dataset)));
            }
        }
        // resolves the id; the input shape only matters for learned extractors
        extractor_by_id(&self.metrics.extractor, crate::data::ImageShape::new(28, 28, 1))?;
        if let Some(eps) = &self.metrics.epsilon {
            if eps.len() != 1 + self.metrics.kinds.len() {
                return Err(Error::Invalid("epsilon needs one entry per metric component".into()));
            }
        }
        fs::create_dir_all(&self.output_dir).map_err(Error::io(&self.output_dir))?;
        Ok(())
    }
}

/// Ledger key of a cell.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub plan_hash: String,
    pub attack_id: String,
    pub seed: u64,
}

impl CellKey {
    fn dir_name(&self) -> String {
        format!("{}-{}-{}", self.plan_hash, self.attack_id, self.seed)
    }
}

/// One completed cell with the hashes of everything it was computed from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub key: CellKey,
    pub plan: ExperimentPlan,
    pub size: usize,
    pub dataset_hash: String,
    pub target_hash: String,
    pub result_hash: String,
    pub attack_config: AttackConfig,
    pub target_metrics: TargetMetrics,
    pub metrics: MetricReport,
    /// `Some(true)` when the (ε, μ)-approximate predicate holds.
    pub approximate: Option<bool>,
    pub result_dir: PathBuf,
    pub wall_time_s: f64,
    pub flags: Vec<String>,
}

impl LedgerEntry {
    /// Row label: the attack id, suffixed with the regime when it is not
    /// the plain one.
    pub fn label(&self) -> String {
        match serde_json::to_value(&self.plan.regime).ok().and_then(|v| v["kind"].as_str().map(str::to_string)) {
            Some(kind) if kind != "plain" => format!("{} [{kind}]", self.key.attack_id),
            _ => self.key.attack_id.clone(),
        }
    }
}

pub fn read_ledger(path: &Path) -> Result<Vec<LedgerEntry>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn append_entry(path: &Path, e: &LedgerEntry) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(Error::io(path))?;
    let mut line = serde_json::to_string(e)?;
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(Error::io(path))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Computed,
    Cached,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestCell {
    pub key: CellKey,
    pub size: usize,
    pub status: CellStatus,
    pub result_hash: Option<String>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub cells: Vec<ManifestCell>,
    pub ledger: PathBuf,
    /// Model store entries used, by plan hash.
    pub models: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn computed(&self) -> usize {
        self.cells.iter().filter(|c| c.status == CellStatus::Computed).count()
    }

    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.status == CellStatus::Failed).count()
    }
}

pub const LEDGER_FILE: &str = "results.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Runs every (plan × size × attack) cell of the config at `path`.
pub fn run_benchmark(path: &Path) -> Result<RunManifest> {
    run_config(&BenchConfig::load(path)?)
}

pub fn run_config(cfg: &BenchConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    let ledger = out.join(LEDGER_FILE);
    let done: HashMap<CellKey, LedgerEntry> = read_ledger(&ledger)?.into_iter().map(|e| (e.key.clone(), e)).collect();
    let store = ModelStore::open(out.join("store"))?;
    let mut manifest = RunManifest {
        cells: Vec::new(),
        ledger: ledger.clone(),
        models: BTreeMap::new(),
    };
    let mut datasets: HashMap<String, Arc<LabeledDataset>> = HashMap::new();
    for plan in &cfg.plans {
        let mut split: Option<Split> = None;
        for &size in &plan.sizes {
            let ph = plan_hash(plan, size);
            for a in &cfg.attacks {
                let acfg = cfg.attack_config(a, size)?;
                let key = CellKey {
                    plan_hash: ph.clone(),
                    attack_id: acfg.attack_id.clone(),
                    seed: acfg.seed,
                };
                if let Some(e) = done.get(&key) {
                    manifest.cells.push(ManifestCell {
                        key,
                        size,
                        status: CellStatus::Cached,
                        result_hash: Some(e.result_hash.clone()),
                        error: None,
                    });
                    continue;
                }
                let outcome = (|| -> Result<LedgerEntry> {
                    let ds = match datasets.get(&plan.dataset) {
                        Some(d) => Arc::clone(d),
                        None => {
                            let d = Arc::new(dataset_by_id(&plan.dataset)?);
                            datasets.insert(plan.dataset.clone(), Arc::clone(&d));
                            d
                        }
                    };
                    if split.is_none() {
                        split = Some(store.split(&ds, plan)?);
                    }
                    let sp = split.as_ref().expect("set above");
                    let entry = run_cell(cfg, &store, plan, sp, &ds, size, &acfg, &key)?;
                    manifest.models.insert(ph.clone(), store.model_dir(&ph).display().to_string());
                    Ok(entry)
                })();
                match outcome {
                    Ok(e) => {
                        append_entry(&ledger, &e)?;
                        manifest.cells.push(ManifestCell {
                            key,
                            size,
                            status: CellStatus::Computed,
                            result_hash: Some(e.result_hash),
                            error: None,
                        });
                    }
                    Err(err) => {
                        log::error!("cell {} / {} failed: {err}", key.plan_hash, key.attack_id);
                        manifest.cells.push(ManifestCell {
                            key,
                            size,
                            status: CellStatus::Failed,
                            result_hash: None,
                            error: Some(err.to_string()),
                        });
                    }
                }
            }
        }
    }
    fs::create_dir_all(out).map_err(Error::io(out))?;
    let mp = out.join(MANIFEST_FILE);
    fs::write(&mp, serde_json::to_vec_pretty(&manifest)?).map_err(Error::io(&mp))?;
    Ok(manifest)
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    cfg: &BenchConfig,
    store: &ModelStore,
    plan: &ExperimentPlan,
    split: &Split,
    ds: &LabeledDataset,
    size: usize,
    acfg: &AttackConfig,
    key: &CellKey,
) -> Result<LedgerEntry> {
    let stored = store.train_or_load(plan, split, size)?;
    let id = acfg.attack_id.as_str();
    let triple = classify_attack(id)?;
    let aux = (triple.dataset_access != DatasetAccess::NoData).then(|| Arc::new(split.aux.clone()));
    let knowledge = ExtraKnowledge::new(triple, aux)?;
    let mut tar = split.target(size)?.clone();
    let net = stored.network.clone();
    let mut snapshot = None;
    let model = match (id, triple.training_type) {
        ("updates_leak", _) => {
            let n = acfg.update_size.min(split.test.len());
            let update = split.test.subset(&(0..n).collect::<Vec<_>>());
            tar = update.clone();
            dynamic_target(&net, &update, 1, acfg.seed)?
        }
        ("deep_leakage", _) => {
            tar = tar.subset(&[0]);
            snapshot = Some(gradient_snapshot(&net, tar.image(0), tar.label(0))?);
            // the observed update is the gradient step itself
            TargetModel::with_update(net.clone(), net)?
        }
        (_, TrainingType::Dynamic) => return Err(Error::Invalid(format!("no dynamic setup for `{id}`"))),
        _ => TargetModel::new(net),
    };
    let view = restrict_access(&model, &triple)?;
    let generator = match registry().into_iter().find(|a| a.id == id).and_then(|a| a.needs_generator) {
        Some(mode) => {
            let gkey = generator_cache_key(&split.aux, mode, acfg.latent_dim, &acfg.gan, acfg.seed);
            // pseudo-labelled generators depend on the target too
            let gkey = format!("{gkey}-{}", key.plan_hash);
            match store.load_generator(&gkey)? {
                Some(g) => Some(g),
                None => {
                    let g = train_generator(&split.aux, mode, Some(&view), acfg.latent_dim, &acfg.gan, acfg.seed)?;
                    store.save_generator(&gkey, &g)?;
                    Some(g)
                }
            }
        }
        None => None,
    };
    let resources = AttackResources {
        generator: generator.as_ref(),
        gradient: snapshot.as_ref(),
    };
    let result = run_attack(&view, &knowledge, acfg, &resources)?;
    let extractor: Box<dyn FeatureExtractor> = extractor_by_id(&cfg.metrics.extractor, tar.shape())?;
    let metrics = MetricReport::evaluate(&result.data, &tar, extractor.as_ref(), &cfg.metrics.kinds, cfg.metrics.matching)?;
    let approximate = match &cfg.metrics.epsilon {
        Some(eps) => {
            let mut bundle = crate::metrics::MetricBundle::full(extractor.as_ref());
            bundle.components.truncate(1);
            bundle
                .components
                .extend(cfg.metrics.kinds.iter().map(|&k| crate::metrics::MetricComponent::Sample(k)));
            bundle.matching = cfg.metrics.matching;
            Some(crate::metrics::is_approximate(&result.data, &tar, &bundle, eps)?)
        }
        None => None,
    };
    let result_dir = cfg.output_dir.join("results").join(key.dir_name());
    result.save(&result_dir)?;
    Ok(LedgerEntry {
        key: key.clone(),
        plan: plan.clone(),
        size,
        dataset_hash: ds.content_hash(),
        target_hash: tar.content_hash(),
        result_hash: result.data.content_hash(),
        attack_config: acfg.clone(),
        target_metrics: stored.metrics,
        metrics,
        approximate,
        result_dir,
        wall_time_s: result.wall_time_s,
        flags: result.flags.clone(),
    })
}

/// Reloads the reconstruction and its target set for a ledger entry.
pub fn load_cell(entry: &LedgerEntry) -> Result<(ReconstructionResult, LabeledDataset)> {
    let result = ReconstructionResult::load(&entry.result_dir)?;
    let ds = dataset_by_id(&entry.plan.dataset)?;
    let split = crate::harness::split_dataset(&ds, &entry.plan)?;
    let tar = match entry.key.attack_id.as_str() {
        "updates_leak" => {
            let n = entry.attack_config.update_size.min(split.test.len());
            split.test.subset(&(0..n).collect::<Vec<_>>())
        }
        "deep_leakage" => split.target(entry.size)?.subset(&[0]),
        _ => split.target(entry.size)?.clone(),
    };
    if tar.content_hash() != entry.target_hash {
        return Err(Error::Invalid(format!(
            "target set of {} no longer matches its ledger hash",
            entry.key.attack_id
        )));
    }
    Ok((result, tar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::SplitSpec;
    use crate::nn::{Activation, Architecture, TrainConfig};

    fn cfg(dir: &Path, attacks: &[&str]) -> BenchConfig {
        let plan = ExperimentPlan {
            dataset: "mnist5k".into(),
            split: SplitSpec::Disjoint { aux_size: 200 },
            architecture: Architecture::Mlp {
                hidden: vec![16],
                bias: true,
                activation: Activation::Relu,
            },
            train: TrainConfig {
                epochs: 1,
                ..TrainConfig::default()
            },
            ..ExperimentPlan::mnist_halves(vec![20, 40])
        };
        BenchConfig {
            plans: vec![plan],
            attacks: attacks
                .iter()
                .map(|a| serde_json::json!({"attack_id": a, "iterations": 2}))
                .collect(),
            metrics: MetricSettings {
                extractor: "pool7".into(),
                ..MetricSettings::default()
            },
            judge: None,
            output_dir: dir.to_path_buf(),
            seed: 0,
        }
    }

    #[test]
    fn empty_attack_list_gives_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = run_config(&cfg(dir.path(), &[])).unwrap();
        assert!(m.cells.is_empty());
        assert!(dir.path().join(MANIFEST_FILE).exists());
    }

    #[test]
    fn cells_are_computed_once() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(dir.path(), &["mi_face", "deep_dream"]);
        let m = run_config(&c).unwrap();
        assert_eq!(m.cells.len(), 4);
        assert_eq!((m.computed(), m.failures()), (4, 0));
        let again = run_config(&c).unwrap();
        assert_eq!(again.computed(), 0);
        assert!(again.cells.iter().all(|x| x.status == CellStatus::Cached));
        assert_eq!(read_ledger(&dir.path().join(LEDGER_FILE)).unwrap().len(), 4);
        let e = &read_ledger(&dir.path().join(LEDGER_FILE)).unwrap()[0];
        let (r, tar) = load_cell(e).unwrap();
        assert_eq!(r.data.content_hash(), e.result_hash);
        assert_eq!(tar.len(), e.size);
    }

    #[test]
    fn failing_cells_are_recorded_and_the_run_continues() {
        let dir = tempfile::tempdir().unwrap();
        // deep_inversion needs batch norm, which the MLP target lacks
        let m = run_config(&cfg(dir.path(), &["deep_inversion", "mi_face"])).unwrap();
        assert_eq!(m.failures(), 2);
        assert_eq!(m.computed(), 2);
        assert!(m.cells.iter().filter(|c| c.status == CellStatus::Failed).all(|c| c.error.is_some()));
    }

    #[test]
    fn unknown_attack_is_rejected_up_front() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(run_config(&cfg(dir.path(), &["nope"])), Err(Error::UnknownAttack(_))));
    }
}
