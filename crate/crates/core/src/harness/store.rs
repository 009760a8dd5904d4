//! Append-only, content-addressed store of trained models, splits and
//! generators.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{split_dataset, split_from_saved, train_target, ExperimentPlan, Split, SplitIndices, TargetMetrics, TrainedTarget};
use crate::attacks::GeneratorBundle;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::Network;

fn short_hash(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..10])
}

/// Key of the model trained by `plan` at `size`.
pub fn plan_hash(plan: &ExperimentPlan, size: usize) -> String {
    short_hash(&serde_json::to_vec(&(plan, size)).expect("plan serializes"))
}

fn split_hash(ds: &LabeledDataset, plan: &ExperimentPlan) -> String {
    let key = (ds.content_hash(), &plan.split, &plan.sizes, plan.seed);
    short_hash(&serde_json::to_vec(&key).expect("serializable"))
}

#[derive(Clone, Debug)]
pub struct StoredModel {
    pub hash: String,
    pub network: Network,
    pub metrics: TargetMetrics,
}

/// Layout: `models/<hash>/{weights.bin, plan.json, metrics.json}`,
/// `splits/<hash>.json`, `generators/<key>.bin`.
#[derive(Clone, Debug)]
pub struct ModelStore {
    root: PathBuf,
}

fn write_new(path: &Path, bytes: &[u8]) -> Result<()> {
    // content-addressed: an existing file already holds these bytes
    if path.exists() {
        return Ok(());
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

impl ModelStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["models", "splits", "generators"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(Error::io(&d))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn model_dir(&self, hash: &str) -> PathBuf {
        self.root.join("models").join(hash)
    }

    pub fn save_model(&self, plan: &ExperimentPlan, size: usize, t: &TrainedTarget) -> Result<String> {
        let hash = plan_hash(plan, size);
        let dir = self.model_dir(&hash);
        fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        write_new(&dir.join("plan.json"), &serde_json::to_vec_pretty(&serde_json::json!({"plan": plan, "size": size}))?)?;
        write_new(&dir.join("metrics.json"), &serde_json::to_vec_pretty(&t.metrics)?)?;
        // weights last: their presence marks a complete entry
        write_new(&dir.join("weights.bin"), &t.network.to_bytes())?;
        Ok(hash)
    }

    pub fn load_model(&self, plan: &ExperimentPlan, size: usize) -> Result<Option<StoredModel>> {
        let hash = plan_hash(plan, size);
        let dir = self.model_dir(&hash);
        let w = dir.join("weights.bin");
        if !w.exists() {
            return Ok(None);
        }
        let network = Network::from_bytes(&fs::read(&w).map_err(Error::io(&w))?)?;
        let m = dir.join("metrics.json");
        let metrics = serde_json::from_slice(&fs::read(&m).map_err(Error::io(&m))?)?;
        Ok(Some(StoredModel { hash, network, metrics }))
    }

    /// Loads the model for `(plan, size)` or trains and stores it.
    pub fn train_or_load(&self, plan: &ExperimentPlan, split: &Split, size: usize) -> Result<StoredModel> {
        if let Some(m) = self.load_model(plan, size)? {
            return Ok(m);
        }
        let t = train_target(plan, split, size)?;
        let hash = self.save_model(plan, size, &t)?;
        Ok(StoredModel {
            hash,
            network: t.network,
            metrics: t.metrics,
        })
    }

    /// The split of `ds` under `plan`, reusing saved index lists.
    pub fn split(&self, ds: &LabeledDataset, plan: &ExperimentPlan) -> Result<Split> {
        let path = self.root.join("splits").join(format!("{}.json", split_hash(ds, plan)));
        if path.exists() {
            let idx: SplitIndices = serde_json::from_slice(&fs::read(&path).map_err(Error::io(&path))?)?;
            return split_from_saved(ds, plan, idx);
        }
        let s = split_dataset(ds, plan)?;
        write_new(&path, &serde_json::to_vec(&s.indices)?)?;
        Ok(s)
    }

    pub fn generator_path(&self, key: &str) -> PathBuf {
        self.root.join("generators").join(format!("{key}.bin"))
    }

    pub fn load_generator(&self, key: &str) -> Result<Option<GeneratorBundle>> {
        let p = self.generator_path(key);
        if !p.exists() {
            return Ok(None);
        }
        GeneratorBundle::load(&p).map(Some)
    }

    pub fn save_generator(&self, key: &str, g: &GeneratorBundle) -> Result<()> {
        write_new(&self.generator_path(key), &g.to_bytes())
    }
}
