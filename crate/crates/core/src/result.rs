//! Reconstruction results and their on-disk form.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{load_png, quantize, save_png, ImageShape, LabeledDataset};
use crate::error::{Error, Result};
use crate::knowledge::KnowledgeTriple;

/// Output of one attack run. Pixels are snapped to the 16-bit grid on
/// construction so the PNG archive is lossless.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionResult {
    pub data: LabeledDataset,
    pub attack_id: String,
    pub knowledge: KnowledgeTriple,
    pub seed: u64,
    pub wall_time_s: f64,
    /// Full candidate pool in selection order when more candidates than
    /// `data.len()` were generated; `data` is its prefix.
    pub pool: Option<LabeledDataset>,
    /// Non-fatal diagnostics (non-convergence, degenerate inputs, ...).
    pub flags: Vec<String>,
}

fn snap(mut ds: LabeledDataset) -> LabeledDataset {
    for i in 0..ds.len() {
        for v in ds.image_mut(i) {
            *v = quantize(*v);
        }
    }
    ds
}

impl ReconstructionResult {
    pub fn new(data: LabeledDataset, attack_id: &str, knowledge: KnowledgeTriple, seed: u64) -> Self {
        Self {
            data: snap(data),
            attack_id: attack_id.to_string(),
            knowledge,
            seed,
            wall_time_s: 0.0,
            pool: None,
            flags: Vec::new(),
        }
    }

    pub fn with_pool(mut self, pool: LabeledDataset) -> Self {
        self.pool = Some(snap(pool));
        self
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let meta = Meta {
            attack_id: self.attack_id.clone(),
            knowledge: self.knowledge,
            seed: self.seed,
            wall_time_s: self.wall_time_s,
            size: self.data.len(),
            class_count: self.data.class_count(),
            shape: self.data.shape(),
            labels: self.data.labels().to_vec(),
            pool_labels: self.pool.as_ref().map(|p| p.labels().to_vec()),
            flags: self.flags.clone(),
        };
        let mp = dir.join("meta.json");
        fs::write(&mp, serde_json::to_vec_pretty(&meta)?).map_err(Error::io(&mp))?;
        write_images(&dir.join("images"), &self.data)?;
        if let Some(pool) = &self.pool {
            write_images(&dir.join("pool"), pool)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mp = dir.join("meta.json");
        let meta: Meta = serde_json::from_slice(&fs::read(&mp).map_err(Error::io(&mp))?)?;
        if meta.labels.len() != meta.size {
            return Err(Error::Invalid("meta.json size disagrees with labels".into()));
        }
        let data = read_images(&dir.join("images"), &meta.labels, meta.shape, meta.class_count)?;
        let pool = match &meta.pool_labels {
            Some(l) => Some(read_images(&dir.join("pool"), l, meta.shape, meta.class_count)?),
            None => None,
        };
        Ok(Self {
            data,
            attack_id: meta.attack_id,
            knowledge: meta.knowledge,
            seed: meta.seed,
            wall_time_s: meta.wall_time_s,
            pool,
            flags: meta.flags,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    attack_id: String,
    knowledge: KnowledgeTriple,
    seed: u64,
    wall_time_s: f64,
    size: usize,
    class_count: usize,
    shape: ImageShape,
    labels: Vec<usize>,
    #[serde(default)]
    pool_labels: Option<Vec<usize>>,
    #[serde(default)]
    flags: Vec<String>,
}

fn width(n: usize) -> usize {
    n.max(1).to_string().len().max(5)
}

fn write_images(dir: &Path, ds: &LabeledDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let w = width(ds.len());
    for i in 0..ds.len() {
        save_png(&dir.join(format!("{i:0w$}.png")), ds.image(i), ds.shape())?;
    }
    Ok(())
}

fn read_images(dir: &Path, labels: &[usize], shape: ImageShape, classes: usize) -> Result<LabeledDataset> {
    let mut ds = LabeledDataset::empty(shape, classes);
    let w = width(labels.len());
    for (i, &l) in labels.iter().enumerate() {
        let (img, s) = load_png(&dir.join(format!("{i:0w$}.png")))?;
        if s != shape {
            return Err(Error::DimensionMismatch(format!("image {i} is {s:?}, expected {shape:?}")));
        }
        if l >= classes {
            return Err(Error::Invalid(format!("label {l} >= {classes}")));
        }
        ds.push(&img, l);
    }
    Ok(ds)
}

/// True iff the result has exactly `target_size` samples, all in `[0, 1]`.
pub fn check_result_contract(result: &ReconstructionResult, target_size: usize) -> bool {
    result.data.len() == target_size
        && result.data.pixels().iter().all(|&v| (0.0..=1.0).contains(&v))
}
