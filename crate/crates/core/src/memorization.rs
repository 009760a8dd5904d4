//! Leave-one-out memorization: how much the chance of classifying `x_i`
//! correctly drops when `x_i` is left out of training.
//!
//! Trial `t` trains both the full and the reduced model with seed
//! `base_seed + t` (paired estimator). Per trial the full-data model does
//! not depend on `i`, so a model-level estimate trains it once per trial.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{fit, Activation, Architecture, ModelSpec, Network, OptimizerKind, TrainConfig};

/// A seedable learning algorithm.
pub trait Trainer {
    type Model;
    /// Stable identifier used to key ledger entries.
    fn id(&self) -> String;
    fn train(&self, data: &LabeledDataset, seed: u64) -> Result<Self::Model>;
    fn predict(&self, model: &Self::Model, image: &[f32]) -> usize;
}

/// Trains a fresh [`Network`] per call; the seed drives both the
/// initialization and the batch order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetTrainer {
    pub architecture: Architecture,
    pub train: TrainConfig,
}

impl NetTrainer {
    /// Small MLP with a fixed epoch budget, cheap enough for `2k` retrainings
    /// per probe.
    pub fn desk() -> Self {
        Self {
            architecture: Architecture::Mlp {
                hidden: vec![64],
                bias: true,
                activation: Activation::Relu,
            },
            train: TrainConfig {
                epochs: 10,
                batch_size: 32,
                optimizer: OptimizerKind::adam(3e-3),
                seed: 0,
            },
        }
    }
}

impl Trainer for NetTrainer {
    type Model = Network;

    fn id(&self) -> String {
        let cfg = serde_json::to_string(&self.train).expect("train config serializes");
        format!("net:{}:{cfg}", self.architecture.id())
    }

    fn train(&self, data: &LabeledDataset, seed: u64) -> Result<Network> {
        let spec = ModelSpec {
            architecture: self.architecture.clone(),
            input: data.shape(),
            classes: data.class_count(),
        };
        let mut net = Network::new(spec, seed)?;
        fit(&mut net, data, &TrainConfig { seed, ..self.train.clone() })?;
        Ok(net)
    }

    fn predict(&self, model: &Network, image: &[f32]) -> usize {
        let shape = model.spec().input;
        let x = crate::tensor::Tensor::new(shape.nchw(1), image.to_vec());
        model.predict(&x)[0]
    }
}

/// 1-nearest-neighbour under squared Euclidean distance; ties go to the
/// earlier sample. Deterministic, so its memorization is in {−1, 0, 1}.
#[derive(Clone, Copy, Debug, Default)]
pub struct NearestNeighbor;

impl Trainer for NearestNeighbor {
    type Model = LabeledDataset;

    fn id(&self) -> String {
        "1nn".into()
    }

    fn train(&self, data: &LabeledDataset, _seed: u64) -> Result<LabeledDataset> {
        if data.is_empty() {
            return Err(Error::Invalid("1-NN needs at least one sample".into()));
        }
        Ok(data.clone())
    }

    fn predict(&self, model: &LabeledDataset, image: &[f32]) -> usize {
        let mut best = (f32::INFINITY, 0);
        for (x, label) in model.iter() {
            let d: f32 = x.iter().zip(image).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, label);
            }
        }
        best.1
    }
}

/// Ignores the data and always answers the same class.
#[derive(Clone, Copy, Debug)]
pub struct ConstantTrainer(pub usize);

impl Trainer for ConstantTrainer {
    type Model = ();

    fn id(&self) -> String {
        format!("constant:{}", self.0)
    }

    fn train(&self, _data: &LabeledDataset, _seed: u64) -> Result<()> {
        Ok(())
    }

    fn predict(&self, _model: &(), _image: &[f32]) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorizationEstimate {
    pub sample_index: usize,
    pub mem: f64,
    pub trials: usize,
    pub with_count: usize,
    pub without_count: usize,
}

impl MemorizationEstimate {
    fn from_outcomes(sample_index: usize, with: &[bool], without: &[bool]) -> Self {
        let trials = with.len();
        let with_count = with.iter().filter(|&&c| c).count();
        let without_count = without.iter().filter(|&&c| c).count();
        Self {
            sample_index,
            mem: with_count as f64 / trials as f64 - without_count as f64 / trials as f64,
            trials,
            with_count,
            without_count,
        }
    }
}

/// Per-trial correctness of one probe; the raw form kept in the ledger.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemRecord {
    pub dataset_hash: String,
    pub trainer_id: String,
    pub index: usize,
    pub trials: usize,
    pub base_seed: u64,
    pub with_correct: Vec<bool>,
    pub without_correct: Vec<bool>,
}

impl MemRecord {
    pub fn estimate(&self) -> MemorizationEstimate {
        MemorizationEstimate::from_outcomes(self.index, &self.with_correct, &self.without_correct)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMemorization {
    pub mean: f64,
    /// Standard error of `mean` over trials: the spread of the per-trial
    /// paired differences (averaged over probes) divided by `√k`. `None`
    /// for a single trial.
    pub std_error: Option<f64>,
    pub trial_means: Vec<f64>,
    pub samples: Vec<MemorizationEstimate>,
}

impl ModelMemorization {
    fn from_records(records: &[MemRecord]) -> Self {
        let k = records[0].trials;
        let m = records.len() as f64;
        let trial_means: Vec<f64> = (0..k)
            .map(|t| {
                records
                    .iter()
                    .map(|r| f64::from(u8::from(r.with_correct[t])) - f64::from(u8::from(r.without_correct[t])))
                    .sum::<f64>()
                    / m
            })
            .collect();
        let mean = trial_means.iter().sum::<f64>() / k as f64;
        let std_error = (k > 1).then(|| {
            let var = trial_means.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
            (var / k as f64).sqrt()
        });
        Self {
            mean,
            std_error,
            trial_means,
            samples: records.iter().map(MemRecord::estimate).collect(),
        }
    }
}

fn without(data: &LabeledDataset, i: usize) -> LabeledDataset {
    let keep: Vec<usize> = (0..data.len()).filter(|&j| j != i).collect();
    data.subset(&keep)
}

fn trial_err(trial: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::Trial {
        trial,
        source: Box::new(e),
    }
}

fn check_trials(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Invalid("memorization needs at least one trial".into()));
    }
    Ok(())
}

fn correct<T: Trainer>(trainer: &T, model: &T::Model, data: &LabeledDataset, i: usize) -> bool {
    trainer.predict(model, data.image(i)) == data.label(i)
}

/// Raw outcomes for probes `indices`, training the full-data model once per
/// trial.
fn records<T: Trainer>(trainer: &T, data: &LabeledDataset, indices: &[usize], k: usize, base_seed: u64) -> Result<Vec<MemRecord>> {
    let hash = data.content_hash();
    let id = trainer.id();
    let mut out: Vec<MemRecord> = indices
        .iter()
        .map(|&index| MemRecord {
            dataset_hash: hash.clone(),
            trainer_id: id.clone(),
            index,
            trials: k,
            base_seed,
            with_correct: Vec::with_capacity(k),
            without_correct: Vec::with_capacity(k),
        })
        .collect();
    for t in 0..k {
        let seed = base_seed.wrapping_add(t as u64);
        let full = trainer.train(data, seed).map_err(trial_err(t))?;
        for r in &mut out {
            r.with_correct.push(correct(trainer, &full, data, r.index));
            let reduced = trainer.train(&without(data, r.index), seed).map_err(trial_err(t))?;
            r.without_correct.push(correct(trainer, &reduced, data, r.index));
        }
    }
    Ok(out)
}

/// `mem(A, D, i)` from `k` paired trials.
pub fn estimate_sample_mem<T: Trainer>(trainer: &T, data: &LabeledDataset, i: usize, k: usize, base_seed: u64) -> Result<MemorizationEstimate> {
    check_trials(k)?;
    if i >= data.len() {
        return Err(Error::Invalid(format!("sample index {i} out of range for {} samples", data.len())));
    }
    Ok(records(trainer, data, &[i], k, base_seed)?.remove(0).estimate())
}

/// Mean memorization of the first `m` samples.
pub fn estimate_model_mem<T: Trainer>(trainer: &T, data: &LabeledDataset, m: usize, k: usize, base_seed: u64) -> Result<ModelMemorization> {
    check_probes(data, m, k)?;
    let idx: Vec<usize> = (0..m).collect();
    Ok(ModelMemorization::from_records(&records(trainer, data, &idx, k, base_seed)?))
}

fn check_probes(data: &LabeledDataset, m: usize, k: usize) -> Result<()> {
    check_trials(k)?;
    if m == 0 {
        return Err(Error::Invalid("model memorization needs at least one probe".into()));
    }
    if m > data.len() {
        return Err(Error::InsufficientSamples { needed: m, got: data.len() });
    }
    Ok(())
}

/// Append-only JSONL store of [`MemRecord`]s keyed by
/// `(dataset hash, trainer id, index, trials)`.
#[derive(Clone, Debug)]
pub struct MemLedger {
    path: PathBuf,
}

type MemKey = (String, String, usize, usize, u64);

fn key(r: &MemRecord) -> MemKey {
    (r.dataset_hash.clone(), r.trainer_id.clone(), r.index, r.trials, r.base_seed)
}

impl MemLedger {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn read(&self) -> Result<Vec<MemRecord>> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&self.path).map_err(Error::io(&self.path))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }

    pub fn append(&self, records: &[MemRecord]) -> Result<()> {
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(Error::io(&self.path))?;
        let mut buf = String::new();
        for r in records {
            buf.push_str(&serde_json::to_string(r)?);
            buf.push('\n');
        }
        f.write_all(buf.as_bytes()).map_err(Error::io(&self.path))
    }

    /// [`estimate_model_mem`] reusing ledger entries; only missing probes
    /// are computed and appended.
    pub fn model_mem<T: Trainer>(&self, trainer: &T, data: &LabeledDataset, m: usize, k: usize, base_seed: u64) -> Result<ModelMemorization> {
        check_probes(data, m, k)?;
        let hash = data.content_hash();
        let id = trainer.id();
        let mut known: HashMap<MemKey, MemRecord> = self.read()?.into_iter().map(|r| (key(&r), r)).collect();
        let missing: Vec<usize> = (0..m)
            .filter(|&i| !known.contains_key(&(hash.clone(), id.clone(), i, k, base_seed)))
            .collect();
        if !missing.is_empty() {
            let fresh = records(trainer, data, &missing, k, base_seed)?;
            self.append(&fresh)?;
            known.extend(fresh.into_iter().map(|r| (key(&r), r)));
        }
        let recs: Vec<MemRecord> = (0..m)
            .map(|i| known.remove(&(hash.clone(), id.clone(), i, k, base_seed)).expect("filled above"))
            .collect();
        Ok(ModelMemorization::from_records(&recs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageShape;

    /// Six points on a line, two classes; sample 5 is class 1's only
    /// point far to the right.
    fn toy() -> LabeledDataset {
        let mut ds = LabeledDataset::empty(ImageShape::new(1, 1, 1), 2);
        for (x, c) in [(0.0, 0), (0.1, 0), (0.2, 0), (0.3, 0), (0.4, 0), (1.0, 1)] {
            ds.push(&[x], c);
        }
        ds
    }

    #[test]
    fn constant_trainer_memorizes_nothing() {
        let ds = toy();
        for i in 0..ds.len() {
            let e = estimate_sample_mem(&ConstantTrainer(0), &ds, i, 3, 0).unwrap();
            assert_eq!(e.mem, 0.0);
        }
        assert_eq!(estimate_model_mem(&ConstantTrainer(1), &ds, 6, 2, 0).unwrap().mean, 0.0);
    }

    #[test]
    fn lone_exemplar_is_fully_memorized() {
        let e = estimate_sample_mem(&NearestNeighbor, &toy(), 5, 4, 0).unwrap();
        assert_eq!((e.mem, e.with_count, e.without_count, e.trials), (1.0, 4, 0, 4));
    }

    #[test]
    fn one_nn_matches_exhaustive_hand_check() {
        // with x_i present its own distance is 0; without it the nearest
        // remaining point is the neighbour on the line
        let ds = toy();
        let expect = [0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        for (i, &e) in expect.iter().enumerate() {
            assert_eq!(estimate_sample_mem(&NearestNeighbor, &ds, i, 2, 7).unwrap().mem, e, "sample {i}");
        }
        let m = estimate_model_mem(&NearestNeighbor, &ds, 6, 3, 0).unwrap();
        assert!((m.mean - 1.0 / 6.0).abs() < 1e-12);
        assert_eq!(m.std_error, Some(0.0));
    }

    #[test]
    fn single_trial_correct_both_ways_is_zero() {
        let e = estimate_sample_mem(&NearestNeighbor, &toy(), 2, 1, 0).unwrap();
        assert_eq!((e.mem, e.with_count, e.without_count), (0.0, 1, 1));
        let m = estimate_model_mem(&NearestNeighbor, &toy(), 3, 1, 0).unwrap();
        assert_eq!(m.std_error, None);
    }

    #[test]
    fn rejects_bad_arguments() {
        let ds = toy();
        assert!(estimate_model_mem(&NearestNeighbor, &ds, 0, 2, 0).is_err());
        assert!(estimate_model_mem(&NearestNeighbor, &ds, 7, 2, 0).is_err());
        assert!(estimate_sample_mem(&NearestNeighbor, &ds, 6, 2, 0).is_err());
        assert!(estimate_sample_mem(&NearestNeighbor, &ds, 0, 0, 0).is_err());
    }

    #[test]
    fn trainer_failures_carry_the_trial() {
        struct Flaky;
        impl Trainer for Flaky {
            type Model = ();
            fn id(&self) -> String {
                "flaky".into()
            }
            fn train(&self, _: &LabeledDataset, seed: u64) -> Result<()> {
                if seed == 12 {
                    Err(Error::Invalid("boom".into()))
                } else {
                    Ok(())
                }
            }
            fn predict(&self, _: &(), _: &[f32]) -> usize {
                0
            }
        }
        let err = estimate_sample_mem(&Flaky, &toy(), 0, 4, 10).unwrap_err();
        assert!(matches!(err, Error::Trial { trial: 2, .. }));
    }

    #[test]
    fn ledger_reuses_records() {
        let dir = tempfile::tempdir().unwrap();
        let ledger = MemLedger::new(dir.path().join("mem.jsonl"));
        let ds = toy();
        let a = ledger.model_mem(&NearestNeighbor, &ds, 6, 2, 0).unwrap();
        assert_eq!(ledger.read().unwrap().len(), 6);
        let b = ledger.model_mem(&NearestNeighbor, &ds, 6, 2, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(ledger.read().unwrap().len(), 6);
        assert_eq!(a, estimate_model_mem(&NearestNeighbor, &ds, 6, 2, 0).unwrap());
    }
}
