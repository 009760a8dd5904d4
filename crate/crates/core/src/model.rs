//! Target models and the access-policy layer that hides their internals.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::data::{ImageShape, LabeledDataset};
use crate::error::{Error, Result};
use crate::knowledge::{KnowledgeTriple, ModelAccess, TrainingType};
use crate::nn::{BnStats, Network};
use crate::tensor::Tensor;

/// A trained classifier, optionally with the two versions of an update.
#[derive(Clone, Debug)]
pub struct TargetModel {
    current: Arc<Network>,
    versions: Option<[Arc<Network>; 2]>,
}

impl TargetModel {
    pub fn new(net: Network) -> Self {
        Self {
            current: Arc::new(net),
            versions: None,
        }
    }

    /// A model observed before and after one update; queries hit `after`.
    pub fn with_update(before: Network, after: Network) -> Result<Self> {
        if before.spec() != after.spec() {
            return Err(Error::Invalid("model versions differ in architecture".into()));
        }
        let after = Arc::new(after);
        Ok(Self {
            current: Arc::clone(&after),
            versions: Some([Arc::new(before), after]),
        })
    }

    pub fn architecture_id(&self) -> String {
        self.current.spec().architecture.id()
    }

    pub fn class_count(&self) -> usize {
        self.current.classes()
    }

    pub fn input_shape(&self) -> ImageShape {
        self.current.spec().input
    }

    pub fn network(&self) -> &Network {
        &self.current
    }

    pub fn bn_stats(&self) -> &[BnStats] {
        self.current.bn_stats()
    }

    pub fn training_type(&self) -> TrainingType {
        if self.versions.is_some() {
            TrainingType::Dynamic
        } else {
            TrainingType::Static
        }
    }

    /// Posterior vectors for an NCHW batch.
    pub fn query(&self, x: &Tensor) -> Tensor {
        self.current.predict_proba(x)
    }
}

/// What an adversary holds: a model behind an access policy. Cheap to clone;
/// clones share the query counter.
#[derive(Clone, Debug)]
pub struct ModelView {
    model: TargetModel,
    access: ModelAccess,
    dynamic: bool,
    queries: Arc<AtomicU64>,
}

/// Wraps `model` so that only what `k` grants is reachable.
pub fn restrict_access(model: &TargetModel, k: &KnowledgeTriple) -> Result<ModelView> {
    let dynamic = k.training_type == TrainingType::Dynamic;
    if dynamic && model.versions.is_none() {
        return Err(Error::Invalid(
            "dynamic knowledge requires a model with a version history".into(),
        ));
    }
    Ok(ModelView {
        model: model.clone(),
        access: k.model_access,
        dynamic,
        queries: Arc::new(AtomicU64::new(0)),
    })
}

impl ModelView {
    /// Full white-box view of a model the adversary owns.
    pub fn owned(net: Network) -> Self {
        Self {
            model: TargetModel::new(net),
            access: ModelAccess::WhiteBox,
            dynamic: false,
            queries: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn access(&self) -> ModelAccess {
        self.access
    }

    pub fn class_count(&self) -> usize {
        self.model.class_count()
    }

    pub fn input_shape(&self) -> ImageShape {
        self.model.input_shape()
    }

    pub fn query(&self, x: &Tensor) -> Tensor {
        self.queries.fetch_add(x.shape()[0] as u64, Ordering::Relaxed);
        self.model.query(x)
    }

    pub fn query_dataset(&self, ds: &LabeledDataset) -> Tensor {
        self.query(&ds.all_nchw())
    }

    /// Number of samples queried through this view and its clones.
    pub fn queries_used(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    fn white_box(&self, what: &str) -> Result<()> {
        match self.access {
            ModelAccess::WhiteBox => Ok(()),
            ModelAccess::BlackBox => Err(Error::Capability(format!("{what} needs white-box access"))),
        }
    }

    /// Parameters and architecture.
    pub fn network(&self) -> Result<&Network> {
        self.white_box("the parameter snapshot")?;
        Ok(self.model.network())
    }

    pub fn bn_stats(&self) -> Result<&[BnStats]> {
        self.white_box("batch-norm statistics")?;
        Ok(self.model.bn_stats())
    }

    /// Views of the model before and after its update, with this view's
    /// access level.
    pub fn versions(&self) -> Result<[ModelView; 2]> {
        let v = match (&self.model.versions, self.dynamic) {
            (Some(v), true) => v,
            _ => return Err(Error::Capability("version history needs dynamic knowledge".into())),
        };
        Ok([0, 1].map(|i| ModelView {
            model: TargetModel {
                current: Arc::clone(&v[i]),
                versions: None,
            },
            access: self.access,
            dynamic: false,
            queries: Arc::clone(&self.queries),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::DatasetAccess;
    use crate::nn::{Architecture, ModelSpec};

    fn net(seed: u64) -> Network {
        Network::new(
            ModelSpec {
                architecture: Architecture::vgg_small(),
                input: ImageShape::MNIST,
                classes: 10,
            },
            seed,
        )
        .unwrap()
    }

    fn k(t: TrainingType, m: ModelAccess) -> KnowledgeTriple {
        KnowledgeTriple::new(t, m, DatasetAccess::NoData)
    }

    #[test]
    fn black_box_hides_internals() {
        let m = TargetModel::new(net(1));
        let v = restrict_access(&m, &k(TrainingType::Static, ModelAccess::BlackBox)).unwrap();
        assert!(matches!(v.bn_stats(), Err(Error::Capability(_))));
        assert!(v.network().is_err());
        let x = Tensor::zeros(&[2, 1, 28, 28]);
        let p = v.query(&x);
        assert_eq!(p.shape(), &[2, 10]);
        assert_eq!(v.queries_used(), 2);
    }

    #[test]
    fn white_box_exposes_identical_stats() {
        let m = TargetModel::new(net(1));
        let v = restrict_access(&m, &k(TrainingType::Static, ModelAccess::WhiteBox)).unwrap();
        assert_eq!(v.bn_stats().unwrap(), m.bn_stats());
    }

    #[test]
    fn dynamic_needs_two_versions() {
        let m = TargetModel::new(net(1));
        assert!(restrict_access(&m, &k(TrainingType::Dynamic, ModelAccess::BlackBox)).is_err());
        let d = TargetModel::with_update(net(1), net(2)).unwrap();
        let v = restrict_access(&d, &k(TrainingType::Dynamic, ModelAccess::BlackBox)).unwrap();
        let [a, b] = v.versions().unwrap();
        let x = Tensor::full(&[1, 1, 28, 28], 0.5);
        assert_ne!(a.query(&x), b.query(&x));
        assert!(a.network().is_err());
        let s = restrict_access(&d, &k(TrainingType::Static, ModelAccess::BlackBox)).unwrap();
        assert!(s.versions().is_err());
    }
}
