//! Threat-model taxonomy: what an adversary knows about the training
//! procedure, the model and the data.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TrainingType {
    Static,
    Dynamic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelAccess {
    BlackBox,
    WhiteBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DatasetAccess {
    NoData,
    SimilarDistribution,
    SameDistribution,
}

/// The (training type, model access, dataset access) triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KnowledgeTriple {
    pub training_type: TrainingType,
    pub model_access: ModelAccess,
    pub dataset_access: DatasetAccess,
}

impl KnowledgeTriple {
    pub const fn new(t: TrainingType, m: ModelAccess, d: DatasetAccess) -> Self {
        Self {
            training_type: t,
            model_access: m,
            dataset_access: d,
        }
    }

    /// Whether `self` grants at least what `required` asks for on every axis.
    pub fn covers(&self, required: &KnowledgeTriple) -> bool {
        self.training_type >= required.training_type
            && self.model_access >= required.model_access
            && self.dataset_access >= required.dataset_access
    }
}

impl fmt::Display for KnowledgeTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({:?}, {:?}, {:?})",
            self.training_type, self.model_access, self.dataset_access
        )
    }
}

/// An adversary's knowledge, with the auxiliary dataset when one is granted.
#[derive(Clone, Debug)]
pub struct ExtraKnowledge {
    triple: KnowledgeTriple,
    aux: Option<Arc<LabeledDataset>>,
}

impl ExtraKnowledge {
    /// Fails unless `aux` is present exactly when dataset access is granted.
    pub fn new(triple: KnowledgeTriple, aux: Option<Arc<LabeledDataset>>) -> Result<Self> {
        match (triple.dataset_access, &aux) {
            (DatasetAccess::NoData, Some(_)) => Err(Error::Invalid(
                "an auxiliary dataset was supplied without dataset access".into(),
            )),
            (DatasetAccess::NoData, None) => Ok(Self { triple, aux }),
            (_, None) => Err(Error::Invalid(format!(
                "{:?} access requires an auxiliary dataset",
                triple.dataset_access
            ))),
            (_, Some(_)) => Ok(Self { triple, aux }),
        }
    }

    pub fn triple(&self) -> KnowledgeTriple {
        self.triple
    }

    pub fn training_type(&self) -> TrainingType {
        self.triple.training_type
    }

    pub fn model_access(&self) -> ModelAccess {
        self.triple.model_access
    }

    pub fn dataset_access(&self) -> DatasetAccess {
        self.triple.dataset_access
    }

    pub fn aux(&self) -> Option<&LabeledDataset> {
        self.aux.as_deref()
    }

    /// Capability error unless this knowledge covers `required`.
    pub fn require(&self, attack_id: &str, required: &KnowledgeTriple) -> Result<()> {
        if self.triple.covers(required) {
            Ok(())
        } else {
            Err(Error::Capability(format!(
                "`{attack_id}` needs {required} but the adversary has {}",
                self.triple
            )))
        }
    }
}

/// The ten registered attack ids.
pub const ATTACK_IDS: [&str; 10] = [
    "mi_face",
    "deep_dream",
    "deep_inversion",
    "bias_rec",
    "revealer",
    "kedmi",
    "plgmi",
    "inv_alignment",
    "updates_leak",
    "deep_leakage",
];

/// Minimal knowledge an attack needs.
pub fn classify_attack(attack_id: &str) -> Result<KnowledgeTriple> {
    use DatasetAccess::*;
    use ModelAccess::*;
    use TrainingType::*;
    let t = match attack_id {
        "mi_face" | "deep_dream" | "deep_inversion" | "bias_rec" => {
            KnowledgeTriple::new(Static, WhiteBox, NoData)
        }
        "revealer" | "kedmi" | "plgmi" => KnowledgeTriple::new(Static, WhiteBox, SimilarDistribution),
        "inv_alignment" => KnowledgeTriple::new(Static, BlackBox, SimilarDistribution),
        "updates_leak" => KnowledgeTriple::new(Dynamic, BlackBox, SameDistribution),
        "deep_leakage" => KnowledgeTriple::new(Dynamic, WhiteBox, NoData),
        other => return Err(Error::UnknownAttack(other.to_string())),
    };
    Ok(t)
}

/// How an auxiliary corpus relates to the target corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    Same,
    Similar,
}

/// Configured table of dataset relations; nothing is inferred.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairingTable {
    pub pairs: Vec<(String, String, Relation)>,
}

impl Default for PairingTable {
    fn default() -> Self {
        let s = |a: &str, b: &str| (a.to_string(), b.to_string(), Relation::Similar);
        Self {
            pairs: vec![
                s("mnist", "kmnist"),
                s("cifar10", "cifar100"),
                s("mnist:0-4", "mnist:5-9"),
                s("cifar10:0-4", "cifar10:5-9"),
            ],
        }
    }
}

impl PairingTable {
    /// Dataset access the pair grants, if the pair is known.
    pub fn access(&self, target: &str, aux: &str) -> Option<DatasetAccess> {
        if target == aux {
            return Some(DatasetAccess::SameDistribution);
        }
        self.pairs
            .iter()
            .find(|(a, b, _)| (a == target && b == aux) || (a == aux && b == target))
            .map(|(_, _, r)| match r {
                Relation::Same => DatasetAccess::SameDistribution,
                Relation::Similar => DatasetAccess::SimilarDistribution,
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taxonomy_grid() {
        use DatasetAccess::*;
        use ModelAccess::*;
        use TrainingType::*;
        assert_eq!(classify_attack("mi_face").unwrap(), KnowledgeTriple::new(Static, WhiteBox, NoData));
        assert_eq!(
            classify_attack("updates_leak").unwrap(),
            KnowledgeTriple::new(Dynamic, BlackBox, SameDistribution)
        );
        assert_eq!(
            classify_attack("inv_alignment").unwrap(),
            KnowledgeTriple::new(Static, BlackBox, SimilarDistribution)
        );
        assert!(matches!(classify_attack("nope"), Err(Error::UnknownAttack(_))));
        for id in ATTACK_IDS {
            assert!(classify_attack(id).is_ok());
        }
    }

    #[test]
    fn aux_presence_matches_dataset_access() {
        let none = KnowledgeTriple::new(TrainingType::Static, ModelAccess::WhiteBox, DatasetAccess::NoData);
        let sim = KnowledgeTriple {
            dataset_access: DatasetAccess::SimilarDistribution,
            ..none
        };
        let aux = Arc::new(LabeledDataset::empty(crate::data::ImageShape::MNIST, 10));
        assert!(ExtraKnowledge::new(none, None).is_ok());
        assert!(ExtraKnowledge::new(none, Some(aux.clone())).is_err());
        assert!(ExtraKnowledge::new(sim, None).is_err());
        assert!(ExtraKnowledge::new(sim, Some(aux)).is_ok());
    }

    #[test]
    fn coverage_is_componentwise() {
        let weak = KnowledgeTriple::new(TrainingType::Static, ModelAccess::BlackBox, DatasetAccess::SameDistribution);
        let need = classify_attack("mi_face").unwrap();
        assert!(!weak.covers(&need));
        let k = ExtraKnowledge::new(weak, Some(Arc::new(LabeledDataset::empty(crate::data::ImageShape::MNIST, 2)))).unwrap();
        assert!(matches!(k.require("mi_face", &need), Err(Error::Capability(_))));
    }

    #[test]
    fn pairing_table_is_symmetric() {
        let t = PairingTable::default();
        assert_eq!(t.access("kmnist", "mnist"), Some(DatasetAccess::SimilarDistribution));
        assert_eq!(t.access("mnist", "mnist"), Some(DatasetAccess::SameDistribution));
        assert_eq!(t.access("mnist", "cifar10"), None);
    }
}
