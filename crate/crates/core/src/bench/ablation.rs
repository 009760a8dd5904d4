use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics::{d_dis, s_dis_and_coverage, FeatureExtractor, MatchOptions, SampleDistanceKind};
use crate::result::ReconstructionResult;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub count: usize,
    pub d_dis: f64,
    pub s_dis: BTreeMap<String, f64>,
    pub coverage: BTreeMap<String, f64>,
}

/// Metrics of the first `count` candidates of the selection-ordered pool,
/// for each requested count.
pub fn quantity_ablation(
    result: &ReconstructionResult,
    tar: &LabeledDataset,
    counts: &[usize],
    extractor: &dyn FeatureExtractor,
    kinds: &[SampleDistanceKind],
    matching: MatchOptions,
) -> Result<Vec<AblationRow>> {
    let pool = result.pool.as_ref().unwrap_or(&result.data);
    counts
        .iter()
        .map(|&count| {
            if count == 0 || count > pool.len() {
                return Err(Error::Invalid(format!(
                    "ablation step {count} outside the candidate pool of {}",
                    pool.len()
                )));
            }
            let rec = pool.subset(&(0..count).collect::<Vec<_>>());
            let mut s_dis = BTreeMap::new();
            let mut coverage = BTreeMap::new();
            for &k in kinds {
                let r = s_dis_and_coverage(&rec, tar, k, matching)?;
                s_dis.insert(k.name().to_string(), r.s_dis);
                coverage.insert(k.name().to_string(), r.coverage);
            }
            Ok(AblationRow {
                count,
                d_dis: d_dis(&rec, tar, extractor)?,
                s_dis,
                coverage,
            })
        })
        .collect()
}
