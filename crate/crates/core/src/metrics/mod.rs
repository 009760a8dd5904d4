//! Dataset-level (D-Dis) and sample-level (S-Dis, coverage) evaluation.

mod extract;
mod fid;
mod sample;

pub use extract::{extractor_by_id, FeatureExtractor, IdentityExtractor, NetworkExtractor, PoolExtractor};
pub use fid::{fit_gaussian, frechet_distance, GaussianSummary};
pub use sample::{
    mse, psnr_from_mse, s_dis_and_coverage, sample_distance, ssim, MatchOptions, SampleDistanceKind,
    SampleLevelReport, SsimStats, PSNR_CAP,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};

/// Fréchet distance between Gaussian fits of extracted features.
pub fn d_dis(rec: &LabeledDataset, tar: &LabeledDataset, extractor: &dyn FeatureExtractor) -> Result<f64> {
    if rec.is_empty() || tar.is_empty() {
        return Err(Error::InsufficientSamples { needed: 2, got: 0 });
    }
    let fr = extractor.extract(rec)?;
    let ft = extractor.extract(tar)?;
    if fr.ncols() != ft.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "extractor produced {} vs {} features",
            fr.ncols(),
            ft.ncols()
        )));
    }
    frechet_distance(&fit_gaussian(&fr)?, &fit_gaussian(&ft)?)
}

/// One component of a metric vector, oriented so that 0 is perfect.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricComponent {
    DDis,
    Sample(SampleDistanceKind),
}

/// The metric vector μ used by the exact/approximate predicates.
pub struct MetricBundle<'a> {
    pub extractor: &'a dyn FeatureExtractor,
    pub components: Vec<MetricComponent>,
    pub matching: MatchOptions,
}

impl<'a> MetricBundle<'a> {
    /// D-Dis followed by SSIM, PSNR and MSE.
    pub fn full(extractor: &'a dyn FeatureExtractor) -> Self {
        let mut components = vec![MetricComponent::DDis];
        components.extend(SampleDistanceKind::ALL.map(MetricComponent::Sample));
        Self {
            extractor,
            components,
            matching: MatchOptions::default(),
        }
    }

    pub fn arity(&self) -> usize {
        self.components.len()
    }

    /// Normalized metric vector: D-Dis raw, `1 − SSIM`, `(100 − PSNR)/100`,
    /// MSE raw.
    pub fn evaluate(&self, rec: &LabeledDataset, tar: &LabeledDataset) -> Result<Vec<f64>> {
        self.components
            .iter()
            .map(|c| match c {
                MetricComponent::DDis => d_dis(rec, tar, self.extractor),
                MetricComponent::Sample(k) => {
                    let s = s_dis_and_coverage(rec, tar, *k, self.matching)?.s_dis;
                    Ok(match k {
                        SampleDistanceKind::Ssim => 1.0 - s,
                        SampleDistanceKind::Psnr => (PSNR_CAP - s) / PSNR_CAP,
                        SampleDistanceKind::Mse => s,
                    })
                }
            })
            .collect()
    }
}

const EXACT_TOLERANCE: f64 = 1e-9;

pub fn is_exact(rec: &LabeledDataset, tar: &LabeledDataset, mu: &MetricBundle<'_>) -> Result<bool> {
    Ok(mu.evaluate(rec, tar)?.iter().all(|v| v.abs() <= EXACT_TOLERANCE))
}

pub fn is_approximate(
    rec: &LabeledDataset,
    tar: &LabeledDataset,
    mu: &MetricBundle<'_>,
    eps: &[f64],
) -> Result<bool> {
    if eps.len() != mu.arity() {
        return Err(Error::DimensionMismatch(format!(
            "ε has {} entries, μ has {}",
            eps.len(),
            mu.arity()
        )));
    }
    if eps.iter().any(|&e| !(e >= 0.0)) {
        return Err(Error::Invalid("ε must be componentwise non-negative".into()));
    }
    let v = mu.evaluate(rec, tar)?;
    Ok(v.iter().zip(eps).all(|(m, e)| *m <= e + EXACT_TOLERANCE))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub s_dis: f64,
    pub coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorInfo {
    pub id: String,
    pub hash: String,
}

/// Serializable evaluation of one (reconstruction, target) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub d_dis: f64,
    pub sample: BTreeMap<String, SampleSummary>,
    pub extractor: ExtractorInfo,
}

impl MetricReport {
    pub fn evaluate(
        rec: &LabeledDataset,
        tar: &LabeledDataset,
        extractor: &dyn FeatureExtractor,
        kinds: &[SampleDistanceKind],
        matching: MatchOptions,
    ) -> Result<Self> {
        let mut sample = BTreeMap::new();
        for &k in kinds {
            let r = s_dis_and_coverage(rec, tar, k, matching)?;
            sample.insert(
                k.name().to_string(),
                SampleSummary {
                    s_dis: r.s_dis,
                    coverage: r.coverage,
                },
            );
        }
        Ok(Self {
            d_dis: d_dis(rec, tar, extractor)?,
            sample,
            extractor: ExtractorInfo {
                id: extractor.id(),
                hash: extractor.fingerprint(),
            },
        })
    }

    pub fn get(&self, kind: SampleDistanceKind) -> Option<&SampleSummary> {
        self.sample.get(kind.name())
    }
}

/// The nearest-match mapping as `rec_index,target_index,score` CSV.
pub fn mapping_csv(report: &SampleLevelReport) -> String {
    let mut s = String::from("rec_index,target_index,score\n");
    for (i, (j, v)) in report.mapping.iter().zip(&report.scores).enumerate() {
        s.push_str(&format!("{i},{j},{v}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageShape;

    fn line(vals: &[f32]) -> LabeledDataset {
        LabeledDataset::from_parts(ImageShape::new(1, 1, 1), 1, vals.to_vec(), vec![0; vals.len()]).unwrap()
    }

    #[test]
    fn identity_d_dis_matches_analytic_frechet() {
        // means 0 and 1, unit variances
        let a = line(&[-1.0, 1.0]);
        let b = line(&[0.0, 2.0]);
        let d = d_dis(&a, &b, &IdentityExtractor).unwrap();
        // sample variance of {-1, 1} is 2 for both, so only the mean term remains
        assert!((d - 1.0).abs() < 1e-8, "{d}");
        assert_eq!(d_dis(&a, &a, &IdentityExtractor).unwrap(), 0.0);
    }

    #[test]
    fn exact_implies_approximate_at_zero() {
        let s = ImageShape::new(7, 7, 1);
        let px: Vec<f32> = (0..98).map(|i| (i % 5) as f32 / 4.0).collect();
        let tar = LabeledDataset::from_parts(s, 1, px, vec![0, 0]).unwrap();
        let mu = MetricBundle::full(&IdentityExtractor);
        assert!(is_exact(&tar, &tar, &mu).unwrap());
        assert!(is_approximate(&tar, &tar, &mu, &[0.0; 4]).unwrap());
        assert!(is_approximate(&tar, &tar, &mu, &[0.0; 3]).is_err());
        assert!(is_approximate(&tar, &tar, &mu, &[-1.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn d_dis_one_fails_half_epsilon() {
        let a = line(&[-1.0, 1.0]);
        let b = line(&[0.0, 2.0]);
        let mu = MetricBundle {
            extractor: &IdentityExtractor,
            components: vec![MetricComponent::DDis],
            matching: MatchOptions::default(),
        };
        assert!(!is_approximate(&a, &b, &mu, &[0.5]).unwrap());
        assert!(is_approximate(&a, &b, &mu, &[1.0]).unwrap());
    }

    #[test]
    fn report_json_shape() {
        let s = ImageShape::new(7, 7, 1);
        let px: Vec<f32> = (0..147).map(|i| (i % 11) as f32 / 10.0).collect();
        let tar = LabeledDataset::from_parts(s, 1, px, vec![0, 0, 0]).unwrap();
        let r = MetricReport::evaluate(&tar, &tar, &PoolExtractor { grid: 7 }, &SampleDistanceKind::ALL, MatchOptions::default()).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["sample"]["MSE"]["coverage"], 1.0);
        assert_eq!(v["sample"]["SSIM"]["s_dis"], 1.0);
        assert_eq!(v["extractor"]["id"], "pool7");
    }
}
