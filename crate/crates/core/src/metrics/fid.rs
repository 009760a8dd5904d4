use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Gaussian fit of a feature distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianSummary {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "mean has {d} entries, covariance is {}×{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if (&cov - cov.transpose()).amax() > 1e-8 {
            return Err(Error::Invalid("covariance is not symmetric".into()));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Column mean and unbiased covariance of an n×d feature matrix.
pub fn fit_gaussian(features: &DMatrix<f64>) -> Result<GaussianSummary> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let mean = features.row_mean().transpose();
    let mut centered = features.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianSummary { mean, cov })
}

const RIDGE: f64 = 1e-6;
const RIDGE_TRIGGER: f64 = 1e-10;
const PSD_TOLERANCE: f64 = -1e-6;

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians:
/// `‖ν_a − ν_b‖² + tr(Σ_a + Σ_b − 2 (Σ_a^½ Σ_b Σ_a^½)^½)`.
///
/// Both covariances get a small ridge when either is (near) singular.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "feature dimensions {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    if a == b {
        return Ok(0.0);
    }
    let d = a.dim();
    let (mut ca, mut cb) = (a.cov.clone(), b.cov.clone());
    let (ma, mb) = (min_eigenvalue(&ca), min_eigenvalue(&cb));
    if ma.min(mb) < RIDGE_TRIGGER {
        let ridge = DMatrix::<f64>::identity(d, d) * RIDGE;
        ca += &ridge;
        cb += &ridge;
        if min_eigenvalue(&ca).min(min_eigenvalue(&cb)) < PSD_TOLERANCE {
            return Err(Error::Invalid("covariance is not positive semi-definite".into()));
        }
    }
    let diff = &a.mean - &b.mean;
    let sa = sqrt_psd(&ca);
    let inner = &sa * &cb * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let dist = diff.norm_squared() + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    Ok(dist.max(0.0))
}
