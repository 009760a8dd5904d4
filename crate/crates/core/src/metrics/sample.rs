use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{ImageShape, LabeledDataset};
use crate::error::{Error, Result};

/// Per-sample similarity measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SampleDistanceKind {
    #[serde(rename = "SSIM")]
    Ssim,
    #[serde(rename = "PSNR")]
    Psnr,
    #[serde(rename = "MSE")]
    Mse,
}

impl SampleDistanceKind {
    pub const ALL: [SampleDistanceKind; 3] = [Self::Ssim, Self::Psnr, Self::Mse];

    pub fn higher_is_better(self) -> bool {
        !matches!(self, Self::Mse)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Ssim => "SSIM",
            Self::Psnr => "PSNR",
            Self::Mse => "MSE",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(s))
    }

    /// Whether score `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        if self.higher_is_better() {
            a > b
        } else {
            a < b
        }
    }
}

pub const PSNR_CAP: f64 = 100.0;
const SSIM_WIN: usize = 7;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

pub fn mse(x: &[f32], y: &[f32]) -> f64 {
    let s: f64 = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    s / x.len() as f64
}

/// PSNR for `[0, 1]` images, capped at 100 dB.
pub fn psnr_from_mse(m: f64) -> f64 {
    if m < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP)
    }
}

/// Sums of `value(i)` over every 7×7 window that lies fully inside the
/// image, for one channel. Row-major over window positions.
fn window_sums(shape: ImageShape, channel: usize, value: impl Fn(usize) -> f64) -> Vec<f64> {
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    let stride = w + 1;
    let mut integral = vec![0.0f64; (h + 1) * stride];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += value((y * w + x) * c + channel);
            integral[(y + 1) * stride + x + 1] = integral[y * stride + x + 1] + row;
        }
    }
    let (oh, ow) = (h + 1 - SSIM_WIN, w + 1 - SSIM_WIN);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let (y1, x1) = (y + SSIM_WIN, x + SSIM_WIN);
            out.push(
                integral[y1 * stride + x1] - integral[y * stride + x1] - integral[y1 * stride + x]
                    + integral[y * stride + x],
            );
        }
    }
    out
}

/// Window means of `x` and `x²` for each channel, reusable across pairs.
#[derive(Clone, Debug)]
pub struct SsimStats {
    mu: Vec<Vec<f64>>,
    ex2: Vec<Vec<f64>>,
}

fn check_ssim_shape(shape: ImageShape) -> Result<()> {
    if shape.height < SSIM_WIN || shape.width < SSIM_WIN {
        return Err(Error::DimensionMismatch(format!(
            "SSIM needs images of at least {SSIM_WIN}×{SSIM_WIN}, got {}×{}",
            shape.height, shape.width
        )));
    }
    Ok(())
}

impl SsimStats {
    pub fn new(x: &[f32], shape: ImageShape) -> Self {
        let n = (SSIM_WIN * SSIM_WIN) as f64;
        let per = |f: &dyn Fn(usize) -> f64| -> Vec<Vec<f64>> {
            (0..shape.channels)
                .map(|c| window_sums(shape, c, f).into_iter().map(|s| s / n).collect())
                .collect()
        };
        Self {
            mu: per(&|i| x[i] as f64),
            ex2: per(&|i| {
                let v = x[i] as f64;
                v * v
            }),
        }
    }
}

fn ssim_with(xs: &SsimStats, ys: &SsimStats, x: &[f32], y: &[f32], shape: ImageShape) -> f64 {
    let n = (SSIM_WIN * SSIM_WIN) as f64;
    let cov_norm = n / (n - 1.0);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for c in 0..shape.channels {
        let sxy = window_sums(shape, c, |i| x[i] as f64 * y[i] as f64);
        let mut acc = 0.0;
        for (k, s) in sxy.iter().enumerate() {
            let (ux, uy) = (xs.mu[c][k], ys.mu[c][k]);
            let vx = cov_norm * (xs.ex2[c][k] - ux * ux);
            let vy = cov_norm * (ys.ex2[c][k] - uy * uy);
            let vxy = cov_norm * (s / n - ux * uy);
            acc += ((2.0 * ux * uy + c1) * (2.0 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / sxy.len() as f64;
    }
    total / shape.channels as f64
}

/// Mean SSIM over valid 7×7 uniform windows, `k1 = 0.01`, `k2 = 0.03`,
/// data range 1, averaged over channels.
pub fn ssim(x: &[f32], y: &[f32], shape: ImageShape) -> Result<f64> {
    check_ssim_shape(shape)?;
    if x.len() != shape.len() || y.len() != shape.len() {
        return Err(Error::DimensionMismatch("image length does not match shape".into()));
    }
    Ok(ssim_with(&SsimStats::new(x, shape), &SsimStats::new(y, shape), x, y, shape))
}

pub fn sample_distance(x: &[f32], y: &[f32], shape: ImageShape, kind: SampleDistanceKind) -> Result<f64> {
    if x.len() != y.len() || x.len() != shape.len() {
        return Err(Error::DimensionMismatch(format!(
            "images of {} and {} values for shape {:?}",
            x.len(),
            y.len(),
            shape
        )));
    }
    Ok(match kind {
        SampleDistanceKind::Mse => mse(x, y),
        SampleDistanceKind::Psnr => psnr_from_mse(mse(x, y)),
        SampleDistanceKind::Ssim => ssim(x, y, shape)?,
    })
}

/// Nearest-match summary of a reconstruction against its target set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleLevelReport {
    pub kind: SampleDistanceKind,
    pub s_dis: f64,
    pub coverage: f64,
    /// `mapping[i]` = index in the target set matched by reconstruction `i`.
    pub mapping: Vec<usize>,
    pub scores: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchOptions {
    /// Match against every target sample instead of the same class only.
    #[serde(default)]
    pub class_agnostic: bool,
}

/// S-Dis and coverage: each reconstruction is matched to its best target
/// sample (same class by default, lowest index on ties).
pub fn s_dis_and_coverage(
    rec: &LabeledDataset,
    tar: &LabeledDataset,
    kind: SampleDistanceKind,
    opts: MatchOptions,
) -> Result<SampleLevelReport> {
    if rec.shape() != tar.shape() {
        return Err(Error::DimensionMismatch(format!(
            "reconstruction shape {:?} vs target shape {:?}",
            rec.shape(),
            tar.shape()
        )));
    }
    if rec.is_empty() || tar.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let shape = tar.shape();
    if kind == SampleDistanceKind::Ssim {
        check_ssim_shape(shape)?;
    }
    let classes = rec.class_count().max(tar.class_count());
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    if !opts.class_agnostic {
        for (j, &l) in tar.labels().iter().enumerate() {
            by_class[l].push(j);
        }
    }
    let all: Vec<usize> = (0..tar.len()).collect();
    let (tar_stats, rec_stats): (Vec<SsimStats>, Vec<SsimStats>) = if kind == SampleDistanceKind::Ssim {
        (
            (0..tar.len()).map(|j| SsimStats::new(tar.image(j), shape)).collect(),
            (0..rec.len()).map(|i| SsimStats::new(rec.image(i), shape)).collect(),
        )
    } else {
        (Vec::new(), Vec::new())
    };
    let mut mapping = Vec::with_capacity(rec.len());
    let mut scores = Vec::with_capacity(rec.len());
    for i in 0..rec.len() {
        let cands = if opts.class_agnostic { &all } else { &by_class[rec.label(i)] };
        let x = rec.image(i);
        let mut best: Option<(usize, f64)> = None;
        for &j in cands {
            let y = tar.image(j);
            let s = match kind {
                SampleDistanceKind::Mse => mse(x, y),
                SampleDistanceKind::Psnr => psnr_from_mse(mse(x, y)),
                SampleDistanceKind::Ssim => ssim_with(&rec_stats[i], &tar_stats[j], x, y, shape),
            };
            if best.is_none_or(|(_, b)| kind.better(s, b)) {
                best = Some((j, s));
            }
        }
        let (j, s) = best.ok_or(Error::UnmatchedClass(rec.label(i)))?;
        mapping.push(j);
        scores.push(s);
    }
    let s_dis = scores.iter().sum::<f64>() / scores.len() as f64;
    let distinct: BTreeSet<usize> = mapping.iter().copied().collect();
    Ok(SampleLevelReport {
        kind,
        s_dis,
        coverage: distinct.len() as f64 / tar.len() as f64,
        mapping,
        scores,
    })
}
