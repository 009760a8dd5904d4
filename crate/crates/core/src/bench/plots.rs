use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use plotters::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{load_cell, read_ledger, LedgerEntry};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics::SampleDistanceKind;

/// Pearson correlation; `None` when either column is constant or shorter
/// than two.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    if n < 2 || b.len() != n {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// `|r|` for every pair of columns.
pub fn correlation_matrix(columns: &[Vec<f64>]) -> Vec<Vec<Option<f64>>> {
    columns
        .iter()
        .map(|a| columns.iter().map(|b| pearson(a, b).map(f64::abs)).collect())
        .collect()
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Invalid(format!("plotting: {e}"))
}

fn metric_columns(entries: &[LedgerEntry]) -> Vec<(String, Vec<f64>)> {
    let mut cols = vec![("FID".to_string(), entries.iter().map(|e| e.metrics.d_dis).collect())];
    for k in SampleDistanceKind::ALL {
        if entries.iter().all(|e| e.metrics.get(k).is_some()) {
            cols.push((k.name().to_string(), entries.iter().map(|e| e.metrics.get(k).expect("checked").s_dis).collect()));
        }
    }
    for k in SampleDistanceKind::ALL {
        if entries.iter().all(|e| e.metrics.get(k).is_some()) {
            cols.push((
                format!("{} cov", k.name()),
                entries.iter().map(|e| e.metrics.get(k).expect("checked").coverage).collect(),
            ));
        }
    }
    cols
}

fn range(v: &[f64]) -> std::ops::Range<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad)..(hi + pad)
}

fn scatter(path: &Path, title: &str, xs: &[f64], ys: &[f64], xl: &str, yl: &str) -> Result<()> {
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(range(xs), range(ys))
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(xl).y_desc(yl).draw().map_err(plot_err)?;
    chart
        .draw_series(xs.iter().zip(ys).map(|(&x, &y)| Circle::new((x, y), 4, BLUE.filled())))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn heatmap(path: &Path, names: &[String], m: &[Vec<Option<f64>>]) -> Result<()> {
    let n = names.len();
    let cell = 70;
    let margin = 90;
    let side = (margin + n * cell + 10) as u32;
    let root = SVGBackend::new(path, (side, side)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let font = ("sans-serif", 13).into_font();
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let (x0, y0) = ((margin + j * cell) as i32, (margin + i * cell) as i32);
            let (fill, label) = match v {
                Some(r) => (RGBColor(255, (255.0 * (1.0 - r)) as u8, (255.0 * (1.0 - r)) as u8), format!("{r:.2}")),
                // undefined: constant column
                None => (RGBColor(200, 200, 200), "n/a".to_string()),
            };
            root.draw(&Rectangle::new([(x0, y0), (x0 + cell as i32, y0 + cell as i32)], fill.filled()))
                .map_err(plot_err)?;
            root.draw(&Text::new(label, (x0 + 18, y0 + cell as i32 / 2 - 6), font.clone()))
                .map_err(plot_err)?;
        }
    }
    for (i, name) in names.iter().enumerate() {
        let p = (margin + i * cell) as i32;
        root.draw(&Text::new(name.clone(), (p + 4, margin as i32 - 20), font.clone())).map_err(plot_err)?;
        root.draw(&Text::new(name.clone(), (4, p + cell as i32 / 2 - 6), font.clone())).map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

fn coverage_plot(path: &Path, entries: &[LedgerEntry]) -> Result<()> {
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for e in entries {
        if let Some(s) = e.metrics.get(SampleDistanceKind::Mse) {
            series.entry(e.label()).or_default().push((e.size as f64, s.coverage));
        }
    }
    let xs: Vec<f64> = series.values().flatten().map(|p| p.0).collect();
    if xs.is_empty() {
        return Err(Error::Invalid("no MSE coverage to plot".into()));
    }
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("coverage (MSE matching) vs target size", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(range(&xs), 0.0..1.05)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("target size").y_desc("coverage").draw().map_err(plot_err)?;
    for (i, (label, mut pts)) in series.into_iter().enumerate() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// 2-D exact t-SNE of the rows of `points` from a seeded initialization.
pub fn tsne_embedding(points: &[Vec<f32>], seed: u64) -> Result<Vec<[f32; 2]>> {
    let n = points.len();
    if n < 4 {
        return Err(Error::InsufficientSamples { needed: 4, got: n });
    }
    let perplexity = ((n - 1) as f32 / 3.0 - 1.0).clamp(1.0, 20.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 1e-4).expect("valid sigma");
    let init: Vec<f32> = (0..2 * n).map(|_| normal.sample(&mut rng)).collect();
    let rows: Vec<&[f32]> = points.iter().map(Vec::as_slice).collect();
    let mut t: bhtsne::tSNE<f32, &[f32], 2> = bhtsne::tSNE::new(&rows);
    t.perplexity(perplexity).epochs(500).initial_embedding(init).exact(|a, b| {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f32>()
    });
    Ok(t.embedding().chunks(2).map(|c| [c[0], c[1]]).collect())
}

fn tsne_plot(path: &Path, rec: &LabeledDataset, tar: &LabeledDataset, cap: usize, seed: u64) -> Result<()> {
    let take = |d: &LabeledDataset| (0..d.len().min(cap)).map(|i| d.image(i).to_vec()).collect::<Vec<_>>();
    let (r, t) = (take(rec), take(tar));
    let mut all = r.clone();
    all.extend(t.iter().cloned());
    let emb = tsne_embedding(&all, seed)?;
    let xs: Vec<f64> = emb.iter().map(|p| p[0] as f64).collect();
    let ys: Vec<f64> = emb.iter().map(|p| p[1] as f64).collect();
    let root = SVGBackend::new(path, (640, 520)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("t-SNE: reconstructions (red) vs targets (blue)", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(range(&xs), range(&ys))
        .map_err(plot_err)?;
    chart.configure_mesh().draw().map_err(plot_err)?;
    let nr = r.len();
    chart
        .draw_series((nr..emb.len()).map(|i| Circle::new((xs[i], ys[i]), 3, BLUE.mix(0.6).filled())))
        .map_err(plot_err)?;
    chart
        .draw_series((0..nr).map(|i| Cross::new((xs[i], ys[i]), 4, RED.stroke_width(2))))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Tiles every image of `ds` into one grayscale PNG (channel mean for
/// colour images), one-pixel gaps.
pub fn image_grid(ds: &LabeledDataset) -> Result<GrayImage> {
    if ds.is_empty() {
        return Err(Error::Invalid("cannot draw an empty grid".into()));
    }
    let s = ds.shape();
    let cols = (ds.len() as f64).sqrt().ceil() as usize;
    let rows = ds.len().div_ceil(cols);
    let (w, h) = ((cols * (s.width + 1)) as u32, (rows * (s.height + 1)) as u32);
    let mut img = GrayImage::from_pixel(w, h, Luma([255]));
    for i in 0..ds.len() {
        let (ox, oy) = ((i % cols) * (s.width + 1), (i / cols) * (s.height + 1));
        let px = ds.image(i);
        for y in 0..s.height {
            for x in 0..s.width {
                let base = (y * s.width + x) * s.channels;
                let v = px[base..base + s.channels].iter().sum::<f32>() / s.channels as f32;
                img.put_pixel((ox + x) as u32, (oy + y) as u32, Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8]));
            }
        }
    }
    Ok(img)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotFiles {
    pub files: Vec<PathBuf>,
    /// Correlation cells that were undefined (constant columns).
    pub undefined_correlations: Vec<(String, String)>,
}

/// Scatter of FID against each sample metric, the |correlation| heatmap, a
/// coverage plot, and per-cell t-SNE overlays and image grids.
pub fn emit_plots(ledger: &Path, out: &Path) -> Result<PlotFiles> {
    let entries = read_ledger(ledger)?;
    if entries.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: entries.len(),
        });
    }
    fs::create_dir_all(out).map_err(Error::io(out))?;
    let mut files = PlotFiles::default();
    let cols = metric_columns(&entries);
    for (name, ys) in cols.iter().skip(1).filter(|(n, _)| !n.ends_with("cov")) {
        let p = out.join(format!("scatter_fid_{}.svg", name.to_lowercase()));
        scatter(&p, &format!("FID vs {name}"), &cols[0].1, ys, "FID", name)?;
        files.files.push(p);
    }
    let names: Vec<String> = cols.iter().map(|c| c.0.clone()).collect();
    let m = correlation_matrix(&cols.iter().map(|c| c.1.clone()).collect::<Vec<_>>());
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if v.is_none() && i < j {
                files.undefined_correlations.push((names[i].clone(), names[j].clone()));
            }
        }
    }
    let p = out.join("correlation_heatmap.svg");
    heatmap(&p, &names, &m)?;
    files.files.push(p);
    let p = out.join("coverage.svg");
    coverage_plot(&p, &entries)?;
    files.files.push(p);
    for e in &entries {
        let stem = format!("{}-{}-{}", e.key.plan_hash, e.key.attack_id, e.key.seed);
        let (result, tar) = match load_cell(e) {
            Ok(x) => x,
            Err(err) => {
                log::warn!("skipping per-cell plots for {stem}: {err}");
                continue;
            }
        };
        let p = out.join(format!("grid_{stem}.png"));
        image_grid(&result.data)?
            .save(&p)
            .map_err(|err| Error::Invalid(format!("writing {}: {err}", p.display())))?;
        files.files.push(p);
        if result.data.len() + tar.len().min(200) >= 4 {
            let p = out.join(format!("tsne_{stem}.svg"));
            tsne_plot(&p, &result.data, &tar, 200, e.key.seed)?;
            files.files.push(p);
        }
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_columns_correlate_perfectly() {
        let a = vec![1.0, 2.0, 4.0, 3.0];
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        let m = correlation_matrix(&[a, neg]);
        assert!((m[0][1].unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_column_is_undefined() {
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), None);
        assert_eq!(pearson(&[1.0], &[1.0]), None);
    }

    #[test]
    fn grid_holds_every_thumbnail() {
        let mut ds = LabeledDataset::empty(crate::data::ImageShape::new(3, 3, 1), 1);
        for _ in 0..10 {
            ds.push(&[0.0; 9], 0);
        }
        let g = image_grid(&ds).unwrap();
        // 4 columns × 3 rows of 3×3 tiles, 1-pixel gaps; dark pixels = tiles
        assert_eq!((g.width(), g.height()), (16, 12));
        assert_eq!(g.pixels().filter(|p| p.0[0] == 0).count(), 10 * 9);
    }

    #[test]
    fn tsne_is_seeded() {
        let pts: Vec<Vec<f32>> = (0..12).map(|i| vec![i as f32, (i % 3) as f32]).collect();
        assert_eq!(tsne_embedding(&pts, 3).unwrap(), tsne_embedding(&pts, 3).unwrap());
    }
}
