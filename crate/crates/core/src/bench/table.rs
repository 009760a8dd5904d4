use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use super::{read_ledger, LedgerEntry};
use crate::error::{Error, Result};
use crate::metrics::SampleDistanceKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "md" | "markdown" => Ok(Self::Markdown),
            other => Err(Error::Invalid(format!("unknown table format `{other}`"))),
        }
    }
}

const MISSING: &str = "—";

/// `score (coverage%)`, coverage given as a fraction.
pub fn format_cell(score: f64, coverage: f64) -> String {
    format!("{score:.3} ({:.2}%)", coverage * 100.0)
}

const METRIC_ROWS: [(&str, Option<SampleDistanceKind>); 4] = [
    ("FID", None),
    ("SSIM", Some(SampleDistanceKind::Ssim)),
    ("PSNR", Some(SampleDistanceKind::Psnr)),
    ("MSE", Some(SampleDistanceKind::Mse)),
];

fn cell(e: Option<&LedgerEntry>, kind: Option<SampleDistanceKind>) -> String {
    let Some(e) = e else { return MISSING.into() };
    match kind {
        None => format!("{:.3}", e.metrics.d_dis),
        Some(k) => e
            .metrics
            .get(k)
            .map(|s| format_cell(s.s_dis, s.coverage))
            .unwrap_or_else(|| MISSING.into()),
    }
}

/// Header and rows: one row per (attack, metric), one column per target
/// size. When several entries share a row and size the latest one wins.
fn grid(entries: &[LedgerEntry]) -> (Vec<String>, Vec<Vec<String>>) {
    let sizes: BTreeSet<usize> = entries.iter().map(|e| e.size).collect();
    let mut by_label: BTreeMap<String, BTreeMap<usize, &LedgerEntry>> = BTreeMap::new();
    let mut order = Vec::new();
    for e in entries {
        let label = e.label();
        if !by_label.contains_key(&label) {
            order.push(label.clone());
        }
        by_label.entry(label).or_default().insert(e.size, e);
    }
    let mut header = vec!["attack".to_string(), "metric".to_string()];
    header.extend(sizes.iter().map(|s| s.to_string()));
    let mut rows = Vec::new();
    for label in order {
        let cells = &by_label[&label];
        for (name, kind) in METRIC_ROWS {
            let mut row = vec![label.clone(), name.to_string()];
            row.extend(sizes.iter().map(|s| cell(cells.get(s).copied(), kind)));
            rows.push(row);
        }
    }
    (header, rows)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Pure rendering of ledger entries.
pub fn render_table(entries: &[LedgerEntry], format: TableFormat) -> Result<String> {
    if entries.is_empty() {
        return Err(Error::Invalid("the results ledger is empty".into()));
    }
    let (header, rows) = grid(entries);
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            for r in std::iter::once(&header).chain(&rows) {
                out.push_str(&r.iter().map(|c| csv_field(c)).collect::<Vec<_>>().join(","));
                out.push('\n');
            }
        }
        TableFormat::Markdown => {
            out.push_str(&format!("| {} |\n", header.join(" | ")));
            out.push_str(&format!("|{}\n", " --- |".repeat(header.len())));
            for r in &rows {
                out.push_str(&format!("| {} |\n", r.join(" | ")));
            }
        }
    }
    Ok(out)
}

/// Renders the ledger at `ledger` into `out`.
pub fn emit_table(ledger: &Path, format: TableFormat, out: &Path) -> Result<()> {
    let text = render_table(&read_ledger(ledger)?, format)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::write(out, text).map_err(Error::io(out))
}
