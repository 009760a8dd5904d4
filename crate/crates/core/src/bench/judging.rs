use super::{load_cell, JudgeSettings, LedgerEntry};
use crate::error::{Error, Result};
use crate::judge::{best_psnr, JudgeTask};

/// Largest target size that every condition has a ledger entry for.
pub fn common_size(entries: &[LedgerEntry], conditions: &[String]) -> Option<usize> {
    let sizes = |c: &String| -> Vec<usize> { entries.iter().filter(|e| &e.label() == c).map(|e| e.size).collect() };
    let first = sizes(conditions.first()?);
    first
        .into_iter()
        .filter(|s| conditions.iter().all(|c| sizes(c).contains(s)))
        .max()
}

/// One task per target image: for each condition, the reconstruction with
/// the highest PSNR to that target. Conditions are ledger row labels and
/// must share the same target set.
pub fn judge_tasks(
    entries: &[LedgerEntry],
    conditions: &[String],
    size: usize,
    settings: &JudgeSettings,
) -> Result<Vec<JudgeTask>> {
    let mut cells = Vec::with_capacity(conditions.len());
    for c in conditions {
        let e = entries
            .iter()
            .rev()
            .find(|e| &e.label() == c && e.size == size)
            .ok_or_else(|| Error::Invalid(format!("no ledger entry for `{c}` at size {size}")))?;
        cells.push((e.target_hash.clone(), load_cell(e)?));
    }
    if cells.windows(2).any(|w| w[0].0 != w[1].0) {
        return Err(Error::Invalid("judge conditions were run against different targets".into()));
    }
    let tar = &cells[0].1 .1;
    let count = settings.targets.min(tar.len());
    (0..count)
        .map(|t| {
            let target = tar.image(t);
            let candidates = cells
                .iter()
                .map(|(_, (res, _))| {
                    let recs: Vec<&[f32]> = (0..res.data.len()).map(|i| res.data.image(i)).collect();
                    best_psnr(target, &recs)
                        .map(|i| recs[i].to_vec())
                        .ok_or_else(|| Error::Invalid("a condition has no reconstructions".into()))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(JudgeTask::new(format!("{size}-{t}"), target.to_vec(), candidates, tar.shape())?.with_repeats(settings.repeats))
        })
        .collect()
}
