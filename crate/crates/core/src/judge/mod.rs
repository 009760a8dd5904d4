//! Comparative vision-LLM judging: for each target image the judge is
//! asked which of several candidate reconstructions (one per experimental
//! condition) is closest, several times, and the votes are tallied.

mod client;

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use client::{FixedClient, HttpJudgeClient, JudgeClient, NearestClient, ScriptedClient};

use crate::attacks::stream_rng;
use crate::data::{encode_png, ImageShape};
use crate::error::{Error, Result};
use crate::metrics::{mse, psnr_from_mse};

pub const MIN_CANDIDATES: usize = 2;
pub const MAX_CANDIDATES: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct JudgeTask {
    pub id: String,
    pub target: Vec<f32>,
    /// One image per condition, in condition order.
    pub candidates: Vec<Vec<f32>>,
    pub shape: ImageShape,
    pub repeats: usize,
}

impl JudgeTask {
    pub fn new(id: impl Into<String>, target: Vec<f32>, candidates: Vec<Vec<f32>>, shape: ImageShape) -> Result<Self> {
        let t = Self {
            id: id.into(),
            target,
            candidates,
            shape,
            repeats: 5,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn with_repeats(mut self, repeats: usize) -> Self {
        self.repeats = repeats;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.candidates.len();
        if !(MIN_CANDIDATES..=MAX_CANDIDATES).contains(&n) {
            return Err(Error::Invalid(format!(
                "a judge task needs {MIN_CANDIDATES}..={MAX_CANDIDATES} candidates, got {n}"
            )));
        }
        let len = self.shape.len();
        if self.target.len() != len || self.candidates.iter().any(|c| c.len() != len) {
            return Err(Error::DimensionMismatch("judge images must share one shape".into()));
        }
        Ok(())
    }
}

fn ordinal(position: usize) -> &'static str {
    const WORDS: [&str; 10] = ["", "first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth"];
    WORDS[position]
}

/// Prompt for `n` candidates shown after the target.
pub fn prompt_text(n: usize) -> String {
    format!(
        "From the second to the {} image, which image is more similar to the first one? \
         Please make sure your response must be the index of that image and don't say any other words.",
        ordinal(n + 1)
    )
}

/// Text and images (target first, then candidates in task order).
pub fn build_prompt(task: &JudgeTask) -> Result<(String, Vec<&[f32]>)> {
    task.validate()?;
    let mut images = vec![&task.target[..]];
    images.extend(task.candidates.iter().map(|c| &c[..]));
    Ok((prompt_text(task.candidates.len()), images))
}

/// Strict parse of a reply: a bare 1-based image index naming one of the
/// `n` candidates (2..=n+1), returned as a 0-based candidate position.
pub fn parse_response(text: &str, n: usize) -> Option<usize> {
    let t = text.trim();
    if t.is_empty() || !t.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let v: usize = t.parse().ok()?;
    (2..=n + 1).contains(&v).then(|| v - 2)
}

/// One raw judge reply, persisted so tallies can be replayed offline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub task_id: String,
    pub repeat: usize,
    pub prompt_hash: String,
    pub response_text: String,
    /// Chosen condition after undoing the presentation order; `null` for
    /// replies that did not parse.
    pub parsed_index: Option<usize>,
    /// `permutation[j]` is the condition shown at candidate position `j`.
    pub permutation: Vec<usize>,
    pub conditions: usize,
    pub image_hashes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryOptions {
    pub seed: u64,
    /// Present candidates in a fresh random order on every repeat.
    pub shuffle: bool,
    /// Extra attempts after a transport failure.
    pub max_retries: usize,
}

impl Default for QueryOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            shuffle: true,
            max_retries: 2,
        }
    }
}

fn presentation(task: &JudgeTask, repeat: usize, opts: &QueryOptions) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..task.candidates.len()).collect();
    if opts.shuffle {
        let tag = format!("judge:{}", task.id);
        perm.shuffle(&mut stream_rng(opts.seed, &tag, repeat as u64));
    }
    perm
}

fn prompt_hash(text: &str, image_hashes: &[String]) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    for ih in image_hashes {
        h.update(ih.as_bytes());
    }
    hex::encode(&h.finalize()[..16])
}

/// Asks the judge `task.repeats` times. Transport failures are retried
/// `max_retries` times, then fail the whole task.
pub fn query_judge(task: &JudgeTask, client: &dyn JudgeClient, opts: &QueryOptions) -> Result<Vec<ResponseRecord>> {
    task.validate()?;
    let n = task.candidates.len();
    let text = prompt_text(n);
    let target_png = encode_png(&task.target, task.shape)?;
    let cand_png: Vec<Vec<u8>> = task.candidates.iter().map(|c| encode_png(c, task.shape)).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(task.repeats);
    for repeat in 0..task.repeats {
        let perm = presentation(task, repeat, opts);
        let mut images = vec![target_png.clone()];
        images.extend(perm.iter().map(|&c| cand_png[c].clone()));
        let image_hashes: Vec<String> = images.iter().map(|b| hex::encode(&Sha256::digest(b)[..16])).collect();
        let mut attempt = 0;
        let reply = loop {
            match client.complete(&text, &images) {
                Ok(r) => break r,
                Err(e) if attempt < opts.max_retries => {
                    log::warn!("judge task {} repeat {repeat}: {e}; retrying", task.id);
                    attempt += 1;
                }
                Err(e) => {
                    return Err(Error::Transport(format!(
                        "task {} repeat {repeat} failed after {} attempts: {e}",
                        task.id,
                        attempt + 1
                    )))
                }
            }
        };
        out.push(ResponseRecord {
            task_id: task.id.clone(),
            repeat,
            prompt_hash: prompt_hash(&text, &image_hashes),
            parsed_index: parse_response(&reply, n).map(|j| perm[j]),
            response_text: reply,
            permutation: perm,
            conditions: n,
            image_hashes,
        });
    }
    Ok(out)
}

/// Outcome of judging many tasks; failed tasks are listed and left out of
/// `records`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct JudgeRun {
    pub records: Vec<ResponseRecord>,
    pub failed_tasks: Vec<String>,
}

pub fn run_judge(tasks: &[JudgeTask], client: &dyn JudgeClient, opts: &QueryOptions) -> Result<JudgeRun> {
    let mut run = JudgeRun::default();
    for t in tasks {
        match query_judge(t, client, opts) {
            Ok(r) => run.records.extend(r),
            Err(Error::Transport(msg)) => {
                log::warn!("{msg}");
                run.failed_tasks.push(t.id.clone());
            }
            Err(e) => return Err(e),
        }
    }
    Ok(run)
}

/// Votes of one completed task: condition indices, `None` for invalid
/// replies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskVotes {
    pub conditions: usize,
    pub votes: Vec<Option<usize>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionTally {
    /// Tasks where this condition has a strict plurality of valid votes.
    pub major_wins: usize,
    /// Tasks where every valid vote chose this condition.
    pub unanimous_wins: usize,
    pub selection_count: usize,
    /// `selection_count` over all valid votes.
    pub pred_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeTally {
    pub conditions: Vec<ConditionTally>,
    pub tasks: usize,
    pub valid_votes: usize,
    pub invalid_votes: usize,
}

/// Folds per-task votes into per-condition counts. Ties for the most
/// votes award no majority.
pub fn aggregate(tasks: &[TaskVotes]) -> Result<JudgeTally> {
    let Some(first) = tasks.first() else {
        return Err(Error::Invalid("no completed judge tasks to aggregate".into()));
    };
    let n = first.conditions;
    if tasks.iter().any(|t| t.conditions != n) {
        return Err(Error::Invalid("judge tasks disagree on the number of conditions".into()));
    }
    let mut conds = vec![ConditionTally::default(); n];
    let (mut valid, mut invalid) = (0, 0);
    for t in tasks {
        let mut counts = vec![0usize; n];
        for v in &t.votes {
            match v {
                Some(c) if *c < n => counts[*c] += 1,
                Some(c) => return Err(Error::Invalid(format!("vote for condition {c} of {n}"))),
                None => invalid += 1,
            }
        }
        let task_valid: usize = counts.iter().sum();
        valid += task_valid;
        for (c, &k) in counts.iter().enumerate() {
            conds[c].selection_count += k;
        }
        let top = counts.iter().copied().max().unwrap_or(0);
        if top > 0 && counts.iter().filter(|&&k| k == top).count() == 1 {
            let winner = counts.iter().position(|&k| k == top).expect("max exists");
            conds[winner].major_wins += 1;
            if top == task_valid {
                conds[winner].unanimous_wins += 1;
            }
        }
    }
    for c in &mut conds {
        c.pred_rate = if valid == 0 { 0.0 } else { c.selection_count as f64 / valid as f64 };
    }
    Ok(JudgeTally {
        conditions: conds,
        tasks: tasks.len(),
        valid_votes: valid,
        invalid_votes: invalid,
    })
}

/// Re-derives the tally from persisted replies.
pub fn aggregate_records(records: &[ResponseRecord]) -> Result<JudgeTally> {
    let mut by_task: BTreeMap<&str, TaskVotes> = BTreeMap::new();
    for r in records {
        by_task
            .entry(&r.task_id)
            .or_insert_with(|| TaskVotes {
                conditions: r.conditions,
                votes: Vec::new(),
            })
            .votes
            .push(r.parsed_index);
    }
    aggregate(&by_task.into_values().collect::<Vec<_>>())
}

pub fn append_log(path: &Path, records: &[ResponseRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .and_then(|mut f| f.write_all(buf.as_bytes()))
        .map_err(Error::io(path))
}

pub fn read_log(path: &Path) -> Result<Vec<ResponseRecord>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Index of the reconstruction with the highest PSNR to `target`; ties go
/// to the earlier one.
pub fn best_psnr(target: &[f32], reconstructions: &[&[f32]]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in reconstructions.iter().enumerate() {
        let p = psnr_from_mse(mse(target, r));
        if best.is_none_or(|(_, b)| p > b) {
            best = Some((i, p));
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> ImageShape {
        ImageShape::new(2, 2, 1)
    }

    fn task(n: usize) -> JudgeTask {
        let cands = (0..n).map(|i| vec![i as f32 / 10.0; 4]).collect();
        JudgeTask::new("t", vec![0.0; 4], cands, shape()).unwrap()
    }

    fn votes(v: &[Option<usize>], n: usize) -> TaskVotes {
        TaskVotes {
            conditions: n,
            votes: v.to_vec(),
        }
    }

    #[test]
    fn prompt_range_follows_candidate_count() {
        assert_eq!(
            prompt_text(6),
            "From the second to the seventh image, which image is more similar to the first one? \
             Please make sure your response must be the index of that image and don't say any other words."
        );
        assert!(prompt_text(2).starts_with("From the second to the third image,"));
        assert!(prompt_text(8).starts_with("From the second to the ninth image,"));
        let t = task(3);
        let (_, images) = build_prompt(&t).unwrap();
        assert_eq!(images.len(), 4);
        assert_eq!(images[1], &t.candidates[0][..]);
    }

    #[test]
    fn task_bounds() {
        assert!(JudgeTask::new("a", vec![0.0; 4], vec![vec![0.0; 4]], shape()).is_err());
        assert!(JudgeTask::new("a", vec![0.0; 4], vec![vec![0.0; 4]; 9], shape()).is_err());
        assert!(JudgeTask::new("a", vec![0.0; 4], vec![vec![0.0; 4], vec![0.0; 3]], shape()).is_err());
    }

    #[test]
    fn strict_parse() {
        assert_eq!(parse_response("3", 6), Some(1));
        assert_eq!(parse_response(" 7\n", 6), Some(5));
        assert_eq!(parse_response("image 3 looks best", 6), None);
        assert_eq!(parse_response("3.", 6), None);
        assert_eq!(parse_response("1", 6), None);
        assert_eq!(parse_response("8", 6), None);
        assert_eq!(parse_response("", 6), None);
        assert_eq!(parse_response("-3", 6), None);
    }

    #[test]
    fn fixed_reply_maps_through_the_target_slot() {
        let t = task(6);
        let opts = QueryOptions {
            shuffle: false,
            ..QueryOptions::default()
        };
        let r = query_judge(&t, &FixedClient("3".into()), &opts).unwrap();
        let got: Vec<_> = r.iter().map(|x| x.parsed_index).collect();
        assert_eq!(got, vec![Some(1); 5]);
    }

    #[test]
    fn unanimous_task() {
        let t = aggregate(&[votes(&[Some(0); 5], 3)]).unwrap();
        assert_eq!((t.conditions[0].major_wins, t.conditions[0].unanimous_wins), (1, 1));
        assert_eq!(t.conditions[0].pred_rate, 1.0);
    }

    #[test]
    fn two_way_tie_awards_no_majority() {
        let t = aggregate(&[votes(&[Some(0), Some(0), Some(1), Some(1), Some(2)], 3)]).unwrap();
        assert!(t.conditions.iter().all(|c| c.major_wins == 0 && c.unanimous_wins == 0));
        let rates: Vec<f64> = t.conditions.iter().map(|c| c.pred_rate).collect();
        assert_eq!(rates, vec![0.4, 0.4, 0.2]);
    }

    #[test]
    fn invalid_votes_are_excluded() {
        let t = aggregate(&[votes(&[Some(1), None, Some(1), None, None], 2)]).unwrap();
        assert_eq!(t.valid_votes, 2);
        assert_eq!(t.invalid_votes, 3);
        assert_eq!(t.conditions[1].unanimous_wins, 1);
        assert_eq!(t.conditions[1].pred_rate, 1.0);
    }

    #[test]
    fn empty_aggregate_is_an_error() {
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn transport_failures_fail_the_task_only() {
        let ok = task(2);
        let mut bad = task(2);
        bad.id = "bad".into();
        // first task consumes five replies, the second finds the script empty
        let client = ScriptedClient::new(vec!["2".to_string(); 5]);
        let run = run_judge(&[ok, bad], &client, &QueryOptions::default()).unwrap();
        assert_eq!(run.records.len(), 5);
        assert_eq!(run.failed_tasks, vec!["bad".to_string()]);
    }

    #[test]
    fn log_replays_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("judge.jsonl");
        let t = task(4);
        let r = query_judge(&t, &NearestClient, &QueryOptions::default()).unwrap();
        append_log(&path, &r).unwrap();
        let back = read_log(&path).unwrap();
        assert_eq!(back, r);
        assert_eq!(aggregate_records(&back).unwrap(), aggregate_records(&r).unwrap());
        // the nearest candidate is condition 0 whatever the presentation order
        assert!(r.iter().all(|x| x.parsed_index == Some(0)));
    }

    #[test]
    fn psnr_preselection() {
        let t = [0.5f32; 4];
        let a = [0.0f32; 4];
        let b = [0.4f32; 4];
        assert_eq!(best_psnr(&t, &[&a, &b, &b]), Some(1));
        assert_eq!(best_psnr(&t, &[]), None);
    }
}
