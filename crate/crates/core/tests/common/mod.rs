#![allow(dead_code)]

use proptest::prelude::*;
use reconbench::data::{ImageShape, LabeledDataset};
use reconbench::metrics::{sample_distance, SampleDistanceKind};

/// 7×7 is the smallest shape SSIM accepts.
pub const SHAPE: ImageShape = ImageShape {
    height: 7,
    width: 7,
    channels: 1,
};

pub fn dataset(images: &[(Vec<f32>, usize)], classes: usize) -> LabeledDataset {
    let mut ds = LabeledDataset::empty(SHAPE, classes);
    for (im, l) in images {
        ds.push(im, *l);
    }
    ds
}

/// Pixels on a coarse grid so exact ties between candidates happen often.
fn image() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec((0u8..=4).prop_map(|v| v as f32 / 4.0), SHAPE.len())
}

/// A (rec, tar) pair of up to `max` images each, where every rec label
/// occurs among the targets.
pub fn pair(max: usize) -> impl Strategy<Value = (LabeledDataset, LabeledDataset)> {
    (1usize..=3).prop_flat_map(move |classes| {
        let tar = prop::collection::vec((image(), 0..classes), 1..=max);
        let rec = prop::collection::vec((image(), any::<prop::sample::Index>()), 1..=max);
        (tar, rec).prop_map(move |(tar, rec)| {
            let present: Vec<usize> = {
                let mut v: Vec<usize> = tar.iter().map(|t| t.1).collect();
                v.sort_unstable();
                v.dedup();
                v
            };
            let rec: Vec<(Vec<f32>, usize)> = rec.into_iter().map(|(im, ix)| (im, *ix.get(&present))).collect();
            (dataset(&rec, classes), dataset(&tar, classes))
        })
    })
}

/// Brute-force matching: every rec sample against every target, keeping
/// same-class targets only and the first of equally good ones.
pub fn oracle(rec: &LabeledDataset, tar: &LabeledDataset, kind: SampleDistanceKind) -> (f64, f64, Vec<usize>) {
    let higher = matches!(kind, SampleDistanceKind::Ssim | SampleDistanceKind::Psnr);
    let mut mapping = Vec::new();
    let mut total = 0.0;
    for i in 0..rec.len() {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..tar.len() {
            if tar.label(j) != rec.label(i) {
                continue;
            }
            let d = sample_distance(rec.image(i), tar.image(j), SHAPE, kind).unwrap();
            let improves = match best {
                None => true,
                Some((_, b)) => {
                    if higher {
                        d > b
                    } else {
                        d < b
                    }
                }
            };
            if improves {
                best = Some((j, d));
            }
        }
        let (j, d) = best.expect("rec label present in tar");
        mapping.push(j);
        total += d;
    }
    let mut distinct = mapping.clone();
    distinct.sort_unstable();
    distinct.dedup();
    (total / rec.len() as f64, distinct.len() as f64 / tar.len() as f64, mapping)
}

pub mod judge {
    use std::collections::VecDeque;
    use std::sync::Mutex;

    use reconbench::data::ImageShape;
    use reconbench::error::{Error, Result};
    use reconbench::judge::{JudgeClient, JudgeTask};

    pub const JUDGE_SHAPE: ImageShape = ImageShape {
        height: 4,
        width: 4,
        channels: 1,
    };

    /// Candidate image of condition `c`: a flat grey that survives 8-bit
    /// PNG encoding.
    pub fn flat(c: usize) -> Vec<f32> {
        vec![(c + 1) as f32 / 16.0; JUDGE_SHAPE.len()]
    }

    pub fn task(id: &str, conditions: usize, repeats: usize) -> JudgeTask {
        JudgeTask::new(id, vec![0.0; JUDGE_SHAPE.len()], (0..conditions).map(flat).collect(), JUDGE_SHAPE)
            .unwrap()
            .with_repeats(repeats)
    }

    /// Replays votes for conditions (not positions): recognizes each
    /// condition's image wherever it is shown and answers its position.
    /// `None` replies with an unparseable sentence.
    pub struct ConditionVoter {
        votes: Mutex<VecDeque<Option<usize>>>,
    }

    impl ConditionVoter {
        pub fn new(votes: impl IntoIterator<Item = Option<usize>>) -> Self {
            Self {
                votes: Mutex::new(votes.into_iter().collect()),
            }
        }
    }

    impl JudgeClient for ConditionVoter {
        fn complete(&self, _prompt: &str, images: &[Vec<u8>]) -> Result<String> {
            let vote = self
                .votes
                .lock()
                .unwrap()
                .pop_front()
                .ok_or_else(|| Error::Transport("script exhausted".into()))?;
            let Some(c) = vote else {
                return Ok("the third one, probably".into());
            };
            let shown: Vec<usize> = images[1..]
                .iter()
                .map(|png| {
                    let p = image::load_from_memory(png).unwrap().into_luma8().get_pixel(0, 0).0[0];
                    (p as f32 / 255.0 * 16.0).round() as usize - 1
                })
                .collect();
            let pos = shown.iter().position(|&s| s == c).expect("condition shown");
            Ok((pos + 2).to_string())
        }
    }
}
