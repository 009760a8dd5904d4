mod common;

use proptest::prelude::*;
use reconbench::judge::{
    aggregate, aggregate_records, append_log, parse_response, read_log, run_judge, JudgeTask, NearestClient,
    QueryOptions, TaskVotes,
};

use common::judge::{flat, task, ConditionVoter, JUDGE_SHAPE};

fn votes() -> impl Strategy<Value = Vec<TaskVotes>> {
    (2usize..=8).prop_flat_map(|n| {
        prop::collection::vec(
            prop::collection::vec(prop::option::weighted(0.85, 0..n), 1..=7)
                .prop_map(move |votes| TaskVotes { conditions: n, votes }),
            1..=12,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn tally_invariants(tasks in votes()) {
        let t = aggregate(&tasks).unwrap();
        let cast: usize = tasks.iter().map(|t| t.votes.len()).sum();
        let selected: usize = t.conditions.iter().map(|c| c.selection_count).sum();
        prop_assert_eq!(selected, t.valid_votes);
        prop_assert_eq!(t.valid_votes + t.invalid_votes, cast);
        prop_assert!(selected <= cast);
        let majors: usize = t.conditions.iter().map(|c| c.major_wins).sum();
        prop_assert!(majors <= t.tasks);
        for c in &t.conditions {
            prop_assert!(c.unanimous_wins <= c.major_wins);
        }
        let rates: f64 = t.conditions.iter().map(|c| c.pred_rate).sum();
        prop_assert!(rates <= 1.0 + 1e-12);
        if t.valid_votes > 0 {
            prop_assert!((rates - 1.0).abs() < 1e-12);
        }
    }

    /// Condition-level votes replayed under any presentation order give
    /// the same tally as aggregating them directly.
    #[test]
    fn tallies_ignore_presentation_order(tasks in votes(), seed in any::<u64>()) {
        let n = tasks[0].conditions;
        let judged: Vec<_> = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| task(&format!("t{i}"), n, t.votes.len()))
            .collect();
        let client = ConditionVoter::new(tasks.iter().flat_map(|t| t.votes.clone()));
        let run = run_judge(&judged, &client, &QueryOptions { seed, ..QueryOptions::default() }).unwrap();
        prop_assert!(run.failed_tasks.is_empty());
        let direct = aggregate(&tasks).unwrap();
        let replayed = aggregate_records(&run.records).unwrap();
        prop_assert_eq!(direct, replayed);
    }

    #[test]
    fn only_bare_indices_parse(n in 2usize..=8, v in 0usize..12) {
        let ok = parse_response(&format!(" {v}\n"), n);
        prop_assert_eq!(ok, (2..=n + 1).contains(&v).then(|| v - 2));
        prop_assert_eq!(parse_response(&format!("image {v}"), n), None);
        prop_assert_eq!(parse_response(&format!("{v}."), n), None);
    }
}

#[test]
fn nearest_judge_is_stable_across_shuffles() {
    // the darkest candidate, condition 4, is closest to the black target
    let t = JudgeTask::new("near", vec![0.0; JUDGE_SHAPE.len()], (0..5).rev().map(flat).collect(), JUDGE_SHAPE)
        .unwrap()
        .with_repeats(5);
    let mut first = None;
    for seed in 0..100 {
        let run = run_judge(std::slice::from_ref(&t), &NearestClient, &QueryOptions { seed, ..QueryOptions::default() }).unwrap();
        let tally = aggregate_records(&run.records).unwrap();
        assert_eq!(tally.conditions[4].unanimous_wins, 1);
        match &first {
            None => first = Some(tally),
            Some(f) => assert_eq!(f, &tally),
        }
    }
}

#[test]
fn persisted_replies_reaggregate_identically() {
    let tasks = vec![task("a", 3, 5), task("b", 3, 5)];
    let script = [0, 0, 1, 1, 2, 2, 2, 2, 2, 0].map(Some);
    let client = ConditionVoter::new(script);
    let run = run_judge(&tasks, &client, &QueryOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("judge.jsonl");
    append_log(&log, &run.records).unwrap();
    let back = read_log(&log).unwrap();
    assert_eq!(back, run.records);
    assert_eq!(aggregate_records(&back).unwrap(), aggregate_records(&run.records).unwrap());
}
