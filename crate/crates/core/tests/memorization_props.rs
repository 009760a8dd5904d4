use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reconbench::data::{ImageShape, LabeledDataset};
use reconbench::error::Result;
use reconbench::memorization::{estimate_model_mem, estimate_sample_mem, ConstantTrainer, NearestNeighbor, Trainer};

/// 1-NN that answers a seeded random class for a fraction of queries, so
/// trials disagree.
struct NoisyNearest(f64);

impl Trainer for NoisyNearest {
    type Model = (LabeledDataset, u64);

    fn id(&self) -> String {
        format!("noisy-nn-{}", self.0)
    }

    fn train(&self, data: &LabeledDataset, seed: u64) -> Result<Self::Model> {
        Ok((data.clone(), seed))
    }

    fn predict(&self, (data, seed): &Self::Model, image: &[f32]) -> usize {
        let key = image.iter().fold(*seed, |h, v| h.rotate_left(7) ^ v.to_bits() as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        if rng.random_bool(self.0) {
            return rng.random_range(0..data.class_count());
        }
        NearestNeighbor.predict(&NearestNeighbor.train(data, *seed).unwrap(), image)
    }
}

fn points() -> impl Strategy<Value = LabeledDataset> {
    prop::collection::vec((0.0f32..1.0, 0.0f32..1.0, 0usize..3), 2..12).prop_map(|pts| {
        let mut ds = LabeledDataset::empty(ImageShape::new(1, 2, 1), 3);
        for (x, y, c) in pts {
            ds.push(&[x, y], c);
        }
        ds
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn estimates_are_bounded_counts(ds in points(), k in 1usize..6, noise in 0.0f64..0.6, seed in any::<u32>()) {
        let tr = NoisyNearest(noise);
        for i in 0..ds.len() {
            let e = estimate_sample_mem(&tr, &ds, i, k, seed as u64).unwrap();
            prop_assert!((-1.0..=1.0).contains(&e.mem));
            prop_assert_eq!(e.mem, e.with_count as f64 / k as f64 - e.without_count as f64 / k as f64);
            prop_assert_eq!(e.trials, k);
            // reproducible from the seed schedule
            prop_assert_eq!(&e, &estimate_sample_mem(&tr, &ds, i, k, seed as u64).unwrap());
        }
        let m = estimate_model_mem(&tr, &ds, ds.len(), k, seed as u64).unwrap();
        prop_assert!((-1.0..=1.0).contains(&m.mean));
        prop_assert_eq!(m.std_error.is_some(), k > 1);
    }

    #[test]
    fn deterministic_trainers_give_integer_memorization(ds in points(), k in 1usize..4) {
        for i in 0..ds.len() {
            let e = estimate_sample_mem(&NearestNeighbor, &ds, i, k, 0).unwrap();
            prop_assert!([-1.0, 0.0, 1.0].contains(&e.mem), "{}", e.mem);
        }
    }

    #[test]
    fn never_correct_samples_score_zero(ds in points(), k in 1usize..4) {
        // the constant trainer only ever predicts class 0
        for i in (0..ds.len()).filter(|&i| ds.label(i) != 0) {
            prop_assert_eq!(estimate_sample_mem(&ConstantTrainer(0), &ds, i, k, 3).unwrap().mem, 0.0);
        }
    }
}
