//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Trained targets, generators and memorization trials are cached under the
//! cargo target directory, so only the first run pays for training.

mod common;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reconbench::attacks::{
    deep_dream, deep_inversion, deep_leakage, generator_cache_key, gradient_snapshot, input_trajectory,
    latent_trajectory, mi_face, revealer, train_generator, AttackConfig, GanConfig, GeneratorBundle, GeneratorMode,
};
use reconbench::data::{mnist_vendored, LabeledDataset};
use reconbench::error::Result;
use reconbench::harness::{trigger_patch_mean, ExperimentPlan, ModelStore, Regime, Split, StoredModel};
use reconbench::judge::{aggregate, parse_response, run_judge, QueryOptions, TaskVotes};
use reconbench::knowledge::classify_attack;
use reconbench::memorization::{MemLedger, NetTrainer};
use reconbench::metrics::{
    d_dis, extractor_by_id, frechet_distance, s_dis_and_coverage, FeatureExtractor, GaussianSummary,
    IdentityExtractor, MatchOptions, MetricReport, SampleDistanceKind,
};
use reconbench::model::ModelView;
use reconbench::nn::{Activation, Architecture, ModelSpec, Network};
use reconbench::result::ReconstructionResult;

use common::judge::{task, ConditionVoter};
use common::{dataset, oracle, SHAPE};

/// Reconstructions per attack run.
const N: usize = 100;
const TARGET_SIZE: usize = 2000;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

/// Desk-scale MNIST context shared by the attack criteria.
struct Desk {
    ds: LabeledDataset,
    store: ModelStore,
    extractor: Box<dyn FeatureExtractor>,
    plain: Option<(Split, StoredModel)>,
    generator: Option<GeneratorBundle>,
    /// D-Dis of DeepInversion against the plain target, reused by the BN ablation.
    di_plain: Option<f64>,
}

impl Desk {
    fn new() -> Result<Self> {
        let ds = mnist_vendored();
        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-store");
        let extractor = extractor_by_id("randcnn", ds.shape())?;
        Ok(Self {
            store: ModelStore::open(&root)?,
            ds,
            extractor,
            plain: None,
            generator: None,
            di_plain: None,
        })
    }

    fn plan(regime: Regime) -> ExperimentPlan {
        ExperimentPlan {
            dataset: "mnist5k".into(),
            regime,
            ..ExperimentPlan::mnist_halves(vec![TARGET_SIZE])
        }
    }

    fn target(&self, regime: Regime) -> Result<(Split, StoredModel)> {
        let plan = Self::plan(regime);
        let split = self.store.split(&self.ds, &plan)?;
        let m = self.store.train_or_load(&plan, &split, TARGET_SIZE)?;
        Ok((split, m))
    }

    fn plain(&mut self) -> Result<&(Split, StoredModel)> {
        if self.plain.is_none() {
            self.plain = Some(self.target(Regime::Plain)?);
        }
        Ok(self.plain.as_ref().expect("set above"))
    }

    /// Plain GAN on the aux half; the aux split is the same for every regime.
    fn generator(&mut self) -> Result<&GeneratorBundle> {
        if self.generator.is_none() {
            let aux = self.plain()?.0.aux.clone();
            let cfg = AttackConfig::preset("revealer", N);
            let key = generator_cache_key(&aux, GeneratorMode::PlainGan, cfg.latent_dim, &cfg.gan, cfg.seed);
            let g = match self.store.load_generator(&key)? {
                Some(g) => g,
                None => {
                    let g = train_generator(&aux, GeneratorMode::PlainGan, None, cfg.latent_dim, &cfg.gan, cfg.seed)?;
                    self.store.save_generator(&key, &g)?;
                    g
                }
            };
            self.generator = Some(g);
        }
        Ok(self.generator.as_ref().expect("set above"))
    }

    fn d_dis(&mut self, rec: &ReconstructionResult) -> Result<f64> {
        let tar = self.plain()?.0.target(TARGET_SIZE)?.clone();
        d_dis(&rec.data, &tar, self.extractor.as_ref())
    }
}

fn mean_confidence(view: &ModelView, r: &ReconstructionResult) -> f64 {
    let p = view.query_dataset(&r.data);
    (0..r.data.len()).map(|i| p.row(i)[r.data.label(i)] as f64).sum::<f64>() / r.data.len() as f64
}

fn random_pair(rng: &mut ChaCha8Rng, max: usize) -> (LabeledDataset, LabeledDataset) {
    let classes = rng.random_range(1..=3);
    let image = |rng: &mut ChaCha8Rng| -> Vec<f32> { (0..SHAPE.len()).map(|_| rng.random_range(0..=4) as f32 / 4.0).collect() };
    let tar: Vec<(Vec<f32>, usize)> = (0..rng.random_range(1..=max))
        .map(|_| (image(rng), rng.random_range(0..classes)))
        .collect();
    let present: Vec<usize> = tar.iter().map(|t| t.1).collect();
    let rec: Vec<(Vec<f32>, usize)> = (0..rng.random_range(1..=max))
        .map(|_| (image(rng), present[rng.random_range(0..present.len())]))
        .collect();
    (dataset(&rec, classes), dataset(&tar, classes))
}

fn gaussian_1d(mean: f64, var: f64) -> GaussianSummary {
    GaussianSummary::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var)).unwrap()
}

fn c1_metric_oracles() -> Result<Verdict> {
    let start = Instant::now();
    let cases = [
        (gaussian_1d(0.3, 2.0), gaussian_1d(0.3, 2.0), 0.0),
        (gaussian_1d(0.0, 1.0), gaussian_1d(1.0, 1.0), 1.0),
        (gaussian_1d(0.0, 1.0), gaussian_1d(0.0, 4.0), 1.0),
    ];
    let mut worst: f64 = 0.0;
    for (a, b, want) in &cases {
        worst = worst.max((frechet_distance(a, b)? - want).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for _ in 0..200 {
        let (rec, tar) = random_pair(&mut rng, 50);
        for kind in SampleDistanceKind::ALL {
            let r = s_dis_and_coverage(&rec, &tar, kind, MatchOptions::default())?;
            let (s, a, m) = oracle(&rec, &tar, kind);
            if r.s_dis != s || r.coverage != a || r.mapping != m {
                mismatches += 1;
            }
        }
    }
    let t = start.elapsed();
    Ok(verdict(
        worst <= 1e-8 && mismatches == 0 && t < Duration::from_secs(60),
        format!("analytic Fréchet max error {worst:.1e}; {mismatches}/600 oracle mismatches; {:.1}s", t.as_secs_f64()),
    ))
}

fn c2_desiderata() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut bad_alpha, mut bad_dup, mut bad_repeat) = (0, 0, 0);
    let dir = tempfile::tempdir().expect("tempdir");
    let triple = classify_attack("mi_face")?;
    for n in 0..1000 {
        let (rec, tar) = random_pair(&mut rng, 20);
        let mut doubled = rec.clone();
        doubled.extend(&rec);
        for kind in SampleDistanceKind::ALL {
            let r = s_dis_and_coverage(&rec, &tar, kind, MatchOptions::default())?;
            if !(r.coverage > 0.0 && r.coverage <= 1.0) {
                bad_alpha += 1;
            }
            let d = s_dis_and_coverage(&doubled, &tar, kind, MatchOptions::default())?;
            if d.coverage != r.coverage || (d.s_dis - r.s_dis).abs() > 1e-12 * r.s_dis.abs().max(1.0) {
                bad_dup += 1;
            }
        }
        // serialize every tenth pair and score it twice from disk
        if n % 10 == 0 && rec.len() >= 2 && tar.len() >= 2 {
            let (rp, tp) = (dir.path().join(format!("r{n}")), dir.path().join(format!("t{n}")));
            let (r, t) = (ReconstructionResult::new(rec, "mi_face", triple, 0), ReconstructionResult::new(tar, "mi_face", triple, 0));
            // results hold quantized pixels, so the in-memory report is the reference
            let before = MetricReport::evaluate(&r.data, &t.data, &IdentityExtractor, &SampleDistanceKind::ALL, MatchOptions::default())?;
            r.save(&rp)?;
            t.save(&tp)?;
            let score = || -> Result<String> {
                let (r, t) = (ReconstructionResult::load(&rp)?, ReconstructionResult::load(&tp)?);
                let m = MetricReport::evaluate(&r.data, &t.data, &IdentityExtractor, &SampleDistanceKind::ALL, MatchOptions::default())?;
                Ok(serde_json::to_string(&m)?)
            };
            let (a, b) = (score()?, score()?);
            if a != b || a != serde_json::to_string(&before)? {
                bad_repeat += 1;
            }
        }
    }
    Ok(verdict(
        bad_alpha + bad_dup + bad_repeat == 0,
        format!("1000 instances: α out of (0,1] {bad_alpha}, duplication changes {bad_dup}, non-identical re-evaluations {bad_repeat}"),
    ))
}

/// Criteria 3 and 4 share one set of attack runs on the plain target.
fn c3_c4_attacks(desk: &mut Desk) -> Result<(Verdict, Verdict)> {
    let start = Instant::now();
    let view = ModelView::owned(desk.plain()?.1.network.clone());
    let mi = mi_face(&view, &AttackConfig::preset("mi_face", N))?;
    let g = desk.generator()?.clone();
    let rv = revealer(&view, &g, &AttackConfig::preset("revealer", N))?;
    let dd = deep_dream(&view, &AttackConfig::preset("deep_dream", N))?;
    let di = deep_inversion(&view, &AttackConfig::preset("deep_inversion", N))?;
    let conf = mean_confidence(&view, &mi);
    let (d_mi, d_rv, d_dd, d_di) = (desk.d_dis(&mi)?, desk.d_dis(&rv)?, desk.d_dis(&dd)?, desk.d_dis(&di)?);
    desk.di_plain = Some(d_di);
    let t = start.elapsed().as_secs_f64();
    let c3 = verdict(
        conf >= 0.9 && d_mi >= 2.0 * d_rv,
        format!("MI-Face confidence {conf:.3}, D-Dis MI-Face {d_mi:.3} vs Revealer {d_rv:.3} ({:.1}×); {t:.0}s", d_mi / d_rv),
    );
    let rel = |worse: f64, better: f64| (worse - better) / worse;
    let c4 = verdict(
        rel(d_mi, d_rv) >= 0.2 && rel(d_dd, d_di) >= 0.2,
        format!(
            "D-Dis Revealer {d_rv:.3} < MI-Face {d_mi:.3} ({:.0}% lower); DeepInversion {d_di:.3} < DeepDream {d_dd:.3} ({:.0}% lower)",
            100.0 * rel(d_mi, d_rv),
            100.0 * rel(d_dd, d_di)
        ),
    );
    Ok((c3, c4))
}

fn c5_deep_leakage(ds: &LabeledDataset) -> Result<Verdict> {
    let start = Instant::now();
    let mut recovered = 0;
    let mut params = 0;
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let spec = ModelSpec {
            architecture: Architecture::Mlp {
                hidden: vec![12],
                bias: true,
                activation: Activation::Sigmoid,
            },
            input: ds.shape(),
            classes: 10,
        };
        let net = Network::new(spec, seed)?;
        params = net.params().iter().map(|p| p.len()).sum();
        let i = (seed as usize * 397) % ds.len();
        let snap = gradient_snapshot(&net, ds.image(i), ds.label(i))?;
        let cfg = AttackConfig {
            seed,
            ..AttackConfig::preset("deep_leakage", 1)
        };
        let out = deep_leakage(&snap, &ModelView::owned(net), &cfg)?;
        let x: Vec<f32> = out.x.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let err = reconbench::metrics::mse(&x, ds.image(i));
        worst = worst.max(err);
        if err < 1e-3 && out.label == ds.label(i) {
            recovered += 1;
        }
    }
    let t = start.elapsed();
    Ok(verdict(
        recovered >= 9 && params <= 10_000 && t < Duration::from_secs(300),
        format!("{recovered}/10 seeds recovered ({params} parameters, worst MSE {worst:.1e}); {:.1}s", t.as_secs_f64()),
    ))
}

fn c6_memorization(desk: &Desk) -> Result<Verdict> {
    let start = Instant::now();
    let plan = ExperimentPlan {
        dataset: "mnist5k".into(),
        ..ExperimentPlan::mnist_halves(vec![100, 500, 2000])
    };
    let split = desk.store.split(&desk.ds, &plan)?;
    let ledger = MemLedger::new(PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-store").join("memorization.jsonl"));
    let trainer = NetTrainer::desk();
    let mut rows = Vec::new();
    for (size, target) in split.sizes.iter().zip(&split.targets) {
        let m = ledger.model_mem(&trainer, target, 32, 8, 0)?;
        rows.push((*size, m.mean, m.std_error.unwrap_or(0.0)));
    }
    let ok = rows.windows(2).all(|w| {
        let (a, b) = (w[0], w[1]);
        a.1 - b.1 > (a.2 * a.2 + b.2 * b.2).sqrt()
    });
    let shown: Vec<String> = rows.iter().map(|(s, m, se)| format!("{s}: {m:.3}±{se:.3}")).collect();
    let t = start.elapsed();
    Ok(verdict(
        ok && t < Duration::from_secs(1800),
        format!("mem (k=8, 32 probes) {}; {:.0}s", shown.join(", "), t.as_secs_f64()),
    ))
}

fn c7_bn_ablation(desk: &mut Desk) -> Result<Verdict> {
    let (_, frozen) = desk.target(Regime::BnFrozen)?;
    let di = deep_inversion(&ModelView::owned(frozen.network), &AttackConfig::preset("deep_inversion", N))?;
    let d_frozen = desk.d_dis(&di)?;
    let d_plain = match desk.di_plain {
        Some(d) => d,
        None => {
            let view = ModelView::owned(desk.plain()?.1.network.clone());
            let r = deep_inversion(&view, &AttackConfig::preset("deep_inversion", N))?;
            desk.d_dis(&r)?
        }
    };
    let rel = (d_frozen - d_plain) / d_plain;
    Ok(verdict(
        rel >= 0.1,
        format!("DeepInversion D-Dis BN-frozen {d_frozen:.3} vs trained {d_plain:.3} (+{:.0}%)", 100.0 * rel),
    ))
}

fn c8_backdoor(desk: &mut Desk) -> Result<Verdict> {
    let (split, m) = desk.target(Regime::backdoor_default())?;
    let success = m.metrics.backdoor_success.unwrap_or(0.0);
    let shape = split.test.shape();
    let view = ModelView::owned(m.network);
    let rate = |r: &ReconstructionResult| {
        let idx: Vec<usize> = (0..r.data.len()).filter(|&i| r.data.label(i) == 0).collect();
        idx.iter().filter(|&&i| trigger_patch_mean(r.data.image(i), shape) < 0.1).count() as f64 / idx.len().max(1) as f64
    };
    let long = |id: &str| AttackConfig {
        iterations: 1000,
        ..AttackConfig::preset(id, N)
    };
    let di = rate(&deep_inversion(&view, &long("deep_inversion"))?);
    let mi = rate(&mi_face(&view, &long("mi_face"))?);
    let g = desk.generator()?.clone();
    let rv = rate(&revealer(&view, &g, &AttackConfig::preset("revealer", N))?);
    Ok(verdict(
        success >= 0.9 && di >= 0.5 && rv >= 0.5 && mi < 0.5,
        format!(
            "backdoor success {success:.2}; trigger rate in class-0 outputs: DeepInversion {di:.2}, Revealer {rv:.2}, MI-Face {mi:.2}"
        ),
    ))
}

fn c9_judge() -> Result<Verdict> {
    let mut problems = Vec::new();
    let one = |votes: &[usize], n| {
        aggregate(&[TaskVotes {
            conditions: n,
            votes: votes.iter().map(|&v| Some(v)).collect(),
        }])
    };
    let a = one(&[0, 0, 0, 0, 0], 2)?;
    if (a.conditions[0].major_wins, a.conditions[0].unanimous_wins, a.conditions[0].pred_rate) != (1, 1, 1.0) {
        problems.push("unanimous example");
    }
    let t = one(&[0, 0, 1, 1, 2], 3)?;
    let rates: Vec<f64> = t.conditions.iter().map(|c| c.pred_rate).collect();
    if t.conditions.iter().any(|c| c.major_wins > 0) || rates != [0.4, 0.4, 0.2] {
        problems.push("2-2 tie example");
    }
    if (0..5).map(|_| parse_response("3", 6)).any(|p| p != Some(1)) || parse_response("image 3 looks best", 6).is_some() {
        problems.push("reply parsing");
    }
    // scripted condition votes, replayed under 100 presentation shuffles
    let script: Vec<Vec<Option<usize>>> = vec![
        vec![Some(0); 5],
        vec![Some(0), Some(0), Some(1), Some(1), Some(2)],
        vec![Some(2), Some(2), Some(2), None, Some(1)],
        vec![Some(3), Some(3), Some(3), Some(3), None],
    ];
    let direct = aggregate(
        &script
            .iter()
            .map(|v| TaskVotes {
                conditions: 4,
                votes: v.clone(),
            })
            .collect::<Vec<_>>(),
    )?;
    if direct.conditions.iter().any(|c| c.unanimous_wins > c.major_wins) {
        problems.push("unanimous ≤ major");
    }
    let tasks: Vec<_> = (0..script.len()).map(|i| task(&format!("task{i}"), 4, 5)).collect();
    let mut replays_differ = 0;
    for seed in 0..100 {
        let client = ConditionVoter::new(script.iter().flatten().copied());
        let run = run_judge(&tasks, &client, &QueryOptions { seed, ..QueryOptions::default() })?;
        if reconbench::judge::aggregate_records(&run.records)? != direct {
            replays_differ += 1;
        }
    }
    if replays_differ > 0 {
        problems.push("shuffled replays");
    }
    Ok(verdict(
        problems.is_empty(),
        if problems.is_empty() {
            "hand tallies reproduced; 100/100 shuffled replays identical".to_string()
        } else {
            format!("mismatches: {}", problems.join(", "))
        },
    ))
}

fn max_drift(a: &[reconbench::tensor::Tensor], b: &[reconbench::tensor::Tensor]) -> f32 {
    if a.len() != b.len() {
        return f32::INFINITY;
    }
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f32::max)
}

fn c10_reductions(desk: &mut Desk) -> Result<Verdict> {
    let (split, m) = desk.plain()?.clone();
    let view = ModelView::owned(m.network);
    let dd = AttackConfig {
        iterations: 5,
        alpha_tv: 0.0,
        alpha_l2: 0.0,
        ..AttackConfig::preset("deep_dream", 10)
    };
    let mi = AttackConfig {
        attack_id: "mi_face".into(),
        ..dd.clone()
    };
    let input = max_drift(&input_trajectory("deep_dream", &view, &dd)?, &input_trajectory("mi_face", &view, &mi)?);

    let gan = GanConfig {
        steps: 300,
        ..GanConfig::default()
    };
    let k = AttackConfig {
        iterations: 5,
        kedmi_sigma_init: 0.0,
        kedmi_zero_noise: true,
        gan,
        ..AttackConfig::preset("kedmi", 10)
    };
    let key = generator_cache_key(&split.aux, GeneratorMode::LabelDistilledGan, k.latent_dim, &k.gan, k.seed);
    let g = match desk.store.load_generator(&key)? {
        Some(g) => g,
        None => {
            let g = train_generator(&split.aux, GeneratorMode::LabelDistilledGan, Some(&view), k.latent_dim, &k.gan, k.seed)?;
            desk.store.save_generator(&key, &g)?;
            g
        }
    };
    let r = AttackConfig {
        attack_id: "revealer".into(),
        ..k.clone()
    };
    let latent = max_drift(&latent_trajectory("kedmi", &view, &g, &k)?, &latent_trajectory("revealer", &view, &g, &r)?);
    Ok(verdict(
        input <= 1e-6 && latent <= 1e-6,
        format!("5-step drift: DeepDream(α=0) vs MI-Face {input:.1e}; KEDMI(σ=0, ξ=0) vs Revealer {latent:.1e}"),
    ))
}

fn main() {
    let names = [
        "metric oracles",
        "desiderata invariants",
        "confidence counterexample",
        "attack ordering",
        "deep leakage exactness",
        "memorization trend",
        "BN-statistics ablation",
        "backdoor recovery",
        "judge aggregation",
        "reduction equivalences",
    ];
    let mut results: Vec<Option<Result<Verdict>>> = (0..10).map(|_| None).collect();
    results[0] = Some(c1_metric_oracles());
    results[1] = Some(c2_desiderata());
    results[8] = Some(c9_judge());
    match Desk::new() {
        Ok(mut desk) => {
            match c3_c4_attacks(&mut desk) {
                Ok((a, b)) => {
                    results[2] = Some(Ok(a));
                    results[3] = Some(Ok(b));
                }
                Err(e) => {
                    results[2] = Some(Err(e));
                    results[3] = None;
                }
            }
            results[4] = Some(c5_deep_leakage(&desk.ds));
            results[5] = Some(c6_memorization(&desk));
            results[6] = Some(c7_bn_ablation(&mut desk));
            results[7] = Some(c8_backdoor(&mut desk));
            results[9] = Some(c10_reductions(&mut desk));
        }
        Err(e) => results[2] = Some(Err(e)),
    }
    let mut failed = 0;
    for (i, (name, r)) in names.iter().zip(results).enumerate() {
        let (pass, detail) = match r {
            Some(Ok(v)) => (v.pass, v.detail),
            Some(Err(e)) => (false, format!("error: {e}")),
            None => (false, "not run".to_string()),
        };
        failed += usize::from(!pass);
        println!("criterion {:>2} {} {name}: {detail}", i + 1, if pass { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
