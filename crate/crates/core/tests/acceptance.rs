//! Acceptance criteria, one line each. Runs without the libtest harness so
//! every criterion is evaluated and reported even when an earlier one fails.

use std::time::{Duration, Instant};

use geodin::bench::*;
use geodin::calibration::{calibrate, ece, CalibConfig, DEFAULT_BINS};
use geodin::head::head_forward;
use geodin::linalg::Matrix;
use geodin::persistence::parse_embeddings;
use geodin::scores::*;
use geodin::trainer::{full_gradient_check, train, ArchConfig, TrainConfig};
use geodin::{FeatureVector, HeadParams, HeadVariant, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn kl_bounds() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let m = rng.random_range(2..=20);
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let l: Vec<f64> = (0..m).map(|_| scale * normal(&mut rng)).collect();
        let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ln_m = (m as f64).ln();
        let lse = log_sum_exp(&l);
        let u = max - l.iter().sum::<f64>() / m as f64;
        let kl = kl_from_uniform_logits(&l);
        let violations = [max - lse, lse - max - ln_m, u - ln_m - kl, kl - u];
        worst = violations.iter().copied().fold(worst, f64::max);
    }
    let t = start.elapsed();
    outcome(
        worst <= 1e-9 && within(t, 1.0),
        format!("max violation {worst:.2e} in {t:.2?}"),
    )
}

fn factorization() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let d = rng.random_range(1..=32);
        let m = rng.random_range(2..=20);
        let mut f: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
        let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            continue;
        }
        let target = 10f64.powf(rng.random_range(-6.0..3.0));
        f.iter_mut().for_each(|v| *v *= target / n);
        let w = Matrix::from_vec(m, d, (0..m * d).map(|_| normal(&mut rng)).collect()).unwrap();
        let fv = FeatureVector::new(f).unwrap();
        let view = geometry_view(&fv, &w).unwrap();
        let u = combined_score(&view);
        let gh = covariate_score(&fv) * concept_score(&view);
        worst = worst.max((u - gh).abs() / u.abs().max(f64::MIN_POSITIVE));
    }
    let t = start.elapsed();
    outcome(
        worst <= 1e-9 && within(t, 1.0),
        format!("max relative gap {worst:.2e} in {t:.2?}"),
    )
}

fn random_small_model(rng: &mut ChaCha8Rng, variant: HeadVariant) -> Model {
    let hidden: Vec<usize> = (0..rng.random_range(0..=2)).map(|_| rng.random_range(1..=6)).collect();
    let cfg = TrainConfig {
        variant,
        seed: rng.random(),
        arch: ArchConfig {
            hidden,
            feature_dim: rng.random_range(1..=5),
            normalize_input: rng.random_bool(0.5),
        },
        ..TrainConfig::default()
    };
    let mut model = Model::init(rng.random_range(1..=5), rng.random_range(2..=5), &cfg).unwrap();
    for layer in &mut model.extractor.layers {
        layer.biases.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.3));
    }
    let h = &mut model.head;
    h.alpha_weights
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-0.5..0.5));
    h.beta_weights.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    h.alpha_bias = rng.random_range(-1.0..1.0);
    h.beta_bias = rng.random_range(-1.0..1.0);
    model
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut per_variant = Vec::new();
    for variant in HeadVariant::ALL {
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let model = random_small_model(&mut rng, variant);
            let x: Vec<f64> = (0..model.input_dim()).map(|_| normal(&mut rng)).collect();
            let label = rng.random_range(0..model.n_classes());
            let check = full_gradient_check(&model, &x, label, 1e-5).unwrap();
            worst = worst.max(check.max_relative_error);
        }
        per_variant.push((variant, worst));
    }
    let t = start.elapsed();
    let worst = per_variant.iter().map(|p| p.1).fold(0.0, f64::max);
    let detail = per_variant
        .iter()
        .map(|(v, e)| format!("{v} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(worst < 1e-5 && within(t, 30.0), format!("{detail} in {t:.2?}"))
}

fn ranking(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx
}

fn order_preservation(model: &Model) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut rank_mismatch = 0;
    for i in 0..10_000 {
        let d = rng.random_range(1..=16);
        let m = rng.random_range(2..=10);
        let mut head = HeadParams::init(d, m, HeadVariant::ALL[i % 4], &mut rng);
        head.alpha_weights.iter_mut().for_each(|v| *v = normal(&mut rng));
        head.beta_weights.iter_mut().for_each(|v| *v = normal(&mut rng));
        head.alpha_bias = 3.0 * normal(&mut rng);
        head.beta_bias = 3.0 * normal(&mut rng);
        let f: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..2.0)).collect();
        let t = head_forward(&FeatureVector::new(f.clone()).unwrap(), &head).unwrap();
        if ranking(&t.logits) != ranking(&head.vanilla_logits(&f)) {
            rank_mismatch += 1;
        }
    }

    let big = build_task(&TaskConfig {
        n_per_class: 6250,
        ..TaskConfig::default()
    })
    .unwrap();
    let samples = &big.test;
    let mut overconfident = model.clone();
    overconfident.head.beta_bias += 3.0;
    let tuning = corrupt(&big.val, &ShiftSpec::new(ShiftKind::GaussianNoise, 3).unwrap()).unwrap();
    let (cal, _) = calibrate(&overconfident, &tuning, &[], &CalibConfig::default()).unwrap();
    let mut argmax_changed = 0;
    let mut score_changed = 0;
    for x in &samples.inputs {
        if overconfident.predict(x).unwrap() != cal.predict(x).unwrap() {
            argmax_changed += 1;
        }
    }
    let before = score_dataset(&overconfident, samples).unwrap();
    let after = score_dataset(&cal, samples).unwrap();
    for (a, b) in before.iter().zip(&after) {
        if a.g.to_bits() != b.g.to_bits() || a.h.to_bits() != b.h.to_bits() || a.u.to_bits() != b.u.to_bits() {
            score_changed += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        rank_mismatch == 0 && argmax_changed == 0 && score_changed == 0 && within(t, 10.0),
        format!(
            "{rank_mismatch} ranking mismatches, {argmax_changed} argmax changes and {score_changed} score changes over {} calibrated samples in {t:.2?}",
            samples.len()
        ),
    )
}

fn naive_ece(conf: &[f64], correct: &[bool]) -> f64 {
    let n = DEFAULT_BINS;
    let mut total = 0.0;
    for b in 0..n {
        let (lo, hi) = (b as f64 / n as f64, (b + 1) as f64 / n as f64);
        let idx: Vec<usize> = (0..conf.len())
            .filter(|&i| (conf[i] >= lo && conf[i] < hi) || (b == n - 1 && conf[i] == 1.0))
            .collect();
        if !idx.is_empty() {
            let k = idx.len() as f64;
            let acc = idx.iter().filter(|&&i| correct[i]).count() as f64 / k;
            let c = idx.iter().map(|&i| conf[i]).sum::<f64>() / k;
            total += k / conf.len() as f64 * (acc - c).abs();
        }
    }
    total
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut auroc_gap: f64 = 0.0;
    for trial in 0..50 {
        let q = if trial % 2 == 0 { 1e6 } else { 3.0 };
        let n_id = rng.random_range(1..=1000);
        let n_ood = rng.random_range(1..=1000);
        let id: Vec<f64> = (0..n_id).map(|_| ((normal(&mut rng) + 0.5) * q).round() / q).collect();
        let ood: Vec<f64> = (0..n_ood).map(|_| (normal(&mut rng) * q).round() / q).collect();
        let mut wins = 0.0;
        for a in &id {
            for b in &ood {
                wins += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
        let oracle = wins / (n_id * n_ood) as f64;
        auroc_gap = auroc_gap.max((auroc(&id, &ood).unwrap() - oracle).abs());
    }
    let mut ece_gap: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(1..=2000);
        let conf: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random_bool(0.1) {
                    rng.random_range(0..=15) as f64 / 15.0
                } else {
                    rng.random()
                }
            })
            .collect();
        let correct: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        ece_gap = ece_gap.max((ece(&conf, &correct, DEFAULT_BINS).unwrap() - naive_ece(&conf, &correct)).abs());
    }
    let id: Vec<f64> = (0..100_000).map(|_| normal(&mut rng)).collect();
    let ood: Vec<f64> = (0..100_000).map(|_| normal(&mut rng)).collect();
    let tnr = tnr_at_tpr95(&id, &ood).unwrap();
    let t = start.elapsed();
    outcome(
        auroc_gap <= 1e-9 && ece_gap <= 1e-12 && (tnr - 0.05).abs() <= 0.01,
        format!("AUROC gap {auroc_gap:.1e}, ECE gap {ece_gap:.1e}, same-distribution TNR {tnr:.4} in {t:.2?}"),
    )
}

/// At most one adjacent decrease, and that one no larger than 0.01.
fn nondecreasing_with_tolerance(v: &[f64]) -> bool {
    let drops: Vec<f64> = v.windows(2).map(|w| w[0] - w[1]).filter(|d| *d > 0.0).collect();
    drops.len() <= 1 && drops.iter().all(|d| *d <= 0.01)
}

fn fmt_seq(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

struct Benchmark {
    models: Vec<Model>,
    reports: Vec<DetectionReport>,
    elapsed: Duration,
}

const SEEDS: u64 = 5;

fn run_benchmark() -> Benchmark {
    let start = Instant::now();
    let mut models = Vec::new();
    let mut reports = Vec::new();
    for seed in 0..SEEDS {
        let task = build_task(&TaskConfig {
            seed,
            ..TaskConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let model = train(&cfg, &task.train).unwrap().model;
        let mut specs: Vec<ShiftSpec> = (1..=5)
            .map(|s| ShiftSpec::new(ShiftKind::GaussianNoise, s).unwrap())
            .collect();
        specs.extend((0..task.concept.len()).map(|g| ShiftSpec::new(ShiftKind::ConceptSplit, g).unwrap()));
        reports.push(sweep(&model, &task, &[ScoreName::G, ScoreName::H], &specs, 4).unwrap());
        models.push(model);
    }
    Benchmark {
        models,
        reports,
        elapsed: start.elapsed(),
    }
}

fn mean_auroc(bench: &Benchmark, score: ScoreName, spec: ShiftSpec) -> f64 {
    bench
        .reports
        .iter()
        .map(|r| r.row(score, spec).unwrap().auroc)
        .sum::<f64>()
        / bench.reports.len() as f64
}

fn covariate_trend(bench: &Benchmark) -> Outcome {
    let g: Vec<f64> = (1..=5)
        .map(|s| {
            mean_auroc(
                bench,
                ScoreName::G,
                ShiftSpec::new(ShiftKind::GaussianNoise, s).unwrap(),
            )
        })
        .collect();
    let pass = nondecreasing_with_tolerance(&g) && g[4] >= 0.85 && within(bench.elapsed, 300.0);
    outcome(
        pass,
        format!(
            "g AUROC by severity [{}] over {SEEDS} seeds in {:.2?}",
            fmt_seq(&g),
            bench.elapsed
        ),
    )
}

fn concept_trend(bench: &Benchmark) -> Outcome {
    let groups = TaskConfig::default().concept_groups;
    // group 0 is the least similar, so reversed index order is increasing dissimilarity
    let by_dissimilarity = |score| -> Vec<f64> {
        (0..groups)
            .rev()
            .map(|g| mean_auroc(bench, score, ShiftSpec::new(ShiftKind::ConceptSplit, g).unwrap()))
            .collect()
    };
    let h = by_dissimilarity(ScoreName::H);
    let g = by_dissimilarity(ScoreName::G);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let trend = nondecreasing_with_tolerance(&h);
    let dominance = mean(&h) > mean(&g);
    outcome(
        trend && dominance && within(bench.elapsed, 300.0),
        format!(
            "by increasing dissimilarity h [{}] g [{}]; trend {}, mean h {:.3} vs g {:.3}",
            fmt_seq(&h),
            fmt_seq(&g),
            if trend { "ok" } else { "violated" },
            mean(&h),
            mean(&g)
        ),
    )
}

fn calibration_effect(model: &Model) -> Outcome {
    let task = build_task(&TaskConfig::default()).unwrap();
    let mut overconfident = model.clone();
    overconfident.head.beta_bias += 3.0;
    let tuning = corrupt(&task.val, &ShiftSpec::new(ShiftKind::GaussianNoise, 3).unwrap()).unwrap();
    let (_, report) = calibrate(
        &overconfident,
        &tuning,
        &[("clean", &task.test)],
        &CalibConfig::default(),
    )
    .unwrap();
    let t = &report.splits[0];
    let clean = &report.splits[1];
    let reduction = 1.0 - t.after.ece / t.before.ece;
    let pass = reduction >= 0.5 && t.after.nll < t.before.nll && clean.after.accuracy == clean.before.accuracy;
    outcome(
        pass,
        format!(
            "ECE {:.4} -> {:.4} ({:.0}% lower), tuning NLL {:.4} -> {:.4}, clean accuracy {:.4} -> {:.4}",
            t.before.ece,
            t.after.ece,
            100.0 * reduction,
            t.before.nll,
            t.after.nll,
            clean.before.accuracy,
            clean.after.accuracy
        ),
    )
}

const CIFAR10: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

/// Published groups, most dissimilar first, with their mean similarity.
const PUBLISHED_GROUPS: [([&str; 10], f64); 10] = [
    (
        [
            "wardrobe",
            "lamp",
            "plain",
            "lawnmower",
            "chair",
            "poppy",
            "clock",
            "cloud",
            "sunflower",
            "telephone",
        ],
        7.5,
    ),
    (
        [
            "flatfish",
            "apple",
            "orange",
            "plate",
            "table",
            "tulip",
            "bowl",
            "television",
            "skyscraper",
            "ray",
        ],
        8.95,
    ),
    (
        [
            "palm",
            "streetcar",
            "pepper",
            "keyboard",
            "bottle",
            "seal",
            "rose",
            "couch",
            "caterpillar",
            "goldfish",
        ],
        10.18,
    ),
    (
        [
            "castle", "can", "bridge", "lobster", "house", "bed", "fox", "maple", "pear", "woman",
        ],
        12.65,
    ),
    (
        [
            "willow",
            "worm",
            "chimpanzee",
            "skunk",
            "cup",
            "mushroom",
            "oak",
            "cockroach",
            "crocodile",
            "hamster",
        ],
        14.64,
    ),
    (
        [
            "girl", "rocket", "man", "tiger", "bee", "tank", "whale", "baby", "kangaroo", "dolphin",
        ],
        16.26,
    ),
    (
        [
            "possum",
            "shark",
            "forest",
            "pine",
            "dinosaur",
            "boy",
            "porcupine",
            "wolf",
            "road",
            "butterfly",
        ],
        17.79,
    ),
    (
        [
            "lion", "mountain", "crab", "bicycle", "turtle", "beetle", "train", "mouse", "snail", "otter",
        ],
        20.18,
    ),
    (
        [
            "bear", "elephant", "leopard", "camel", "lizard", "rabbit", "beaver", "spider", "raccoon", "orchid",
        ],
        21.99,
    ),
    (
        [
            "cattle",
            "shrew",
            "motorcycle",
            "squirrel",
            "snake",
            "trout",
            "sea",
            "tractor",
            "bus",
            "pickup",
        ],
        24.96,
    ),
];

/// Documentation check, plus the optional embedding split comparison when
/// `GEODIN_GLOVE` points at a 300-d vector file.
fn disclosure() -> (Outcome, String) {
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).unwrap_or_default();
    let documented = readme.contains("## Scope") && readme.contains("not reproduced");
    let optional = match std::env::var("GEODIN_GLOVE") {
        Err(_) => "embedding split check skipped (set GEODIN_GLOVE to a 300-d vector file)".to_string(),
        Ok(path) => match parse_embeddings(&path) {
            Err(e) => format!("embedding split check not run: {e}"),
            Ok(emb) => {
                let id: Vec<String> = CIFAR10.iter().map(|s| s.to_string()).collect();
                let ood: Vec<String> = PUBLISHED_GROUPS.iter().flat_map(|g| g.0).map(str::to_string).collect();
                match concept_split(&id, &ood, &emb, 10) {
                    Err(e) => format!("embedding split check not run: {e}"),
                    Ok(groups) => {
                        let close = groups
                            .iter()
                            .zip(&PUBLISHED_GROUPS)
                            .filter(|(g, p)| (g.mean_similarity - p.1).abs() <= 0.5)
                            .count();
                        format!("embedding split means within 0.5 of published values for {close}/10 groups")
                    }
                }
            }
        },
    };
    (
        outcome(
            documented,
            "README scope section states that full-scale image benchmark numbers are not reproduced".into(),
        ),
        optional,
    )
}

fn main() {
    // libtest flags such as --nocapture or a name filter are accepted and ignored
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    results.push((1, "KL bound suite", kl_bounds()));
    results.push((2, "factorization suite", factorization()));
    results.push((3, "gradient suite", gradients()));
    results.push((5, "metric oracle suite", metric_oracles()));
    let bench = run_benchmark();
    results.push((4, "order-preserving suite", order_preservation(&bench.models[0])));
    results.push((6, "covariate trend", covariate_trend(&bench)));
    results.push((7, "concept trend", concept_trend(&bench)));
    results.push((8, "calibration effect", calibration_effect(&bench.models[0])));
    let (doc, optional) = disclosure();
    results.push((9, "full-scale number disclosure", doc));
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (n, name, o) in &results {
        println!(
            "criterion {n} {name}: {} ({})",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!("non-gating: {optional}");
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
