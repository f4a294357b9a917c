//! Acceptance suite. Each test prints one `[PASS]`/`[FAIL]` line to stderr
//! (bypassing output capture) and then asserts the same condition.
//!
//! Tests share one lock so wall-clock budgets are measured without
//! contention, and share the toy fixtures and the SFM run through `OnceLock`.

use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use statflow::config::RunConfig;
use statflow::data::{toy_dataset, LabeledImages, ToyDatasetConfig};
use statflow::distill::{distill_ablation, distill_lgm, distill_sfm, DistillConfig, Method, SyntheticDataset};
use statflow::encoders::Encoder;
use statflow::evaluate::{
    encode_all, evaluate_strategy, infer_inherited_features, select_baseline, train_golden_from_features,
    train_linear_probe, Classifier, EvalConfig, FeatureCache, Projector, ProjectorInit, Selection, Strategy,
};
use statflow::flows::{
    analytic_flow, ce_linear_gradient, cosine_distance, one_hot, rowwise_cosine, softmax_probs, Aggregation,
    LinearHead, WMode,
};
use statflow::pipeline::{run_pipeline, Command};
use statflow::statistics::{build_statistical_flow, compute_class_statistics, ClassStatistics, StatFlow};
use statflow::synthesis::{augment, AugmentParams, PyramidImage};
use statflow::theory::{check_exchangeability, check_lognormal, check_softmax_variance, layernormed_feature, McConfig};

const EVAL_SEEDS: [u64; 3] = [0, 1, 2];
const THEORY_SEED: u64 = 2026;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: u32, name: &str, passed: bool, elapsed: Duration, budget_secs: u64, detail: &str) {
    let in_time = elapsed.as_secs_f64() < budget_secs as f64;
    let ok = passed && in_time;
    let line = format!(
        "[{}] criterion {id:>2} {name}: {detail} ({:.1}s of {budget_secs}s)\n",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(passed, "criterion {id} failed: {detail}");
    assert!(in_time, "criterion {id} exceeded its {budget_secs}s budget");
}

struct Toy {
    train: LabeledImages,
    val: LabeledImages,
    encoder: Encoder,
    stats: ClassStatistics,
    flow: StatFlow,
    val_cache: FeatureCache,
    golden: Classifier,
}

fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let (train, val) = toy_dataset(&ToyDatasetConfig::default()).unwrap();
        let encoder = Encoder::toy_conv_32(0).unwrap();
        let stats = compute_class_statistics(&encoder, train.iter(), train.num_classes, 64).unwrap();
        let flow = build_statistical_flow(&stats).unwrap();
        let val_cache = FeatureCache::build(&encoder, &val).unwrap();
        let train_feats = encode_all(&encoder, &train.images).unwrap();
        let golden =
            train_golden_from_features(train_feats.view(), &train.labels, train.num_classes, &EvalConfig::default()).unwrap();
        Toy {
            train,
            val,
            encoder,
            stats,
            flow,
            val_cache,
            golden,
        }
    })
}

/// Full schedule: 5000 steps, a new pyramid level every 200.
fn sfm_config() -> DistillConfig {
    DistillConfig {
        method: Method::Sfm,
        iterations: 5000,
        level_interval: 200,
        ..DistillConfig::default()
    }
}

fn sfm_run() -> &'static SyntheticDataset {
    static SFM: OnceLock<SyntheticDataset> = OnceLock::new();
    SFM.get_or_init(|| {
        let t = toy();
        distill_sfm(&sfm_config(), &t.encoder, &t.flow).unwrap()
    })
}

fn eval_cfg(seed: u64, strategy: Strategy) -> EvalConfig {
    EvalConfig {
        seed,
        strategy,
        ..EvalConfig::default()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Seed-averaged accuracy of one strategy on a one-image-per-class set.
fn seed_mean(set: &LabeledImages, strategy: Strategy, ip: bool) -> (f64, Vec<f64>) {
    let t = toy();
    let accs: Vec<f64> = EVAL_SEEDS
        .iter()
        .map(|&s| {
            let cfg = EvalConfig {
                inherit_initial_parameters: ip,
                ..eval_cfg(s, strategy)
            };
            evaluate_strategy(set, &t.encoder, &t.encoder, &t.golden, &cfg, &t.val_cache, "acc").unwrap().accuracy
        })
        .collect();
    (mean(&accs), accs)
}

fn fmt_accs(v: &[f64]) -> String {
    v.iter().map(|a| format!("{:.1}", 100.0 * a)).collect::<Vec<_>>().join("/")
}

fn ce_loss(feats: &Array2<f64>, labels: &[usize], w: &Array2<f64>) -> f64 {
    let logits = feats.dot(&w.t());
    let mut total = 0.0;
    for (row, &y) in logits.outer_iter().zip(labels) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    use rand_distr::{Distribution, StandardNormal};
    Array2::from_shape_simple_fn((r, c), || StandardNormal.sample(rng))
}

#[test]
fn criterion_01_gradient_matches_finite_differences() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let b = rng.random_range(1..=8);
        let c = rng.random_range(2..=5);
        let f = rng.random_range(1..=6);
        let feats = normal_matrix(&mut rng, b, f);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let head = LinearHead {
            weight: normal_matrix(&mut rng, c, f),
            init_sigma: 1.0,
            mode: WMode::Random,
        };
        let g = ce_linear_gradient(feats.view(), one_hot(&labels, c).unwrap().view(), &head).unwrap();
        let h = 1e-5;
        let mut fd = Array2::<f64>::zeros((c, f));
        for i in 0..c {
            for j in 0..f {
                let mut wp = head.weight.clone();
                let mut wm = head.weight.clone();
                wp[[i, j]] += h;
                wm[[i, j]] -= h;
                fd[[i, j]] = (ce_loss(&feats, &labels, &wp) - ce_loss(&feats, &labels, &wm)) / (2.0 * h);
            }
        }
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        let err = (&g - &fd).iter().fold(0.0f64, |m, v| m.max(v.abs())) / scale;
        worst = worst.max(err);
    }
    verdict(1, "gradient oracle", worst < 1e-4, start.elapsed(), 30, &format!("max relative error {worst:.2e} over 100 instances"));
}

#[test]
fn criterion_02_zero_weight_gradient_is_the_flow() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_abs, mut worst_cos) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let c = rng.random_range(2..=5);
        let per = rng.random_range(1..=3);
        let f = rng.random_range(1..=6);
        let b = c * per;
        let feats = normal_matrix(&mut rng, b, f);
        let labels: Vec<usize> = (0..b).map(|i| i % c).collect();
        let y = one_hot(&labels, c).unwrap();
        let g = ce_linear_gradient(feats.view(), y.view(), &LinearHead::zeros(c, f)).unwrap();
        let mut expected = Array2::<f64>::zeros((c, f));
        for i in 0..b {
            for k in 0..c {
                let coef = 1.0 / c as f64 - if labels[i] == k { 1.0 } else { 0.0 };
                expected.row_mut(k).scaled_add(coef / b as f64, &feats.row(i));
            }
        }
        worst_abs = worst_abs.max((&g - &expected).iter().fold(0.0f64, |m, v| m.max(v.abs())));
        let flow = analytic_flow(feats.view(), y.view()).unwrap();
        for cos in rowwise_cosine(g.view(), flow.view()).unwrap() {
            worst_cos = worst_cos.max((cos.unwrap() - 1.0).abs());
        }
    }
    let ok = worst_abs < 1e-6 && worst_cos < 1e-5;
    verdict(
        2,
        "degeneration identity",
        ok,
        start.elapsed(),
        10,
        &format!("max abs error {worst_abs:.2e}, max |cos - 1| {worst_cos:.2e} over 50 batches"),
    );
}

#[test]
fn criterion_03_softmax_exchangeability() {
    let _g = serial();
    let start = Instant::now();
    let cfg = McConfig {
        num_classes: 100,
        feature_dim: 768,
        sigma_w: 0.01,
        trials: 10_000,
        seed: THEORY_SEED,
    };
    let feature = layernormed_feature(768, THEORY_SEED);
    let r = check_exchangeability(&cfg, feature.view()).unwrap();
    verdict(
        3,
        "softmax exchangeability",
        r.max_z < 3.0,
        start.elapsed(),
        60,
        &format!("max deviation {:.2e} = {:.2} standard errors (seed {THEORY_SEED})", r.max_deviation, r.max_z),
    );
}

#[test]
fn criterion_04_lognormal_moments() {
    let _g = serial();
    let start = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for sigma in [0.1, 0.5] {
        let r = check_lognormal(0.0, sigma, 1_000_000, THEORY_SEED).unwrap();
        let exact_mean = (sigma * sigma / 2.0f64).exp();
        let exact_var = (sigma * sigma).exp() * ((sigma * sigma).exp() - 1.0);
        let em = (r.empirical_mean - exact_mean).abs() / exact_mean;
        let ev = (r.empirical_var - exact_var).abs() / exact_var;
        ok &= em < 0.02 && ev < 0.02;
        parts.push(format!("sigma {sigma}: mean err {em:.1e}, var err {ev:.1e}"));
    }
    verdict(4, "lognormal moments", ok, start.elapsed(), 60, &parts.join("; "));
}

#[test]
fn criterion_05_softmax_variance_regime() {
    let _g = serial();
    let start = Instant::now();
    let cfg = McConfig {
        num_classes: 100,
        feature_dim: 768,
        sigma_w: 0.01,
        trials: 100_000,
        seed: THEORY_SEED,
    };
    let feature = layernormed_feature(768, THEORY_SEED);
    let r = check_softmax_variance(&cfg, feature.view()).unwrap();
    let s2 = 0.01f64.powi(2) * feature.dot(&feature);
    let predicted = (s2.exp() - 1.0) / 100.0f64.powi(2);
    let rel = (r.empirical - predicted).abs() / predicted;
    verdict(
        5,
        "softmax variance",
        rel < 0.2,
        start.elapsed(),
        60,
        &format!("empirical {:.4e} vs predicted {predicted:.4e}, relative error {rel:.3}", r.empirical),
    );
}

#[test]
fn criterion_06_class_statistics() {
    let _g = serial();
    let start = Instant::now();
    let (set, _) = toy_dataset(&ToyDatasetConfig {
        train_per_class: 100,
        val_per_class: 1,
        ..ToyDatasetConfig::default()
    })
    .unwrap();
    assert_eq!(set.len(), 1000);
    let enc = Encoder::toy_conv_32(0).unwrap();
    let c = set.num_classes;
    let streamed = compute_class_statistics(&enc, set.iter(), c, 37).unwrap();

    let feats = enc.encode_batch(&set.images).unwrap();
    let mut sharded = ClassStatistics::empty(c, feats.ncols(), enc.fingerprint());
    for shard in 0..3 {
        let mut part = ClassStatistics::empty(c, feats.ncols(), enc.fingerprint());
        for i in (shard..set.len()).step_by(3) {
            part.push(feats.row(i), set.labels[i]).unwrap();
        }
        sharded.merge(&part).unwrap();
    }

    let mut worst = 0.0f64;
    for k in 0..c {
        let members: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] == k).collect();
        let others: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] != k).collect();
        let brute_center = feats.select(Axis(0), &members).mean_axis(Axis(0)).unwrap();
        let brute_other = feats.select(Axis(0), &others).mean_axis(Axis(0)).unwrap();
        for stats in [&streamed, &sharded] {
            for (got, want) in [(stats.class_center(k).unwrap(), &brute_center), (stats.nontarget_center(k).unwrap(), &brute_other)] {
                let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                worst = worst.max((&got - want).iter().fold(0.0f64, |m, v| m.max(v.abs())) / scale);
            }
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stats.sfmstats");
    streamed.save(&path).unwrap();
    let loaded = ClassStatistics::load(&path).unwrap();
    let bitwise = std::fs::read(&path).unwrap() == loaded.to_bytes()
        && loaded.to_bytes() == streamed.to_bytes()
        && loaded
            .class_sums
            .iter()
            .zip(streamed.class_sums.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits());
    verdict(
        6,
        "statistics correctness",
        worst < 1e-6 && bitwise,
        start.elapsed(),
        60,
        &format!("max relative error {worst:.2e}, cache round-trip bitwise {bitwise}"),
    );
}

#[test]
fn criterion_07_sfm_desk_run() {
    let _g = serial();
    let start = Instant::now();
    let t = toy();
    let syn = sfm_run();
    let trace = &syn.provenance.loss_trace;
    let (first, last) = (trace[0].loss, syn.final_loss().unwrap());
    let set = syn.to_labeled().unwrap();
    let (sfm_acc, sfm_accs) = seed_mean(&set, Strategy::Vanilla, false);
    let baseline = |sel: Selection| -> Vec<f64> {
        EVAL_SEEDS
            .iter()
            .map(|&s| {
                let chosen = select_baseline(sel, &t.train, &t.encoder, None, s).unwrap();
                train_linear_probe(&chosen, &t.encoder, &eval_cfg(s, Strategy::Vanilla), None, &t.val_cache, "b")
                    .unwrap()
                    .1
                    .accuracy
            })
            .collect()
    };
    let random = baseline(Selection::Random);
    let centroids = baseline(Selection::Centroids);
    let (r, c) = (mean(&random), mean(&centroids));
    let ok = last < 0.25 * first && sfm_acc > r && sfm_acc >= c - 0.02;
    verdict(
        7,
        "SFM desk run",
        ok,
        start.elapsed(),
        20 * 60,
        &format!(
            "loss {first:.4} -> {last:.4} ({:.1}%); probe {:.1} [{}] vs random {:.1} [{}], centroids {:.1} [{}]",
            100.0 * last / first,
            100.0 * sfm_acc,
            fmt_accs(&sfm_accs),
            100.0 * r,
            fmt_accs(&random),
            100.0 * c,
            fmt_accs(&centroids)
        ),
    );
}

#[test]
fn criterion_08_lgm_insensitive_to_w() {
    let _g = serial();
    let start = Instant::now();
    let t = toy();
    let mut results = Vec::new();
    for mode in [WMode::Random, WMode::Fixed, WMode::Analytic] {
        let cfg = DistillConfig {
            method: Method::Lgm,
            lgm_w_mode: mode,
            ..sfm_config()
        };
        let syn = distill_lgm(&cfg, &t.encoder, &t.train).unwrap();
        let (acc, accs) = seed_mean(&syn.to_labeled().unwrap(), Strategy::Vanilla, false);
        results.push((mode, acc, accs));
    }
    let mut spread = 0.0f64;
    for a in &results {
        for b in &results {
            spread = spread.max((a.1 - b.1).abs());
        }
    }
    let detail = results
        .iter()
        .map(|(m, a, accs)| format!("{m:?} {:.1} [{}]", 100.0 * a, fmt_accs(accs)))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        8,
        "LGM W-insensitivity",
        spread < 0.02,
        start.elapsed(),
        45 * 60,
        &format!("{detail}; max pairwise gap {:.1} points", 100.0 * spread),
    );
}

#[test]
fn criterion_09_ncdd_collapses_tcdd_learns() {
    let _g = serial();
    let start = Instant::now();
    let t = toy();
    let chance = 1.0 / t.train.num_classes as f64;
    let acc = |method: Method| {
        let cfg = DistillConfig {
            method,
            ..sfm_config()
        };
        let syn = distill_ablation(&cfg, &t.encoder, &t.stats).unwrap();
        seed_mean(&syn.to_labeled().unwrap(), Strategy::Vanilla, false)
    };
    let (ncdd, ncdd_accs) = acc(Method::Ncdd);
    let (tcdd, tcdd_accs) = acc(Method::Tcdd);
    verdict(
        9,
        "NCDD collapse / TCDD above chance",
        ncdd <= 2.0 * chance && tcdd > chance,
        start.elapsed(),
        20 * 60,
        &format!(
            "ncdd {:.1} [{}] (limit {:.1}), tcdd {:.1} [{}] (chance {:.1})",
            100.0 * ncdd,
            fmt_accs(&ncdd_accs),
            200.0 * chance,
            100.0 * tcdd,
            fmt_accs(&tcdd_accs),
            100.0 * chance
        ),
    );
}

#[test]
fn criterion_10_classifier_inheritance_gain() {
    let _g = serial();
    let start = Instant::now();
    let t = toy();
    let set = sfm_run().to_labeled().unwrap();
    let (ci, ci_accs) = seed_mean(&set, Strategy::Ci, false);
    let (vanilla, vanilla_accs) = seed_mean(&set, Strategy::Vanilla, false);
    let f = t.encoder.feature_dim();
    let proj = Projector::new(f, f, ProjectorInit::Identity);
    let inherited = infer_inherited_features(t.val_cache.features.view(), &proj, &t.golden).unwrap();
    let direct = t.golden.predict(t.val_cache.features.view()).unwrap();
    let exact = inherited == direct;
    verdict(
        10,
        "classifier inheritance",
        ci >= vanilla && exact,
        start.elapsed(),
        10 * 60,
        &format!(
            "ci {:.1} [{}] vs vanilla {:.1} [{}]; identity projector reproduces golden predictions: {exact}",
            100.0 * ci,
            fmt_accs(&ci_accs),
            100.0 * vanilla,
            fmt_accs(&vanilla_accs)
        ),
    );
}

#[test]
fn criterion_11_st_with_ip() {
    let _g = serial();
    let start = Instant::now();
    let set = sfm_run().to_labeled().unwrap();
    let (with_ip, a) = seed_mean(&set, Strategy::St, true);
    let (without, b) = seed_mean(&set, Strategy::St, false);
    verdict(
        11,
        "ST with IP vs without",
        with_ip >= without,
        start.elapsed(),
        15 * 60,
        &format!("st+ip {:.1} [{}] vs st {:.1} [{}]", 100.0 * with_ip, fmt_accs(&a), 100.0 * without, fmt_accs(&b)),
    );
}

#[test]
fn criterion_12_loss_and_metric_invariants() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut failures: Vec<String> = Vec::new();

    let a = normal_matrix(&mut rng, 4, 6);
    let exact = [
        (cosine_distance(a.view(), a.view(), Aggregation::Flatten).unwrap(), 0.0),
        (cosine_distance(a.view(), (-&a).view(), Aggregation::Flatten).unwrap(), 2.0),
        (
            cosine_distance(
                ndarray::array![[1.0, 0.0], [0.0, 0.0]].view(),
                ndarray::array![[0.0, 1.0], [0.0, 0.0]].view(),
                Aggregation::Flatten,
            )
            .unwrap(),
            1.0,
        ),
    ];
    for (got, want) in exact {
        if (got - want).abs() > 1e-12 {
            failures.push(format!("cosine distance {got} != {want}"));
        }
    }
    for _ in 0..200 {
        let x = normal_matrix(&mut rng, 3, 5);
        let y = normal_matrix(&mut rng, 3, 5);
        let (l, m) = (rng.random_range(1e-3..1e3), rng.random_range(1e-3..1e3));
        for agg in [Aggregation::Flatten, Aggregation::PerClassMean] {
            let d = cosine_distance(x.view(), y.view(), agg).unwrap();
            if !(0.0..=2.0).contains(&d) {
                failures.push(format!("cosine distance {d} outside [0, 2]"));
            }
            let scaled = cosine_distance((&x * l).view(), (&y * m).view(), agg).unwrap();
            if (scaled - d).abs() > 1e-7 {
                failures.push(format!("scale changed distance by {:.2e}", (scaled - d).abs()));
            }
        }
        let logits = normal_matrix(&mut rng, 4, 7) * rng.random_range(0.1..500.0);
        for row in softmax_probs(logits.view()).unwrap().outer_iter() {
            if (row.sum() - 1.0).abs() > 1e-6 {
                failures.push("softmax row does not sum to 1".into());
            }
        }
    }

    let mut p = PyramidImage::new(3, 4, 32).unwrap();
    while p.add_level() {}
    for level in &mut p.levels {
        level.mapv_inplace(|_| rng.random_range(-50.0..50.0));
    }
    let composed = p.compose();
    if composed.iter().any(|v| !(0.0..=1.0).contains(v)) {
        failures.push("composed pyramid pixel outside [0, 1]".into());
    }

    let imgs: Vec<Array3<f64>> = (0..3).map(|_| Array3::from_shape_simple_fn((3, 8, 8), || rng.random::<f64>())).collect();
    for seed in 0..5 {
        let out = augment(&imgs, &AugmentParams::identity().with_seed(seed)).unwrap();
        if out != imgs {
            failures.push("augment at zero magnitudes changed the images".into());
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig {
        out: dir.path().to_path_buf(),
        ..RunConfig::default()
    };
    cfg.dataset.toy = ToyDatasetConfig {
        num_classes: 4,
        train_per_class: 12,
        val_per_class: 4,
        ..ToyDatasetConfig::default()
    };
    cfg.distill.iterations = 20;
    cfg.distill.level_interval = 5;
    cfg.eval.iterations = 10;
    cfg.eval.golden_iterations = 10;
    let enc = Encoder::toy_conv_32(cfg.encoder.seed).unwrap();
    let before = enc.parameter_checksum();
    for cmd in [Command::Stats, Command::Distill, Command::Eval, Command::Viz] {
        run_pipeline(cmd, &cfg).unwrap();
    }
    let reloaded = Encoder::toy_conv_32(cfg.encoder.seed).unwrap().parameter_checksum();
    if before != enc.parameter_checksum() || before != reloaded {
        failures.push("encoder checksum changed across the pipeline".into());
    }

    let detail = if failures.is_empty() {
        "cosine range/exact cases/scale invariance, softmax sums, pyramid range, identity augment, frozen encoder".to_string()
    } else {
        failures.join("; ")
    };
    verdict(12, "loss and metric invariants", failures.is_empty(), start.elapsed(), 60, &detail);
}

#[test]
fn sanity_fixture_golden_is_strong() {
    let _g = serial();
    let t = toy();
    let acc = t.val_cache.accuracy(&t.golden.predict(t.val_cache.features.view()).unwrap());
    assert!(acc > 0.8, "golden accuracy {acc}");
    assert_eq!(t.val.len(), t.val_cache.labels.len());
}
