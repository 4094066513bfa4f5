//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use progtta::baselines::train_clipft;
use progtta::checkpoint;
use progtta::config::KeyValueConfig;
use progtta::data::{decode_container, encode_container, TrajectoryRecord};
use progtta::eval::{self, evaluate, spearman_voc, Estimator, EvalReport, EvalSplit, Format};
use progtta::gradcheck;
use progtta::meta::{train, TrainConfig};
use progtta::sampling::{select_diverse, SelectionMode};
use progtta::synth::{generate, SynthBundle, SynthSpec};
use progtta::ttt::{run_frames, run_frozen, run_ttt, AdaptConfig, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::statistics::{Data, OrderStatistics, RankTieBreaker, Statistics};

use common::{random_meta, random_record};

const FIRST_ORDER_TOL: f64 = 1e-6;
const SECOND_ORDER_TOL: f64 = 1e-4;
const GRADIENT_BUDGET: Duration = Duration::from_secs(30);
const SPEARMAN_TOL: f64 = 1e-12;
const SPEARMAN_VECTORS: usize = 1000;
const MAX_CANDIDATES: usize = 12;
const MAX_SUBSET: usize = 4;
const INSTANCES_PER_SIZE: usize = 10;
const ORACLE_BUDGET: Duration = Duration::from_secs(60);
const IM_MARGIN: f64 = 0.10;
const TR_RS_GAP: f64 = 0.05;
const BENCHMARK_BUDGET: Duration = Duration::from_secs(15 * 60);
const SHIFTED_SPLITS: [&str; 3] = ["es", "em", "es_em"];
const FUZZ_FLIPS: usize = 4000;

struct Outcome {
    passed: bool,
    detail: String,
}

fn check(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let report = gradcheck::run(true, 42).expect("gradient check runs");
    let elapsed = start.elapsed();
    let first = ["primitive", "self_loss", "pred_loss"];
    let second = ["nested", "window_loss"];
    let max = |suites: &[&str]| suites.iter().map(|s| report.max_error(s)).fold(0.0, f64::max);
    let (e1, e2) = (max(&first), max(&second));
    let groups = report.checks.iter().filter(|c| c.suite == "window_loss").count();
    check(
        e1 <= FIRST_ORDER_TOL && e2 <= SECOND_ORDER_TOL && groups == 11 && elapsed < GRADIENT_BUDGET,
        format!(
            "first-order max rel err {e1:.2e} (<= {FIRST_ORDER_TOL:.0e}), second-order {e2:.2e} (<= {SECOND_ORDER_TOL:.0e}) over {groups} groups, {:.2}s (< {}s)",
            elapsed.as_secs_f64(),
            GRADIENT_BUDGET.as_secs()
        ),
    )
}

fn oracle_voc(preds: &[f64]) -> f64 {
    let ranks = Data::new(preds.to_vec()).ranks(RankTieBreaker::Average);
    let times: Vec<f64> = (1..=preds.len()).map(|t| t as f64).collect();
    let sd = ranks.iter().std_dev();
    if sd == 0.0 {
        return 0.0;
    }
    ranks.iter().covariance(times.iter()) / (sd * times.iter().std_dev())
}

fn brute_force(features: &[Vec<f64>], b: usize) -> Vec<usize> {
    let n = features.len();
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != b {
            continue;
        }
        let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let mut obj = 0.0;
        for (k, &i) in idx.iter().enumerate() {
            for &j in &idx[k + 1..] {
                obj += features[i]
                    .iter()
                    .zip(&features[j])
                    .map(|(a, c)| (a - c).powi(2))
                    .sum::<f64>();
            }
        }
        if obj > best.1 {
            best = (idx, obj);
        }
    }
    best.0
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    for _ in 0..SPEARMAN_VECTORS {
        let n = rng.random_range(2..60);
        let levels = rng.random_range(1..8);
        let preds: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..levels))).collect();
        let got = spearman_voc(&preds).expect("valid input").value;
        worst = worst.max((got - oracle_voc(&preds)).abs());
    }
    let mut mismatches = 0;
    let mut instances = 0;
    for n in 1..=MAX_CANDIDATES {
        for b in 1..=MAX_SUBSET.min(n) {
            for _ in 0..INSTANCES_PER_SIZE {
                let dim = rng.random_range(1..4);
                // coarse grid values produce tied objectives
                let features: Vec<Vec<f64>> = (0..n)
                    .map(|_| (0..dim).map(|_| f64::from(rng.random_range(-3..=3))).collect())
                    .collect();
                let refs: Vec<&[f64]> = features.iter().map(Vec::as_slice).collect();
                let chosen = select_diverse(&refs, b, SelectionMode::Exact);
                if chosen.indices != brute_force(&features, b) || chosen.mode != SelectionMode::Exact {
                    mismatches += 1;
                }
                instances += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        worst <= SPEARMAN_TOL && mismatches == 0 && elapsed < ORACLE_BUDGET,
        format!(
            "spearman max |diff| {worst:.1e} over {SPEARMAN_VECTORS} tied vectors (<= {SPEARMAN_TOL:.0e}), select_diverse {mismatches}/{instances} mismatches, {:.2}s (< {}s)",
            elapsed.as_secs_f64(),
            ORACLE_BUDGET.as_secs()
        ),
    )
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn variant_identities() -> Outcome {
    let mut failures = Vec::new();
    for seed in 0..20u64 {
        let meta = random_meta(seed, 5, 4, 6);
        let len = 2 + (seed as usize % 9);
        let traj = random_record(seed + 100, "t", len, 5);
        let run = |variant, lr: Option<f64>, k: Option<usize>| {
            let mut cfg = AdaptConfig::for_variant(variant);
            if let Some(lr) = lr {
                cfg.lr = lr;
            }
            if let Some(k) = k {
                cfg.context = k;
            }
            run_ttt(&traj, &meta, &cfg).expect("adaptation runs")
        };
        if bits(&run(Variant::Explicit, None, Some(0))) != bits(&run(Variant::Reset, Some(1.0), None)) {
            failures.push(format!("EX(k=0) != RS, seed {seed}"));
        }
        let frozen = bits(&run_frozen(&traj, &meta).expect("frozen pass"));
        for v in Variant::ALL {
            if bits(&run(v, Some(0.0), None)) != frozen {
                failures.push(format!("{v} with eta=0 != frozen, seed {seed}"));
            }
        }
        let single = random_record(seed + 200, "s", 1, 5);
        let one = |v| bits(&run_ttt(&single, &meta, &AdaptConfig::for_variant(v)).expect("adaptation runs"));
        let mut ex = AdaptConfig::for_variant(Variant::Explicit);
        ex.lr = 0.1;
        if one(Variant::Implicit) != one(Variant::Reset)
            || one(Variant::Implicit) != bits(&run_ttt(&single, &meta, &ex).expect("adaptation runs"))
        {
            failures.push(format!("T=1 variants differ, seed {seed}"));
        }
        let frames = traj.fused_inputs().expect("fused");
        let im = AdaptConfig::for_variant(Variant::Implicit);
        let (whole, _) = run_frames(&frames, &meta, &im, None).expect("run");
        let cut = len / 2;
        let (head, state) = run_frames(&frames[..cut], &meta, &im, None).expect("run");
        let (tail, _) = run_frames(&frames[cut..], &meta, &im, Some(state)).expect("run");
        if bits(&whole) != bits(&[head, tail].concat()) {
            failures.push(format!("IM split continuity broken, seed {seed}"));
        }
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            "EX(k=0) == RS, eta=0 == frozen, T=1 IM == EX == RS, IM split continuity: all bit-identical on 20 random trajectories".to_string()
        } else {
            failures.join("; ")
        },
    )
}

fn eval_splits(bundle: &SynthBundle) -> Vec<EvalSplit> {
    bundle
        .splits
        .iter()
        .filter_map(|s| {
            s.shift.map(|shift| EvalSplit {
                name: s.name.clone(),
                shift,
                records: s.records.clone(),
            })
        })
        .collect()
}

struct Benchmark {
    splits: Vec<EvalSplit>,
    train: Vec<TrajectoryRecord>,
    cfg: TrainConfig,
    variants: Vec<EvalReport>,
    elapsed: Duration,
}

fn benchmark_spec() -> SynthSpec {
    SynthSpec::from_text(include_str!("../../../benchmark/synth_spec.txt")).expect("benchmark spec")
}

fn benchmark_config() -> TrainConfig {
    TrainConfig::from_text(include_str!("../../../benchmark/train.txt")).expect("benchmark config")
}

fn run_benchmark() -> Benchmark {
    let start = Instant::now();
    let bundle = generate(&benchmark_spec()).expect("benchmark data");
    let cfg = benchmark_config();
    let train_set = bundle.split("train").expect("train split").records.clone();
    let meta = train(&train_set, &cfg).expect("meta-training").params;
    let splits = eval_splits(&bundle);
    let variants = Variant::ALL
        .into_iter()
        .map(|v| {
            evaluate(
                &splits,
                &Estimator::Ttt {
                    meta: &meta,
                    cfg: AdaptConfig::for_variant(v),
                },
            )
            .expect("evaluation")
        })
        .collect();
    Benchmark {
        splits,
        train: train_set,
        cfg,
        variants,
        elapsed: start.elapsed(),
    }
}

fn pooled(bench: &Benchmark, v: Variant) -> f64 {
    let name = v.display_name();
    bench
        .variants
        .iter()
        .find(|r| r.estimator == name)
        .expect("variant report")
        .pooled_mean()
}

fn ordering(bench: &Benchmark) -> Outcome {
    let (im, rs, tr) = (
        pooled(bench, Variant::Implicit),
        pooled(bench, Variant::Reset),
        pooled(bench, Variant::Trajectory),
    );
    let ex = pooled(bench, Variant::Explicit);
    let im_ok = im >= rs + IM_MARGIN;
    let tr_ok = (tr - rs).abs() <= TR_RS_GAP;
    let time_ok = bench.elapsed < BENCHMARK_BUDGET;
    check(
        im_ok && tr_ok && time_ok,
        format!(
            "IM {im:.4} >= RS {rs:.4} + {IM_MARGIN} [{}], |TR {tr:.4} - RS| = {:.4} <= {TR_RS_GAP} [{}], EX {ex:.4}, {:.0}s (< {}s) [{}]",
            if im_ok { "ok" } else { "fail" },
            (tr - rs).abs(),
            if tr_ok { "ok" } else { "fail" },
            bench.elapsed.as_secs_f64(),
            BENCHMARK_BUDGET.as_secs(),
            if time_ok { "ok" } else { "fail" },
        ),
    )
}

fn shift_generalization(bench: &Benchmark) -> Outcome {
    let im = bench
        .variants
        .iter()
        .find(|r| r.estimator == Variant::Implicit.display_name())
        .expect("IM report");
    let clip = evaluate(&bench.splits, &Estimator::Clip).expect("clip evaluation");
    let ft_params = train_clipft(&bench.train, &bench.cfg)
        .expect("regressor training")
        .params;
    let ft = evaluate(&bench.splits, &Estimator::ClipFt { meta: &ft_params }).expect("regressor evaluation");
    let mut passed = true;
    let mut parts = Vec::new();
    for split in SHIFTED_SPLITS {
        let voc = |r: &EvalReport| r.dataset(split).expect("shifted split").mean_voc;
        let (a, b, c) = (voc(im), voc(&clip), voc(&ft));
        passed &= a > b && a > c;
        parts.push(format!("{split}: IM {a:.4} vs CLIP {b:.4}, CLIP-FT {c:.4}"));
    }
    check(passed, parts.join("; "))
}

fn determinism() -> Outcome {
    let spec = SynthSpec {
        train_trajectories: 24,
        eval_trajectories: 8,
        min_len: 8,
        max_len: 16,
        ..benchmark_spec()
    };
    let cfg = benchmark_config()
        .apply_text("epochs = 2\nbatch_size = 8")
        .expect("config");
    let once = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("pool");
        pool.install(|| {
            let bundle = generate(&spec).expect("data");
            let train_set = &bundle.split("train").expect("train split").records;
            let meta = train(train_set, &cfg).expect("training").params;
            let splits = eval_splits(&bundle);
            let reports: Vec<EvalReport> = Variant::ALL
                .into_iter()
                .map(|v| {
                    evaluate(
                        &splits,
                        &Estimator::Ttt {
                            meta: &meta,
                            cfg: AdaptConfig::for_variant(v),
                        },
                    )
                    .expect("evaluation")
                })
                .collect();
            (
                checkpoint::encode(&meta),
                eval::render(&reports, Format::Json),
                reports[0].predictions_csv(),
            )
        })
    };
    let a = once(1);
    let b = once(1);
    let c = once(4);
    let same = a == b && a == c;
    check(
        same,
        format!(
            "two runs on one thread and one on four threads give {} checkpoints ({} bytes) and reports",
            if same { "byte-identical" } else { "DIFFERENT" },
            a.0.len()
        ),
    )
}

fn format_robustness() -> Outcome {
    let bundle = generate(&SynthSpec {
        train_trajectories: 6,
        eval_trajectories: 2,
        ..SynthSpec::default()
    })
    .expect("data");
    let records = &bundle.split("train").expect("train split").records;
    let bytes = encode_container(records).expect("encode");
    let decoded = decode_container(&bytes).expect("decode");
    let exact = &decoded == records && encode_container(&decoded).expect("encode") == bytes;
    let panics = catch_unwind(AssertUnwindSafe(|| {
        let mut errors = 0usize;
        for cut in 0..bytes.len() {
            errors += decode_container(&bytes[..cut]).is_err() as usize;
        }
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        errors += decode_container(&bad).is_err() as usize;
        for dim in [0u32, 1, 15, 17, u32::MAX] {
            let mut bad = bytes.clone();
            bad[8..12].copy_from_slice(&dim.to_le_bytes());
            errors += decode_container(&bad).is_err() as usize;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..FUZZ_FLIPS {
            let mut bad = bytes.clone();
            for _ in 0..rng.random_range(1..4) {
                let i = rng.random_range(0..bad.len());
                bad[i] = rng.random();
            }
            let _ = decode_container(&bad);
        }
        errors
    }));
    let expected_errors = bytes.len() + 1 + 5;
    match panics {
        Ok(errors) => check(
            exact && errors == expected_errors,
            format!(
                "round trip {}; {errors}/{expected_errors} truncated, bad-magic and wrong-dim files rejected; {FUZZ_FLIPS} random corruptions without a panic",
                if exact { "bit-exact" } else { "NOT bit-exact" }
            ),
        ),
        Err(_) => check(false, "decoder panicked on corrupted input"),
    }
}

fn main() {
    let mut all_passed = true;
    let mut report = |id: usize, name: &str, f: &dyn Fn() -> Outcome| {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            check(false, format!("panicked: {msg}"))
        });
        all_passed &= outcome.passed;
        println!(
            "criterion {id} {name}: {} - {}",
            if outcome.passed { "PASS" } else { "FAIL" },
            outcome.detail
        );
    };
    report(1, "gradient integrity", &gradient_integrity);
    report(2, "oracle equivalence", &oracle_equivalence);
    report(3, "variant identities", &variant_identities);
    let bench = catch_unwind(run_benchmark).ok();
    match &bench {
        Some(b) => {
            report(4, "qualitative ordering", &|| ordering(b));
            report(5, "shift generalization", &|| shift_generalization(b));
        }
        None => {
            report(4, "qualitative ordering", &|| check(false, "benchmark run panicked"));
            report(5, "shift generalization", &|| check(false, "benchmark run panicked"));
        }
    }
    report(6, "determinism", &determinism);
    report(7, "format robustness", &format_robustness);
    if !all_passed {
        std::process::exit(1);
    }
}
