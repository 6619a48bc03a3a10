//! Acceptance suite: prints one PASS/FAIL line per criterion and exits 1 if
//! any criterion fails.
//!
//! Environment:
//! - `HOIU_ACCEPTANCE_ONLY=1,3,8` runs a subset of criteria.
//! - `HOIU_ACCEPTANCE_STEPS=N` overrides the training length of criteria 5, 6,
//!   7 and 9 (the timing bound of criterion 5 still applies).

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use common::{fixture_detections, fixture_truth, FIXTURE_MAP, RARE};
use hoiu::evaluator::ablation::{evaluate_model, EvalConfig, ModelEvaluation, Variant};
use hoiu::evaluator::{hoi_map, infer_all, EvalSet, Selection, IOU_THRESHOLD};
use hoiu::matching::{hungarian, CostMatrix};
use hoiu::model::{Model, ModelConfig};
use hoiu::scenegen::{write_jsonl, Benchmark, BenchmarkSpec, SceneRecord};
use hoiu::seeds::{derive, stream};
use hoiu::selfcheck::{
    brute_force_assignment, end_to_end_gradcheck, op_gradcheck, END_TO_END_TOLERANCE, OP_TOLERANCE,
};
use hoiu::tensor::{softplus, Tape};
use hoiu::trainer::{evaluate_loss, fit, scene_objective, train_step, TrainConfig, TrainLog, TrainState};
use hoiu::uncertainty::{gaussian_nll_raw, interaction_kl, interaction_loss, InteractionPair, LossBreakdown};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRADCHECK_CASES: u64 = 100;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const TRAIN_BUDGET: Duration = Duration::from_secs(600);
const VAL_RATIO: f64 = 0.5;
const OVERFIT_STEPS: u64 = 500;
const OVERFIT_RATIO: f64 = 0.1;
const SEEDS: [u64; 3] = [0, 1, 2];
const SWEEP: [f64; 3] = [0.5, 0.7, 0.9];

struct Line {
    criterion: u32,
    passed: bool,
    detail: String,
}

fn line(criterion: u32, passed: bool, detail: String) -> Line {
    let l = Line { criterion, passed, detail };
    println!(
        "criterion {}: {} {}",
        l.criterion,
        if l.passed { "PASS" } else { "FAIL" },
        l.detail
    );
    l
}

/// One trained variant: its model, log, training time and test evaluation.
struct Trained {
    log: TrainLog,
    train_time: Duration,
    eval: ModelEvaluation,
    variant: Variant,
}

impl Trained {
    fn headline_map(&self) -> f64 {
        self.eval.headline(self.variant.headline).map_full
    }
}

/// Lazily trained runs shared by criteria 5, 6, 7 and 9.
struct Runs {
    bench: Benchmark,
    train: TrainConfig,
    done: BTreeMap<(String, u64), Trained>,
}

impl Runs {
    fn new(steps: Option<u64>) -> Self {
        let bench = Benchmark::generate(&BenchmarkSpec::default()).expect("default benchmark");
        let mut train = TrainConfig::default();
        if let Some(s) = steps {
            train.steps = s;
        }
        Self {
            bench,
            train,
            done: BTreeMap::new(),
        }
    }

    fn get(&mut self, variant: &Variant, seed: u64) -> &Trained {
        let key = (variant.label.clone(), seed);
        if !self.done.contains_key(&key) {
            let (m, t) = variant.configs(&ModelConfig::default(), &self.train, seed);
            let model = Model::new(m, derive(seed, &[stream::INIT])).expect("valid model");
            let mut state = TrainState::new(model);
            let start = Instant::now();
            fit(&mut state, &self.bench.train, &self.bench.val, &t, None).expect("training");
            let train_time = start.elapsed();
            let eval = evaluate_model(&state.model, &self.bench, &EvalConfig::default()).expect("evaluation");
            eprintln!(
                "  trained {:?} seed {seed}: {:.0}s, headline mAP {:.4}, adaptive {:.4}, fixed {:.4} (tau {})",
                variant.label,
                train_time.as_secs_f64(),
                eval.headline(variant.headline).map_full,
                eval.adaptive.map_full,
                eval.fixed.map_full,
                eval.best_threshold
            );
            self.done.insert(
                key.clone(),
                Trained {
                    log: state.log,
                    train_time,
                    eval,
                    variant: variant.clone(),
                },
            );
        }
        &self.done[&key]
    }

    fn mean(&mut self, variant: &Variant, f: impl Fn(&Trained) -> f64) -> f64 {
        SEEDS.iter().map(|&s| f(self.get(variant, s))).sum::<f64>() / SEEDS.len() as f64
    }
}

fn dropout(rate: f64) -> Variant {
    Variant {
        label: format!("+ MC dropout {rate}"),
        dropout_rate: Some(rate),
        ..Variant::both()
    }
}

/// The sweep point at the default rate is the `+ both` run itself.
fn sweep_variant(rate: f64) -> Variant {
    if rate == ModelConfig::default().dropout_rate {
        Variant::both()
    } else {
        dropout(rate)
    }
}

fn non_nll(b: &LossBreakdown) -> f64 {
    b.l_loc_h + b.l_loc_o + b.l_inter
}

fn criterion_1() -> Line {
    let start = Instant::now();
    let ops = op_gradcheck(GRADCHECK_CASES);
    let mut worst = (0.0f64, String::new());
    let mut error = None;
    for case in 0..GRADCHECK_CASES {
        match end_to_end_gradcheck(case, 3) {
            Ok(errs) => {
                for (name, e) in errs {
                    if e > worst.0 {
                        worst = (e, format!("case {case} {name}"));
                    }
                }
            }
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        }
    }
    let elapsed = start.elapsed();
    match (ops, error) {
        (Ok((op_err, op)), None) => line(
            1,
            op_err < OP_TOLERANCE && worst.0 < END_TO_END_TOLERANCE && elapsed < GRADCHECK_BUDGET,
            format!(
                "op max rel err {op_err:.2e} ({op}) < {OP_TOLERANCE:.0e}; end-to-end max rel err {:.2e} ({}) < {END_TO_END_TOLERANCE:.0e}; {GRADCHECK_CASES} cases each in {:.1}s < {}s",
                worst.0,
                worst.1,
                elapsed.as_secs_f64(),
                GRADCHECK_BUDGET.as_secs()
            ),
        ),
        (Err(e), _) => line(1, false, format!("op gradcheck error: {e}")),
        (_, Some(e)) => line(1, false, format!("end-to-end gradcheck error: {e}")),
    }
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.001..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn criterion_2() -> Line {
    let sp_err = (softplus(0.0) - std::f64::consts::LN_2).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut kl_self, mut kl_min) = (0.0f64, f64::INFINITY);
    let mut ce_gap = 0.0f64;
    for _ in 0..1000 {
        let k = rng.gen_range(2..10);
        let a = random_simplex(&mut rng, k);
        let b = random_simplex(&mut rng, k);
        kl_self = kl_self.max(interaction_kl(&a, &a).abs());
        kl_min = kl_min.min(interaction_kl(&a, &b));

        let n = rng.gen_range(1..6);
        let ys: Vec<Vec<f64>> = (0..n).map(|_| random_simplex(&mut rng, k)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let pairs: Vec<InteractionPair> = ys.iter().map(|y| InteractionPair::new(y.clone(), y.clone())).collect();
        let mean_ce = ys.iter().zip(&labels).map(|(y, &l)| -y[l].ln()).sum::<f64>() / n as f64;
        ce_gap = ce_gap.max((interaction_loss(&pairs, &labels).expect("valid labels") - mean_ce).abs());
    }

    // Full model with dropout disabled: the coupled loss equals plain cross-entropy.
    let model = Model::new(
        ModelConfig {
            dropout_rate: 0.0,
            ..ModelConfig::default()
        },
        4,
    )
    .expect("valid model");
    let scenes = hoiu::scenegen::generate(2, 5, &Default::default(), hoiu::scenegen::Split::Train).expect("scenes");
    let mut model_gap = 0.0f64;
    for record in &scenes {
        let l_inter = |refine: bool| {
            let tc = TrainConfig {
                interaction_refine: refine,
                ..TrainConfig::default()
            };
            let mut t = Tape::new(0);
            let p = model.bind(&mut t, true);
            scene_objective(&model, &mut t, &p, record, &tc).expect("objective").breakdown.l_inter
        };
        model_gap = model_gap.max((l_inter(true) - l_inter(false)).abs());
    }

    let mut slope_max = 0.0f64;
    let mut minimum = true;
    for _ in 0..1000 {
        let mu = rng.gen_range(-1.0..1.0);
        let r: f64 = rng.gen_range(0.01..1.0);
        let w = rng.gen_range(0.1..1.0);
        let c = rng.gen_range(0..4);
        let mut target = [mu; 4];
        target[c] += r;
        let at = |v: f64| {
            let mut var = [1.0; 4];
            var[c] = v;
            gaussian_nll_raw(&[mu; 4], &var, &target, w)
        };
        let v = r * r;
        let h = 1e-3 * v;
        let slope = (at(v - 2.0 * h) - 8.0 * at(v - h) + 8.0 * at(v + h) - at(v + 2.0 * h)) / (12.0 * h);
        slope_max = slope_max.max(slope.abs());
        minimum &= at(v) < at(0.9 * v) && at(v) < at(1.1 * v);
    }

    let passed = sp_err <= 1e-12
        && kl_self <= 1e-9
        && kl_min >= 0.0
        && ce_gap <= 1e-12
        && model_gap <= 1e-12
        && slope_max <= 1e-6
        && minimum;
    line(
        2,
        passed,
        format!(
            "|softplus(0)-ln2| {sp_err:.1e} <= 1e-12; max |KL(y,y)| {kl_self:.1e} <= 1e-9, min KL {kl_min:.2e} >= 0; \
             loss vs mean CE gap {ce_gap:.1e} (scalar), {model_gap:.1e} (model) <= 1e-12; \
             NLL slope at sigma^2=r^2 {slope_max:.1e} <= 1e-6, minimum {minimum}"
        ),
    )
}

fn criterion_3() -> Line {
    // Costs are multiples of 1/8, so every sum is exact and costs compare with ==.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let trials = 1000;
    let mut mismatches = 0;
    let mut largest = (0, 0);
    for _ in 0..trials {
        let r = rng.gen_range(1..=7);
        let c = rng.gen_range(1..=r);
        let data: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-40..=40) as f64 / 8.0).collect();
        let m = CostMatrix::new(r, c, data).expect("valid matrix");
        let a = hungarian(&m).expect("solvable");
        if a.cost(&m) != brute_force_assignment(&m) {
            mismatches += 1;
        }
        largest = largest.max((r, c));
    }
    line(
        3,
        mismatches == 0,
        format!("{mismatches} of {trials} random matrices (up to {}x{}) differ from exhaustive search", largest.0, largest.1),
    )
}

fn criterion_4() -> Line {
    match hoi_map(&fixture_detections(), &fixture_truth(), &RARE, IOU_THRESHOLD, "fixture") {
        Ok(r) => line(
            4,
            (r.map_full - FIXTURE_MAP).abs() <= 1e-9,
            format!("mAP {:.12} vs hand value {FIXTURE_MAP} (tol 1e-9)", r.map_full),
        ),
        Err(e) => line(4, false, e.to_string()),
    }
}

fn overfit(train: &TrainConfig) -> (LossBreakdown, LossBreakdown) {
    let bench = Benchmark::generate(&BenchmarkSpec {
        train: 1,
        val: 1,
        test: 1,
        ..BenchmarkSpec::default()
    })
    .expect("scene");
    let record: &SceneRecord = &bench.train[0];
    let cfg = TrainConfig {
        batch_size: 1,
        ..train.clone()
    };
    let mut state = TrainState::new(Model::new(ModelConfig::default(), derive(0, &[stream::INIT])).expect("model"));
    let single = std::slice::from_ref(record);
    let before = evaluate_loss(&state.model, single, &cfg).expect("loss");
    for _ in 0..OVERFIT_STEPS {
        train_step(&mut state.model, &mut state.opt, &[record], &cfg).expect("step");
    }
    (before, evaluate_loss(&state.model, single, &cfg).expect("loss"))
}

fn criterion_5(runs: &mut Runs) -> Line {
    let train = runs.train.clone();
    let t = runs.get(&Variant::both(), 0);
    let first = t.log.val.first().map(|v| v.1);
    let last = t.log.val.last().map(|v| v.1);
    let (Some(a), Some(b)) = (first, last) else {
        return line(5, false, "no validation losses recorded".into());
    };
    let time = t.train_time;
    let val_total = b.total <= VAL_RATIO * a.total;
    let val_parts = non_nll(&b) <= VAL_RATIO * non_nll(&a);
    let (o0, o1) = overfit(&train);
    let fit_total = o1.total < OVERFIT_RATIO * o0.total;
    let fit_parts = non_nll(&o1) < OVERFIT_RATIO * non_nll(&o0);
    line(
        5,
        time < TRAIN_BUDGET && val_total && val_parts && fit_total && fit_parts,
        format!(
            "{} scenes x {} steps trained in {:.0}s < {}s; val total {:.3} -> {:.3}, without NLL {:.3} -> {:.3} (<= {VAL_RATIO}x); \
             single scene {OVERFIT_STEPS} steps total {:.3} -> {:.3}, without NLL {:.3} -> {:.3} (< {OVERFIT_RATIO}x)",
            runs.bench.train.len(),
            train.steps,
            time.as_secs_f64(),
            TRAIN_BUDGET.as_secs(),
            a.total,
            b.total,
            non_nll(&a),
            non_nll(&b),
            o0.total,
            o1.total,
            non_nll(&o0),
            non_nll(&o1),
        ),
    )
}

fn criterion_6(runs: &mut Runs) -> Line {
    let fixed = runs.mean(&Variant::fixed_threshold(), Trained::headline_map);
    let loc = runs.mean(&Variant::localization_refine(), Trained::headline_map);
    let both = runs.mean(&Variant::both(), Trained::headline_map);
    line(
        6,
        fixed <= loc && loc <= both && both > fixed,
        format!("3-seed mean mAP: fixed threshold {fixed:.4} <= + localization refine {loc:.4} <= + both {both:.4}"),
    )
}

fn criterion_7(runs: &mut Runs) -> Line {
    let fixed = runs.mean(&Variant::both(), |t| t.eval.fixed.subtle_true_positives as f64);
    let adaptive = runs.mean(&Variant::both(), |t| t.eval.adaptive_equal_count.subtle_true_positives as f64);
    let count = runs.mean(&Variant::both(), |t| t.eval.fixed.detections as f64);
    let gt = runs.mean(&Variant::both(), |t| t.eval.fixed.subtle_ground_truth as f64);
    line(
        7,
        adaptive > fixed,
        format!(
            "3-seed mean subtle-verb TPs at {count:.1} detections: adaptive {adaptive:.2} vs best fixed threshold {fixed:.2} (of {gt:.0})"
        ),
    )
}

fn criterion_8() -> Line {
    let dir = tempfile::tempdir().expect("temp dir");
    let spec = BenchmarkSpec::default();
    let dataset = |name: &str| {
        let b = Benchmark::generate(&spec).expect("benchmark");
        let mut bytes = Vec::new();
        for (split, records) in [("train", &b.train), ("val", &b.val), ("test", &b.test)] {
            let path = dir.path().join(format!("{name}-{split}.jsonl"));
            write_jsonl(&path, spec.seed, &spec.profile, records).expect("write");
            bytes.extend(std::fs::read(&path).expect("read"));
        }
        (b, bytes)
    };
    let (bench, first) = dataset("a");
    let same_data = first == dataset("b").1;

    let cfg = TrainConfig {
        steps: 20,
        ..TrainConfig::default()
    };
    let test = &bench.test[..50];
    let run = || {
        let mut state = TrainState::new(Model::new(ModelConfig::default(), derive(0, &[stream::INIT])).expect("model"));
        fit(&mut state, &bench.train, &bench.val[..20], &cfg, None).expect("training");
        let preds = infer_all(&state.model, test, 5, 0).expect("inference");
        let set = EvalSet::new(&preds, test, bench.spec.profile.rare_verbs());
        let reports: Vec<String> = [Selection::Adaptive { top_k: 16 }, Selection::Fixed { threshold: 0.1 }]
            .into_iter()
            .map(|s| serde_json::to_string(&set.evaluate(s).expect("report")).expect("json"))
            .collect();
        (state.log.train_csv(), state.log.val_csv(), reports)
    };
    let (a, b) = (run(), run());
    let same_csv = a.0 == b.0 && a.1 == b.1;
    let same_reports = a.2 == b.2;
    line(
        8,
        same_data && same_csv && same_reports,
        format!(
            "dataset bytes identical {same_data} ({} bytes); loss CSVs identical {same_csv}; EvalReports identical {same_reports}",
            first.len()
        ),
    )
}

fn criterion_9(runs: &mut Runs) -> Line {
    let maps: Vec<f64> = SWEEP.iter().map(|&r| runs.mean(&sweep_variant(r), Trained::headline_map)).collect();
    let range = maps.iter().copied().fold(f64::NEG_INFINITY, f64::max) - maps.iter().copied().fold(f64::INFINITY, f64::min);
    let gap = runs.mean(&Variant::both(), Trained::headline_map) - runs.mean(&Variant::fixed_threshold(), Trained::headline_map);
    let listed: Vec<String> = SWEEP.iter().zip(&maps).map(|(r, m)| format!("{r}: {m:.4}")).collect();
    line(
        9,
        maps.iter().all(|m| m.is_finite()) && range < gap,
        format!("3-seed mean mAP by dropout rate [{}]; range {range:.4} < baseline-to-both gap {gap:.4}", listed.join(", ")),
    )
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("HOIU_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let steps: Option<u64> = std::env::var("HOIU_ACCEPTANCE_STEPS").ok().and_then(|s| s.parse().ok());
    let wanted = |c: u32| only.as_ref().map_or(true, |o| o.contains(&c));
    let mut runs = Runs::new(steps);
    if let Some(s) = steps {
        println!("note: training length overridden to {s} steps");
    }

    let mut lines = Vec::new();
    let checks: [(u32, &dyn Fn(&mut Runs) -> Line); 9] = [
        (1, &|_| criterion_1()),
        (2, &|_| criterion_2()),
        (3, &|_| criterion_3()),
        (4, &|_| criterion_4()),
        (5, &criterion_5),
        (6, &criterion_6),
        (7, &criterion_7),
        (8, &|_| criterion_8()),
        (9, &criterion_9),
    ];
    for (c, check) in checks {
        if wanted(c) {
            lines.push(check(&mut runs));
        }
    }
    let failed = lines.iter().filter(|l| !l.passed).count();
    println!("{} of {} criteria passed", lines.len() - failed, lines.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
