//! Built-in correctness checks: gradients, loss identities, matching and
//! determinism. Used by the `check` command and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{giou, iou, BBox};
use crate::matching::{hungarian, CostMatrix};
use crate::model::{Model, ModelConfig};
use crate::scenegen::{self, DifficultyProfile, SceneRecord, Split};
use crate::seeds::{derive, stream};
use crate::tensor::gradcheck::{op_suite, relative_error};
use crate::tensor::{softplus, Tape};
use crate::trainer::{scene_objective_with, train_step, AdamW, FrozenContext, TrainConfig, TrainError};
use crate::uncertainty::interaction_kl;

/// Tolerance for single-op gradient checks.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the full-model gradient check.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
/// Central-difference step for the full-model check. Larger than the op step:
/// round-off of an O(10) loss dominates below it.
pub const END_TO_END_STEP: f64 = 3e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub op_seeds: u64,
    pub model_cases: u64,
    pub matching_trials: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            op_seeds: 100,
            model_cases: 100,
            matching_trials: 1000,
        }
    }
}

/// Worst op gradient error over `seeds` seeds, with the op that produced it.
pub fn op_gradcheck(seeds: u64) -> Result<(f64, &'static str), crate::tensor::TensorError> {
    let mut worst = (0.0, "");
    for s in 0..seeds {
        for (name, err) in op_suite(s)? {
            if worst.1.is_empty() || err > worst.0 {
                worst = (err, name);
            }
        }
    }
    Ok(worst)
}

/// Model and training configuration of one end-to-end gradient case.
/// The cases cycle through the head variants and both loss settings.
pub fn gradcheck_case(case: u64) -> (ModelConfig, TrainConfig) {
    let mut m = ModelConfig::miniature();
    m.ffn_head_depth = 1 + (case % 2) as usize;
    m.additional_classifier = case % 4 == 3;
    let t = TrainConfig {
        seed: case,
        lambda_o: if case % 3 == 0 { 0.0 } else { 1.0 },
        interaction_refine: case % 5 != 1,
        ..TrainConfig::default()
    };
    (m, t)
}

/// Per-tensor relative error of the full objective's gradient on one case.
///
/// The matching, IoU weights and reference logits of the unperturbed point are
/// held fixed while probing, and every evaluation replays the same dropout masks.
/// `samples` coordinates per parameter tensor are probed.
pub fn end_to_end_gradcheck(case: u64, samples: usize) -> Result<Vec<(String, f64)>, TrainError> {
    end_to_end_gradcheck_step(case, samples, END_TO_END_STEP)
}

pub fn end_to_end_gradcheck_step(case: u64, samples: usize, h: f64) -> Result<Vec<(String, f64)>, TrainError> {
    let (mcfg, tcfg) = gradcheck_case(case);
    let record = gradcheck_scene(case)?;
    let mut model = Model::new(mcfg, derive(case, &[stream::INIT]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive(case, &[0x6772_6164]));
    // Zero-initialised biases put ReLU inputs exactly on the kink for flat image regions.
    for p in model.params_mut().iter_mut() {
        for x in &mut p.data {
            *x += rng.gen_range(-0.05..0.05);
        }
    }
    let tape_seed = derive(case, &[stream::TRAIN_TAPE]);

    let mut t = Tape::new(tape_seed);
    let p = model.bind(&mut t, true);
    let (loss, frozen) = scene_objective_with(&model, &mut t, &p, &record, &tcfg, None)?;
    t.backward(loss.total).map_err(crate::model::ModelError::from)?;
    let grads = p.gradients(&t, model.params());

    let eval = |model: &Model, frozen: &FrozenContext| -> Result<f64, TrainError> {
        let mut t = Tape::new(tape_seed);
        let p = model.bind(&mut t, false);
        let (loss, _) = scene_objective_with(model, &mut t, &p, &record, &tcfg, Some(frozen))?;
        Ok(t.item(loss.total))
    };

    let mut out = Vec::with_capacity(grads.len());
    for (i, g) in grads.iter().enumerate() {
        let n = g.len();
        let coords: Vec<usize> = if n <= samples {
            (0..n).collect()
        } else {
            (0..samples).map(|_| rng.gen_range(0..n)).collect()
        };
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &k in &coords {
            let orig = model.params().by_index(i).data[k];
            model.params_mut().by_index_mut(i).data[k] = orig + h;
            let up = eval(&model, &frozen)?;
            model.params_mut().by_index_mut(i).data[k] = orig - h;
            let down = eval(&model, &frozen)?;
            model.params_mut().by_index_mut(i).data[k] = orig;
            analytic.push(g[k]);
            numeric.push((up - down) / (2.0 * h));
        }
        out.push((model.params().by_index(i).name.clone(), relative_error(&analytic, &numeric)));
    }
    Ok(out)
}

fn gradcheck_scene(case: u64) -> Result<SceneRecord, TrainError> {
    let scenes = scenegen::generate(case, 1, &DifficultyProfile::default(), Split::Train)
        .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    Ok(scenes.into_iter().next().expect("one scene requested"))
}

/// Exhaustive minimum-cost assignment of every column to a distinct row.
pub fn brute_force_assignment(m: &CostMatrix) -> f64 {
    fn go(m: &CostMatrix, col: usize, used: &mut [bool]) -> f64 {
        if col == m.cols() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for r in 0..m.rows() {
            if !used[r] {
                used[r] = true;
                best = best.min(m.get(r, col) + go(m, col + 1, used));
                used[r] = false;
            }
        }
        best
    }
    go(m, 0, &mut vec![false; m.rows()])
}

/// Largest gap between the solver's cost and brute force over `trials` random
/// matrices up to 7x7 (at least as many rows, i.e. predictions, as columns).
pub fn hungarian_vs_brute_force(trials: usize, seed: u64) -> Result<f64, crate::matching::MatchingError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let r = rng.gen_range(1..=7);
        let c = rng.gen_range(1..=r);
        let data: Vec<f64> = (0..r * c)
            .map(|_| {
                if rng.gen_bool(0.3) {
                    rng.gen_range(0..4) as f64
                } else {
                    rng.gen_range(-5.0..5.0)
                }
            })
            .collect();
        let m = CostMatrix::new(r, c, data)?;
        let a = hungarian(&m)?;
        worst = worst.max((a.cost(&m) - brute_force_assignment(&m)).abs());
    }
    Ok(worst)
}

fn identity_checks() -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let sp = softplus(0.0);
    out.push(CheckOutcome::new(
        "softplus(0) = ln 2",
        (sp - std::f64::consts::LN_2).abs() <= 1e-12,
        format!("{sp:.17}"),
    ));
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut kl_self: f64 = 0.0;
    let mut kl_min = f64::INFINITY;
    for _ in 0..200 {
        let n = rng.gen_range(2..10);
        let a = random_simplex(&mut rng, n);
        let b = random_simplex(&mut rng, n);
        kl_self = kl_self.max(interaction_kl(&a, &a).abs());
        kl_min = kl_min.min(interaction_kl(&a, &b));
    }
    out.push(CheckOutcome::new(
        "KL(y, y) = 0 and KL >= 0",
        kl_self <= 1e-9 && kl_min >= 0.0,
        format!("max |KL(y,y)| {kl_self:.3e}, min KL {kl_min:.3e}"),
    ));
    let a = BBox::new(0.0, 0.0, 1.0, 1.0).expect("valid");
    let b = BBox::new(0.5, 0.0, 1.5, 1.0).expect("valid");
    let c = BBox::new(2.0, 0.0, 3.0, 1.0).expect("valid");
    let ok = (iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12 && (giou(&a, &c) + 1.0 / 3.0).abs() < 1e-12;
    out.push(CheckOutcome::new(
        "IoU / GIoU reference values",
        ok,
        format!("iou {:.6}, giou {:.6}", iou(&a, &b), giou(&a, &c)),
    ));
    out
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

/// Generates, trains two steps and re-does both; true when everything matches bitwise.
pub fn determinism_check(seed: u64) -> Result<bool, TrainError> {
    let run = || -> Result<(Vec<SceneRecord>, Vec<u64>), TrainError> {
        let scenes = scenegen::generate(seed, 4, &DifficultyProfile::default(), Split::Train)
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        let mut model = Model::new(ModelConfig::miniature(), derive(seed, &[stream::INIT]))?;
        let mut opt = AdamW::new(model.params());
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let batch: Vec<&SceneRecord> = scenes.iter().collect();
        let mut bits = Vec::new();
        for _ in 0..2 {
            bits.push(train_step(&mut model, &mut opt, &batch, &cfg)?.total.to_bits());
        }
        bits.extend(model.params().iter().flat_map(|p| p.data.iter().map(|x| x.to_bits())));
        Ok((scenes, bits))
    };
    Ok(run()? == run()?)
}

/// Runs every check; never panics on a failing check.
pub fn run_all(opts: &CheckOptions) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    out.push(match op_gradcheck(opts.op_seeds) {
        Ok((err, op)) => CheckOutcome::new(
            "op gradients",
            err < OP_TOLERANCE,
            format!("{} seeds, max rel. error {err:.3e} ({op})", opts.op_seeds),
        ),
        Err(e) => CheckOutcome::new("op gradients", false, e.to_string()),
    });
    let mut worst = (0.0, String::new());
    let mut failure = None;
    for case in 0..opts.model_cases {
        match end_to_end_gradcheck(case, 3) {
            Ok(errs) => {
                for (name, e) in errs {
                    if e > worst.0 {
                        worst = (e, format!("case {case}, {name}"));
                    }
                }
            }
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        }
    }
    out.push(match failure {
        None => CheckOutcome::new(
            "end-to-end gradients",
            worst.0 < END_TO_END_TOLERANCE,
            format!("{} cases, max rel. error {:.3e} ({})", opts.model_cases, worst.0, worst.1),
        ),
        Some(e) => CheckOutcome::new("end-to-end gradients", false, e),
    });
    out.extend(identity_checks());
    out.push(match hungarian_vs_brute_force(opts.matching_trials, 11) {
        Ok(gap) => CheckOutcome::new(
            "assignment vs brute force",
            gap < 1e-9,
            format!("{} matrices, max cost gap {gap:.3e}", opts.matching_trials),
        ),
        Err(e) => CheckOutcome::new("assignment vs brute force", false, e.to_string()),
    });
    out.push(match determinism_check(5) {
        Ok(same) => CheckOutcome::new("determinism", same, "scenes and two training steps replayed".into()),
        Err(e) => CheckOutcome::new("determinism", false, e.to_string()),
    });
    out
}
