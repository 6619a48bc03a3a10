//! Train-and-evaluate harness for component, dropout and loss-weight ablations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AblationRow, EvalError, EvalReport, EvalSet, Selection, DEFAULT_TOP_K};
use crate::model::{Model, ModelConfig};
use crate::scenegen::Benchmark;
use crate::seeds::{derive, stream};
use crate::trainer::{fit, TrainConfig, TrainError, TrainLog, TrainState};

/// Default number of stochastic passes at inference.
pub const DEFAULT_PASSES: usize = 5;

/// Loss-weight grid shared by both sensitivity sweeps.
pub const LAMBDA_GRID: [f64; 5] = [0.01, 0.1, 0.5, 1.0, 2.0];
pub const DROPOUT_RATES: [f64; 3] = [0.5, 0.7, 0.9];

#[derive(Debug, thiserror::Error)]
pub enum AblationError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// How the headline metric of a row is read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Headline {
    /// Best fixed threshold of the declared grid.
    Fixed,
    /// Adaptive calibrated ranking with a per-scene top-k cut.
    Adaptive,
}

/// A training recipe relative to the base configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub lambda_o: f64,
    pub lambda_a: f64,
    pub interaction_refine: bool,
    pub dropout_rate: Option<f64>,
    pub ffn_head_depth: Option<usize>,
    pub additional_classifier: bool,
    pub headline: Headline,
}

impl Variant {
    fn base(label: &str, lambda_o: f64, interaction_refine: bool, headline: Headline) -> Self {
        Self {
            label: label.to_string(),
            lambda_o,
            lambda_a: 1.0,
            interaction_refine,
            dropout_rate: None,
            ffn_head_depth: None,
            additional_classifier: false,
            headline,
        }
    }

    pub fn fixed_threshold() -> Self {
        Self::base("fixed threshold", 0.0, false, Headline::Fixed)
    }

    pub fn localization_refine() -> Self {
        Self::base("+ localization refine", 1.0, false, Headline::Fixed)
    }

    pub fn interaction_refine() -> Self {
        Self::base("+ interaction refine", 0.0, true, Headline::Adaptive)
    }

    pub fn both() -> Self {
        Self::base("+ both", 1.0, true, Headline::Adaptive)
    }

    pub fn configs(&self, model: &ModelConfig, train: &TrainConfig, seed: u64) -> (ModelConfig, TrainConfig) {
        let mut m = model.clone();
        if let Some(r) = self.dropout_rate {
            m.dropout_rate = r;
        }
        if let Some(d) = self.ffn_head_depth {
            m.ffn_head_depth = d;
        }
        m.additional_classifier = self.additional_classifier;
        let t = TrainConfig {
            lambda_o: self.lambda_o,
            lambda_a: self.lambda_a,
            interaction_refine: self.interaction_refine,
            seed,
            ..train.clone()
        };
        (m, t)
    }

    fn provenance(&self, m: &ModelConfig, t: &TrainConfig) -> BTreeMap<String, String> {
        let mut c = BTreeMap::new();
        c.insert("lambda_o".into(), t.lambda_o.to_string());
        c.insert("lambda_a".into(), t.lambda_a.to_string());
        c.insert("interaction_refine".into(), t.interaction_refine.to_string());
        c.insert("dropout_rate".into(), m.dropout_rate.to_string());
        c.insert("ffn_head_depth".into(), m.ffn_head_depth.to_string());
        c.insert("additional_classifier".into(), m.additional_classifier.to_string());
        c.insert("steps".into(), t.steps.to_string());
        c.insert("headline".into(), format!("{:?}", self.headline).to_lowercase());
        c
    }
}

pub fn component_variants() -> Vec<Variant> {
    vec![
        Variant::fixed_threshold(),
        Variant::localization_refine(),
        Variant::interaction_refine(),
        Variant::both(),
    ]
}

pub fn dropout_variants() -> Vec<Variant> {
    let mut out: Vec<Variant> = DROPOUT_RATES
        .iter()
        .map(|&r| Variant {
            label: format!("+ MC dropout {r}"),
            dropout_rate: Some(r),
            ..Variant::both()
        })
        .collect();
    out.push(Variant {
        label: "two FFN layers".into(),
        ffn_head_depth: Some(2),
        ..Variant::both()
    });
    out.push(Variant {
        label: "+ additional classifier".into(),
        additional_classifier: true,
        ..Variant::both()
    });
    out
}

pub fn lambda_variants(grid: &[f64]) -> Vec<Variant> {
    let mut out = Vec::new();
    for &l in grid {
        out.push(Variant {
            label: format!("lambda_o={l}"),
            lambda_o: l,
            ..Variant::both()
        });
    }
    for &l in grid {
        out.push(Variant {
            label: format!("lambda_a={l}"),
            lambda_a: l,
            ..Variant::both()
        });
    }
    out
}

/// Evaluation knobs shared by all rows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub passes: usize,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            passes: DEFAULT_PASSES,
            top_k: DEFAULT_TOP_K,
            seed: 0,
        }
    }
}

/// Both inference rules applied to one trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelEvaluation {
    pub best_threshold: f64,
    pub fixed: EvalReport,
    pub adaptive: EvalReport,
    /// Adaptive selection with as many detections as the best fixed threshold keeps.
    pub adaptive_equal_count: EvalReport,
}

impl ModelEvaluation {
    pub fn headline(&self, h: Headline) -> &EvalReport {
        match h {
            Headline::Fixed => &self.fixed,
            Headline::Adaptive => &self.adaptive,
        }
    }
}

pub fn evaluate_model(model: &Model, bench: &Benchmark, eval: &EvalConfig) -> Result<ModelEvaluation, AblationError> {
    let preds = super::infer_all(model, &bench.test, eval.passes, eval.seed)?;
    let set = EvalSet::new(&preds, &bench.test, bench.spec.profile.rare_verbs());
    let (tau, fixed) = set.best_fixed()?;
    let adaptive = set.evaluate(Selection::Adaptive { top_k: eval.top_k })?;
    let adaptive_equal_count = set.evaluate_adaptive_count(fixed.detections)?;
    Ok(ModelEvaluation {
        best_threshold: tau,
        fixed,
        adaptive,
        adaptive_equal_count,
    })
}

fn metrics(e: &ModelEvaluation, headline: Headline) -> BTreeMap<String, f64> {
    let h = e.headline(headline);
    let mut m = BTreeMap::new();
    m.insert("map".into(), h.map_full);
    m.insert("map_rare".into(), h.map_rare.unwrap_or(f64::NAN));
    m.insert("map_common".into(), h.map_common.unwrap_or(f64::NAN));
    m.insert("map_fixed".into(), e.fixed.map_full);
    m.insert("best_threshold".into(), e.best_threshold);
    m.insert("map_adaptive".into(), e.adaptive.map_full);
    m.insert("detections_fixed".into(), e.fixed.detections as f64);
    m.insert("subtle_tp_fixed".into(), e.fixed.subtle_true_positives as f64);
    m.insert("subtle_tp_adaptive".into(), e.adaptive_equal_count.subtle_true_positives as f64);
    m.insert("subtle_gt".into(), e.fixed.subtle_ground_truth as f64);
    m
}

/// Rows for already-trained models, one per `(label, model, headline)`.
pub fn threshold_ablation(
    models: &[(String, &Model, Headline)],
    bench: &Benchmark,
    eval: &EvalConfig,
) -> Result<Vec<AblationRow>, AblationError> {
    models
        .iter()
        .map(|(label, model, headline)| {
            let e = evaluate_model(model, bench, eval)?;
            Ok(AblationRow {
                label: label.clone(),
                seed: eval.seed,
                config: BTreeMap::new(),
                metrics: metrics(&e, *headline),
            })
        })
        .collect()
}

/// Everything produced by one trained variant.
pub struct RunOutcome {
    pub variant: Variant,
    pub seed: u64,
    pub model: Model,
    pub log: TrainLog,
    pub evaluation: ModelEvaluation,
    pub row: AblationRow,
}

/// Trains `variant` from scratch with `seed` and evaluates it on the test split.
pub fn run_variant(
    bench: &Benchmark,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    eval: &EvalConfig,
    variant: &Variant,
    seed: u64,
) -> Result<RunOutcome, AblationError> {
    let (m, t) = variant.configs(model_cfg, train_cfg, seed);
    let model = Model::new(m.clone(), derive(seed, &[stream::INIT]))?;
    let mut state = TrainState::new(model);
    fit(&mut state, &bench.train, &bench.val, &t, None)?;
    let evaluation = evaluate_model(&state.model, bench, eval)?;
    let mut metrics = metrics(&evaluation, variant.headline);
    if let (Some(a), Some(b)) = (state.log.initial_val(), state.log.final_val()) {
        metrics.insert("val_loss_initial".into(), a);
        metrics.insert("val_loss_final".into(), b);
    }
    let row = AblationRow {
        label: variant.label.clone(),
        seed,
        config: variant.provenance(&m, &t),
        metrics,
    };
    Ok(RunOutcome {
        variant: variant.clone(),
        seed,
        model: state.model,
        log: state.log,
        evaluation,
        row,
    })
}

/// Runs every variant for every seed, calling `progress` after each run.
pub fn run_suite(
    bench: &Benchmark,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    eval: &EvalConfig,
    variants: &[Variant],
    seeds: &[u64],
    mut progress: impl FnMut(&RunOutcome),
) -> Result<Vec<AblationRow>, AblationError> {
    let mut rows = Vec::new();
    for v in variants {
        for &s in seeds {
            let out = run_variant(bench, model_cfg, train_cfg, eval, v, s)?;
            progress(&out);
            rows.push(out.row);
        }
    }
    Ok(rows)
}

/// Mean of `metric` over rows with `label`.
pub fn mean_metric(rows: &[AblationRow], label: &str, metric: &str) -> Option<f64> {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.label == label)
        .filter_map(|r| r.metrics.get(metric).copied())
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
