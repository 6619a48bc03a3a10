//! HOI detection metrics and the ablation harness.
//!
//! Every prediction slot expands into one candidate triplet per verb, scored
//! `p_human · p_object · p_verb` (raw) and additionally multiplied by
//! `exp(−inter_var)` (calibrated). A selection rule then decides which
//! candidates are kept and which score ranks them:
//!
//! * fixed threshold: keep raw scores `≥ τ`, rank by raw score;
//! * adaptive: keep the top `k` calibrated candidates of every scene, rank by
//!   calibrated score.
//!
//! [`hoi_map`] computes per-verb average precision over the kept candidates.

pub mod ablation;
pub mod plot;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, BBox};
use crate::model::{HoiPrediction, Model, ModelError};
use crate::scenegen::{admissible_objects, is_subtle, render, GroundTruthTriplet, SceneRecord, VERBS};
use crate::seeds::{derive, stream};
use crate::uncertainty::predict;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no test scenes")]
    EmptyTestSet,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("evaluation i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("report serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// One candidate `<human, verb, object>` triplet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scene: usize,
    pub slot: usize,
    pub human_box: BBox,
    pub object_box: BBox,
    pub object_class: usize,
    pub verb: usize,
    pub raw_score: f64,
    pub calibrated_score: f64,
    /// Ranking score under the active selection rule.
    pub score: f64,
}

/// Ground truth of one scene plus the object classes present in it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneTruth {
    pub triplets: Vec<GroundTruthTriplet>,
    pub object_classes: Vec<usize>,
}

impl SceneTruth {
    pub fn from_record(r: &SceneRecord) -> Self {
        let mut object_classes: Vec<usize> = r.object_classes().collect();
        object_classes.sort_unstable();
        object_classes.dedup();
        Self {
            triplets: r.ground_truth(),
            object_classes,
        }
    }
}

/// Expands slot predictions into per-verb candidates (background excluded).
pub fn candidates(scene: usize, preds: &[HoiPrediction]) -> Vec<Detection> {
    let mut out = Vec::new();
    for (slot, p) in preds.iter().enumerate() {
        let n_obj = p.object_probs.len() - 1;
        let n_verb = p.verb_probs.len() - 1;
        let (object_class, p_obj) = p.object_probs[..n_obj]
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, v)| if v > best.1 { (k, v) } else { best });
        let base = p.human_probs[0] * p_obj;
        let damp = (-p.inter_var.max(0.0)).exp();
        for verb in 0..n_verb {
            let raw = base * p.verb_probs[verb];
            out.push(Detection {
                scene,
                slot,
                human_box: p.human_box,
                object_box: p.object_box,
                object_class,
                verb,
                raw_score: raw,
                calibrated_score: raw * damp,
                score: raw,
            });
        }
    }
    out
}

/// How candidates are kept and ranked.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Selection {
    Fixed { threshold: f64 },
    Adaptive { top_k: usize },
}

impl Selection {
    pub fn label(&self) -> String {
        match self {
            Selection::Fixed { threshold } => format!("fixed@{threshold}"),
            Selection::Adaptive { top_k } => format!("adaptive@top{top_k}"),
        }
    }
}

/// Declared fixed-threshold grid `{0.1, 0.2, …, 0.9}`.
pub fn threshold_grid() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

pub const DEFAULT_TOP_K: usize = 16;

fn by_score_desc(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.scene.cmp(&b.scene))
        .then(a.slot.cmp(&b.slot))
        .then(a.verb.cmp(&b.verb))
}

/// Applies `sel` to all candidates (grouped by scene or not).
pub fn select(cands: &[Detection], sel: Selection) -> Vec<Detection> {
    match sel {
        Selection::Fixed { threshold } => cands
            .iter()
            .filter(|d| d.raw_score >= threshold)
            .cloned()
            .map(|mut d| {
                d.score = d.raw_score;
                d
            })
            .collect(),
        Selection::Adaptive { top_k } => {
            let mut scenes: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
            for d in cands {
                let mut d = d.clone();
                d.score = d.calibrated_score;
                scenes.entry(d.scene).or_default().push(d);
            }
            scenes
                .into_values()
                .flat_map(|mut v| {
                    v.sort_by(by_score_desc);
                    v.truncate(top_k);
                    v
                })
                .collect()
        }
    }
}

/// Adaptive selection with exactly `total` detections: every scene keeps its
/// top `⌊total / scenes⌋` calibrated candidates and the remainder goes to the
/// best-scored next candidates across scenes.
pub fn select_adaptive_count(cands: &[Detection], scenes: usize, total: usize) -> Vec<Detection> {
    let mut per_scene: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
    for d in cands {
        let mut d = d.clone();
        d.score = d.calibrated_score;
        per_scene.entry(d.scene).or_default().push(d);
    }
    let base = if scenes == 0 { 0 } else { total / scenes };
    let mut kept = Vec::new();
    let mut rest = Vec::new();
    for (_, mut v) in per_scene {
        v.sort_by(by_score_desc);
        let cut = base.min(v.len());
        rest.extend(v.drain(cut..));
        kept.extend(v);
    }
    rest.sort_by(by_score_desc);
    let missing = total.saturating_sub(kept.len());
    kept.extend(rest.into_iter().take(missing));
    kept
}

/// All-point interpolated AP from a ranked TP/FP sequence.
pub fn average_precision(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let (recall, precision) = pr_curve(tp, n_gt);
    let mut env = precision.clone();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&env) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

/// Recall and precision after each ranked detection.
pub fn pr_curve(tp: &[bool], n_gt: usize) -> (Vec<f64>, Vec<f64>) {
    let mut hits = 0usize;
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        recall.push(hits as f64 / n_gt.max(1) as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    (recall, precision)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerbResult {
    pub verb: String,
    pub ap: f64,
    pub n_gt: usize,
    pub true_positives: usize,
    pub detections: usize,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub precision: f64,
}

/// One labelled line of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub selection: String,
    pub scenes: usize,
    pub detections: usize,
    pub per_verb_ap: BTreeMap<String, f64>,
    pub map_full: f64,
    pub map_rare: Option<f64>,
    pub map_common: Option<f64>,
    pub subtle_true_positives: usize,
    pub subtle_ground_truth: usize,
    pub verbs: Vec<VerbResult>,
    pub calibration_curve: Vec<CalibrationBin>,
    pub ablation_rows: Vec<AblationRow>,
}

pub const IOU_THRESHOLD: f64 = 0.5;
pub const CALIBRATION_BINS: usize = 10;

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Evaluates ranked detections against per-scene ground truth.
///
/// A detection is a true positive iff both boxes reach `iou_thresh` against
/// a not-yet-used ground-truth triplet with the same object class and verb;
/// among eligible triplets the one with the largest `min(IoU_h, IoU_o)` is
/// taken. Average precision of a verb is computed over scenes that contain
/// an object admissible for that verb; verbs without ground truth are left
/// out of every mean.
pub fn hoi_map(
    dets: &[Detection],
    truth: &[SceneTruth],
    rare_verbs: &[usize],
    iou_thresh: f64,
    selection: &str,
) -> Result<EvalReport, EvalError> {
    if truth.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let n_verbs = VERBS.len();
    let mut verbs = Vec::new();
    let mut per_verb_ap = BTreeMap::new();
    let (mut rare, mut common) = (Vec::new(), Vec::new());
    let mut outcomes: Vec<(f64, bool)> = Vec::new();
    let (mut subtle_tp, mut subtle_gt) = (0, 0);

    for v in 0..n_verbs {
        let admissible = admissible_objects(v);
        let known: Vec<bool> = truth
            .iter()
            .map(|s| s.object_classes.iter().any(|c| admissible.contains(c)))
            .collect();
        let n_gt: usize = truth
            .iter()
            .zip(&known)
            .filter(|(_, &k)| k)
            .map(|(s, _)| s.triplets.iter().filter(|g| g.verb == v).count())
            .sum();
        let mut ranked: Vec<&Detection> = dets
            .iter()
            .filter(|d| d.verb == v && d.scene < truth.len() && known[d.scene])
            .collect();
        ranked.sort_by(|a, b| by_score_desc(a, b));
        let mut used: Vec<Vec<bool>> = truth.iter().map(|s| vec![false; s.triplets.len()]).collect();
        let mut tp = Vec::with_capacity(ranked.len());
        for d in &ranked {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in truth[d.scene].triplets.iter().enumerate() {
                if used[d.scene][gi] || g.verb != v || g.object_class != d.object_class {
                    continue;
                }
                let (ih, io) = (iou(&d.human_box, &g.human_box), iou(&d.object_box, &g.object_box));
                if ih >= iou_thresh && io >= iou_thresh {
                    let q = ih.min(io);
                    if best.map_or(true, |(_, bq)| q > bq) {
                        best = Some((gi, q));
                    }
                }
            }
            if let Some((gi, _)) = best {
                used[d.scene][gi] = true;
            }
            tp.push(best.is_some());
            outcomes.push((d.score, best.is_some()));
        }
        let hits = tp.iter().filter(|&&t| t).count();
        if is_subtle(v) {
            subtle_tp += hits;
            subtle_gt += n_gt;
        }
        if n_gt == 0 {
            continue;
        }
        let ap = average_precision(&tp, n_gt);
        let (recall, precision) = pr_curve(&tp, n_gt);
        per_verb_ap.insert(VERBS[v].to_string(), ap);
        if rare_verbs.contains(&v) {
            rare.push(ap);
        } else {
            common.push(ap);
        }
        verbs.push(VerbResult {
            verb: VERBS[v].to_string(),
            ap,
            n_gt,
            true_positives: hits,
            detections: ranked.len(),
            recall,
            precision,
        });
    }
    let aps: Vec<f64> = per_verb_ap.values().copied().collect();
    Ok(EvalReport {
        selection: selection.to_string(),
        scenes: truth.len(),
        detections: dets.len(),
        map_full: mean(&aps).unwrap_or(0.0),
        map_rare: mean(&rare),
        map_common: mean(&common),
        per_verb_ap,
        subtle_true_positives: subtle_tp,
        subtle_ground_truth: subtle_gt,
        verbs,
        calibration_curve: calibration(&outcomes),
        ablation_rows: Vec::new(),
    })
}

/// Precision of detections grouped into equal-width score bins over `[0, 1]`.
pub fn calibration(outcomes: &[(f64, bool)]) -> Vec<CalibrationBin> {
    (0..CALIBRATION_BINS)
        .map(|b| {
            let lo = b as f64 / CALIBRATION_BINS as f64;
            let hi = (b + 1) as f64 / CALIBRATION_BINS as f64;
            let inside: Vec<&(f64, bool)> = outcomes
                .iter()
                .filter(|(s, _)| *s >= lo && (*s < hi || (b + 1 == CALIBRATION_BINS && *s <= hi)))
                .collect();
            let count = inside.len();
            let (mean_confidence, precision) = if count == 0 {
                (0.0, 0.0)
            } else {
                (
                    inside.iter().map(|o| o.0).sum::<f64>() / count as f64,
                    inside.iter().filter(|o| o.1).count() as f64 / count as f64,
                )
            };
            CalibrationBin {
                lo,
                hi,
                count,
                mean_confidence,
                precision,
            }
        })
        .collect()
}

/// Slot predictions for every record (with `passes` stochastic passes each).
pub fn infer_all(model: &Model, records: &[SceneRecord], passes: usize, seed: u64) -> Result<Vec<Vec<HoiPrediction>>, EvalError> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let raster = render(r, model.config().image_size);
            Ok(predict(model, &raster, passes, derive(seed, &[stream::INFER, i as u64]))?)
        })
        .collect()
}

/// Candidates and ground truth of a whole split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub candidates: Vec<Detection>,
    pub truth: Vec<SceneTruth>,
    pub rare_verbs: Vec<usize>,
}

impl EvalSet {
    pub fn new(preds: &[Vec<HoiPrediction>], records: &[SceneRecord], rare_verbs: Vec<usize>) -> Self {
        Self {
            candidates: preds.iter().enumerate().flat_map(|(i, p)| candidates(i, p)).collect(),
            truth: records.iter().map(SceneTruth::from_record).collect(),
            rare_verbs,
        }
    }

    pub fn evaluate(&self, sel: Selection) -> Result<EvalReport, EvalError> {
        let kept = select(&self.candidates, sel);
        hoi_map(&kept, &self.truth, &self.rare_verbs, IOU_THRESHOLD, &sel.label())
    }

    /// Best fixed threshold of the declared grid by `map_full` (lowest
    /// threshold on ties) and its report.
    pub fn best_fixed(&self) -> Result<(f64, EvalReport), EvalError> {
        let mut best: Option<(f64, EvalReport)> = None;
        for tau in threshold_grid() {
            let r = self.evaluate(Selection::Fixed { threshold: tau })?;
            if best.as_ref().map_or(true, |(_, b)| r.map_full > b.map_full) {
                best = Some((tau, r));
            }
        }
        Ok(best.expect("grid is nonempty"))
    }

    /// Adaptive selection with the same number of detections as `count`.
    pub fn evaluate_adaptive_count(&self, count: usize) -> Result<EvalReport, EvalError> {
        let kept = select_adaptive_count(&self.candidates, self.truth.len(), count);
        hoi_map(&kept, &self.truth, &self.rare_verbs, IOU_THRESHOLD, &format!("adaptive@count{count}"))
    }
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String, EvalError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `verb,ap,n_gt,true_positives,detections` plus summary lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("verb,ap,n_gt,true_positives,detections\n");
        for v in &self.verbs {
            s.push_str(&format!("{},{},{},{},{}\n", v.verb, v.ap, v.n_gt, v.true_positives, v.detections));
        }
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        s.push_str(&format!("map_full,{},,,\n", self.map_full));
        s.push_str(&format!("map_rare,{},,,\n", opt(self.map_rare)));
        s.push_str(&format!("map_common,{},,,\n", opt(self.map_common)));
        s
    }

    pub fn calibration_csv(&self) -> String {
        let mut s = String::from("lo,hi,count,mean_confidence,precision\n");
        for b in &self.calibration_curve {
            s.push_str(&format!("{},{},{},{},{}\n", b.lo, b.hi, b.count, b.mean_confidence, b.precision));
        }
        s
    }
}

/// Ablation rows as CSV with the union of config and metric keys as columns.
pub fn rows_csv(rows: &[AblationRow]) -> String {
    let mut ckeys: Vec<&String> = rows.iter().flat_map(|r| r.config.keys()).collect();
    ckeys.sort();
    ckeys.dedup();
    let mut mkeys: Vec<&String> = rows.iter().flat_map(|r| r.metrics.keys()).collect();
    mkeys.sort();
    mkeys.dedup();
    let mut s = String::from("label,seed");
    for k in ckeys.iter().chain(&mkeys) {
        s.push(',');
        s.push_str(k);
    }
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{}", r.label, r.seed));
        for k in &ckeys {
            s.push(',');
            s.push_str(r.config.get(*k).map_or("", String::as_str));
        }
        for k in &mkeys {
            s.push(',');
            if let Some(v) = r.metrics.get(*k) {
                s.push_str(&v.to_string());
            }
        }
        s.push('\n');
    }
    s
}
