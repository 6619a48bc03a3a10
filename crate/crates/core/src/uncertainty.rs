//! Uncertainty-aware objectives and the adaptive confidence rule.
//!
//! Scalar functions mirror the on-tape training objective term by term and
//! serve as its reference. The training objective per scene is
//!
//! ```text
//! total = l_loc_h + l_loc_o + λ_o · l_box + λ_a · l_inter
//! ```
//!
//! where `l_box` is the IoU-weighted Gaussian negative log-likelihood of the
//! matched box offsets and `l_inter = mean(exp(−KL)·CE + KL)` couples a
//! deterministic verb pass `y` with a perturbed pass `ŷ`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou_giou_rows, BoxOffsets, GaussianBox};
use crate::matching::{Assignment, MatchWeights};
use crate::model::{predictions, HeadOutputs, HoiPrediction, Model, ModelError, HUMAN_BACKGROUND};
use crate::scenegen::{GroundTruthTriplet, Raster};
use crate::tensor::{DiffArray, Tape, TensorError, Var, CLAMP_MIN};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UncertaintyError {
    #[error("non-positive variance {0}")]
    NonPositiveVariance(f64),
    #[error("IoU weight {0} outside [0, 1]")]
    InvalidWeight(f64),
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// `Σ_c w · [½·ln(2πσ²_c) + (target_c − μ_c)² / (2σ²_c)]` over the four offsets.
pub fn gaussian_box_nll(g: &GaussianBox, target: &BoxOffsets, iou_weight: f64) -> Result<f64, UncertaintyError> {
    if !(0.0..=1.0).contains(&iou_weight) {
        return Err(UncertaintyError::InvalidWeight(iou_weight));
    }
    if let Some(&v) = g.var.iter().find(|v| !(**v > 0.0)) {
        return Err(UncertaintyError::NonPositiveVariance(v));
    }
    Ok(gaussian_nll_raw(&g.mu, &g.var, &target.to_array(), iou_weight))
}

/// Same as [`gaussian_box_nll`] without validation; targets may be negative.
pub fn gaussian_nll_raw(mu: &[f64; 4], var: &[f64; 4], target: &[f64; 4], w: f64) -> f64 {
    (0..4)
        .map(|c| {
            let r = target[c] - mu[c];
            w * (0.5 * (2.0 * PI * var[c]).ln() + r * r / (2.0 * var[c]))
        })
        .sum()
}

/// `KL(y ‖ ŷ) = Σ y_k ln(y_k / ŷ_k)` with both sides clamped at `CLAMP_MIN`.
pub fn interaction_kl(y: &[f64], y_hat: &[f64]) -> f64 {
    assert_eq!(y.len(), y_hat.len(), "distributions differ in length");
    y.iter()
        .zip(y_hat)
        .map(|(&p, &q)| {
            let p = p.max(CLAMP_MIN);
            p * (p.ln() - q.max(CLAMP_MIN).ln())
        })
        .sum::<f64>()
        .max(0.0)
}

/// Deterministic and perturbed verb distributions of one slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionPair {
    pub y: Vec<f64>,
    pub y_hat: Vec<f64>,
    pub d_kl: f64,
}

impl InteractionPair {
    pub fn new(y: Vec<f64>, y_hat: Vec<f64>) -> Self {
        let d_kl = interaction_kl(&y, &y_hat);
        Self { y, y_hat, d_kl }
    }
}

/// `mean_i [exp(−d_i)·ce_i + d_i]`; zero for no slots.
pub fn kl_weighted_mean(ce: &[f64], d_kl: &[f64]) -> f64 {
    assert_eq!(ce.len(), d_kl.len());
    if ce.is_empty() {
        return 0.0;
    }
    ce.iter().zip(d_kl).map(|(c, d)| (-d).exp() * c + d).sum::<f64>() / ce.len() as f64
}

/// Interaction objective over labelled slots; the cross-entropy uses `ŷ`.
pub fn interaction_loss(pairs: &[InteractionPair], labels: &[usize]) -> Result<f64, UncertaintyError> {
    assert_eq!(pairs.len(), labels.len(), "one label per slot");
    let mut ce = Vec::with_capacity(pairs.len());
    for (p, &k) in pairs.iter().zip(labels) {
        let q = *p.y_hat.get(k).ok_or(UncertaintyError::BadLabel {
            label: k,
            classes: p.y_hat.len(),
        })?;
        ce.push(-q.max(CLAMP_MIN).ln());
    }
    let d: Vec<f64> = pairs.iter().map(|p| p.d_kl).collect();
    Ok(kl_weighted_mean(&ce, &d))
}

/// `score_k = p_k · exp(−inter_var)`.
pub fn adaptive_score(verb_probs: &[f64], inter_var: f64) -> Vec<f64> {
    let s = (-inter_var.max(0.0)).exp();
    verb_probs.iter().map(|p| p * s).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_loc_h: f64,
    pub l_loc_o: f64,
    pub l_box: f64,
    pub l_inter: f64,
    pub total: f64,
    pub lambda_o: f64,
    pub lambda_a: f64,
}

impl LossBreakdown {
    pub fn from_parts(l_loc_h: f64, l_loc_o: f64, l_box: f64, l_inter: f64, lambda_o: f64, lambda_a: f64) -> Self {
        Self {
            l_loc_h,
            l_loc_o,
            l_box,
            l_inter,
            total: l_loc_h + l_loc_o + lambda_o * l_box + lambda_a * l_inter,
            lambda_o,
            lambda_a,
        }
    }

    /// Component-wise mean; the total is recomputed from the averaged parts.
    pub fn mean(items: &[LossBreakdown]) -> Option<Self> {
        let first = items.first()?;
        let n = items.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(Self::from_parts(
            avg(|b| b.l_loc_h),
            avg(|b| b.l_loc_o),
            avg(|b| b.l_box),
            avg(|b| b.l_inter),
            first.lambda_o,
            first.lambda_a,
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_o: f64,
    pub lambda_a: f64,
    pub weights: MatchWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_o: 1.0,
            lambda_a: 1.0,
            weights: MatchWeights::default(),
        }
    }
}

/// The scalar objective on the tape with its values.
#[derive(Clone, Debug)]
pub struct SceneLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// IoU weights used in the box likelihood, per matched pair.
    pub iou_weights: IouWeights,
}

/// Detached IoU factors of the matched human and object boxes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IouWeights {
    pub human: Vec<f64>,
    pub object: Vec<f64>,
}

/// Per-slot classification labels implied by an assignment.
pub fn slot_labels(assignment: &Assignment, gts: &[GroundTruthTriplet], slots: usize, n_obj: usize, n_verb: usize) -> SlotLabels {
    let mut labels = SlotLabels {
        human: vec![HUMAN_BACKGROUND; slots],
        object: vec![n_obj; slots],
        verb: vec![n_verb; slots],
    };
    for &(r, c) in &assignment.pairs {
        labels.human[r] = 0;
        labels.object[r] = gts[c].object_class;
        labels.verb[r] = gts[c].verb;
    }
    labels
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotLabels {
    pub human: Vec<usize>,
    pub object: Vec<usize>,
    pub verb: Vec<usize>,
}

/// Per-slot `KL(y ‖ ŷ)` on the tape; `y` enters as a constant.
pub fn kl_rows(t: &mut Tape, y_logits: Var, y_hat_logits: Var) -> Result<Var, TensorError> {
    let y = t.softmax(y_logits, 1)?;
    let y_val = t.value(y).detached();
    let log_y = DiffArray::new(y_val.shape().to_vec(), y_val.data().iter().map(|p| p.max(CLAMP_MIN).ln()).collect())?;
    let y_c = t.constant(y_val);
    let log_y = t.constant(log_y);
    let log_q = t.log_softmax(y_hat_logits, 1)?;
    let diff = t.sub(log_y, log_q)?;
    let prod = t.mul(y_c, diff)?;
    t.sum_axis(prod, 1)
}

/// Interaction objective on the tape over all slots.
///
/// `y_ref` is the deterministic pass; `None` means no perturbation, in which
/// case the objective is the plain mean cross-entropy of `y_hat`.
pub fn interaction_loss_tape(t: &mut Tape, y_ref: Option<Var>, y_hat: Var, labels: &[usize]) -> Result<Var, TensorError> {
    let ce = t.cross_entropy(y_hat, labels)?;
    let per_slot = match y_ref {
        None => ce,
        Some(y) => {
            let kl = kl_rows(t, y, y_hat)?;
            let neg = t.neg(kl);
            let w = t.exp(neg);
            let wce = t.mul(w, ce)?;
            t.add(wce, kl)?
        }
    };
    Ok(t.mean(per_slot))
}

fn rows_to_array(rows: &[[f64; 4]]) -> Result<DiffArray, TensorError> {
    DiffArray::new(vec![rows.len(), 4], rows.iter().flatten().copied().collect())
}

/// Box regression (`w_l1·L1 + w_giou·(1 − GIoU)`) summed over matched rows,
/// and the IoU of every matched row (values, for weighting).
fn box_regression(
    t: &mut Tape,
    corners: Var,
    rows: &[usize],
    targets: &[[f64; 4]],
    w: &MatchWeights,
) -> Result<(Var, Vec<f64>), TensorError> {
    let pred = t.select_rows(corners, rows)?;
    let gt = t.constant(rows_to_array(targets)?);
    let d = t.sub(pred, gt)?;
    let a = t.abs(d);
    let l1 = t.sum(a);
    let (iou, giou) = iou_giou_rows(t, pred, gt)?;
    let gs = t.sum(giou);
    let one_minus = t.neg(gs);
    let one_minus = t.add_scalar(one_minus, rows.len() as f64);
    let l1 = t.scale(l1, w.l1);
    let g = t.scale(one_minus, w.giou);
    let iou_vals = t.data(iou).iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok((t.add(l1, g)?, iou_vals))
}

/// IoU-weighted Gaussian NLL of matched offsets; targets are measured from
/// the predicted reference point.
fn box_nll(
    t: &mut Tape,
    head: &crate::model::BoxHead,
    rows: &[usize],
    targets: &[[f64; 4]],
    iou_weights: &[f64],
) -> Result<Var, TensorError> {
    let m = rows.len();
    let center = t.select_rows(head.center, rows)?;
    let mu = t.select_rows(head.mu, rows)?;
    let var = t.select_rows(head.var, rows)?;
    let cx = t.slice(center, 1, 0, 1)?;
    let cy = t.slice(center, 1, 1, 2)?;
    let col = |k: usize| -> Result<DiffArray, TensorError> {
        DiffArray::new(vec![m, 1], targets.iter().map(|b| b[k]).collect())
    };
    let (x1, y1, x2, y2) = (col(0)?, col(1)?, col(2)?, col(3)?);
    let (x1, y1, x2, y2) = (t.constant(x1), t.constant(y1), t.constant(x2), t.constant(y2));
    let tl = t.sub(cx, x1)?;
    let tr = t.sub(x2, cx)?;
    let tt = t.sub(cy, y1)?;
    let tb = t.sub(y2, cy)?;
    let target = t.concat(&[tl, tr, tt, tb], 1)?;
    let r = t.sub(target, mu)?;
    let r2 = t.square(r);
    let two_var = t.scale(var, 2.0);
    let quad = t.div(r2, two_var)?;
    let scaled = t.scale(var, 2.0 * PI);
    let logv = t.log(scaled);
    let half_log = t.scale(logv, 0.5);
    let per = t.add(half_log, quad)?;
    let weights = DiffArray::new(vec![m, 4], iou_weights.iter().flat_map(|&w| [w; 4]).collect())?;
    let weights = t.constant(weights);
    let weighted = t.mul(per, weights)?;
    Ok(t.sum(weighted))
}

/// Verb logits entering the interaction objective.
#[derive(Clone, Copy, Debug)]
pub struct VerbPasses {
    /// Reference distribution `y` (treated as a constant); `None` disables the KL coupling.
    pub reference: Option<Var>,
    /// Distribution `ŷ` that receives the cross-entropy.
    pub perturbed: Var,
    /// Extra head trained with plain mean cross-entropy, added to `l_inter`.
    pub auxiliary: Option<Var>,
}

impl VerbPasses {
    pub fn plain(logits: Var) -> Self {
        Self {
            reference: None,
            perturbed: logits,
            auxiliary: None,
        }
    }
}

/// Full per-scene objective on the tape.
pub fn total_loss(
    t: &mut Tape,
    out: &HeadOutputs,
    verbs: VerbPasses,
    assignment: &Assignment,
    gts: &[GroundTruthTriplet],
    cfg: &LossConfig,
    frozen_iou: Option<&IouWeights>,
) -> Result<SceneLoss, UncertaintyError> {
    let slots = t.shape(out.human_logits)[0];
    let n_obj = t.shape(out.object_logits)[1] - 1;
    let n_verb = t.shape(verbs.perturbed)[1] - 1;
    for g in gts {
        if g.object_class >= n_obj || g.verb >= n_verb {
            return Err(UncertaintyError::BadLabel {
                label: g.object_class.max(g.verb),
                classes: n_obj.min(n_verb),
            });
        }
    }
    let labels = slot_labels(assignment, gts, slots, n_obj, n_verb);

    let ce_h = t.cross_entropy(out.human_logits, &labels.human)?;
    let mut l_loc_h = t.mean(ce_h);
    let ce_o = t.cross_entropy(out.object_logits, &labels.object)?;
    let mut l_loc_o = t.mean(ce_o);
    let mut l_box = None;
    let mut iou_weights = IouWeights::default();

    if !assignment.pairs.is_empty() {
        let rows: Vec<usize> = assignment.pairs.iter().map(|&(r, _)| r).collect();
        let hb: Vec<[f64; 4]> = assignment.pairs.iter().map(|&(_, c)| gts[c].human_box.to_array()).collect();
        let ob: Vec<[f64; 4]> = assignment.pairs.iter().map(|&(_, c)| gts[c].object_box.to_array()).collect();
        let (reg_h, iou_h) = box_regression(t, out.human.corners, &rows, &hb, &cfg.weights)?;
        let (reg_o, iou_o) = box_regression(t, out.object.corners, &rows, &ob, &cfg.weights)?;
        l_loc_h = t.add(l_loc_h, reg_h)?;
        l_loc_o = t.add(l_loc_o, reg_o)?;
        iou_weights = match frozen_iou {
            Some(w) => w.clone(),
            None => IouWeights {
                human: iou_h,
                object: iou_o,
            },
        };
        if cfg.lambda_o != 0.0 {
            let nh = box_nll(t, &out.human, &rows, &hb, &iou_weights.human)?;
            let no = box_nll(t, &out.object, &rows, &ob, &iou_weights.object)?;
            l_box = Some(t.add(nh, no)?);
        }
    }
    let mut l_inter = interaction_loss_tape(t, verbs.reference, verbs.perturbed, &labels.verb)?;
    if let Some(aux) = verbs.auxiliary {
        let ce = t.cross_entropy(aux, &labels.verb)?;
        let ce = t.mean(ce);
        l_inter = t.add(l_inter, ce)?;
    }

    let mut total = t.add(l_loc_h, l_loc_o)?;
    if let Some(b) = l_box {
        let s = t.scale(b, cfg.lambda_o);
        total = t.add(total, s)?;
    }
    if cfg.lambda_a != 0.0 {
        let s = t.scale(l_inter, cfg.lambda_a);
        total = t.add(total, s)?;
    }
    let mut breakdown = LossBreakdown::from_parts(
        t.item(l_loc_h),
        t.item(l_loc_o),
        l_box.map_or(0.0, |b| t.item(b)),
        t.item(l_inter),
        cfg.lambda_o,
        cfg.lambda_a,
    );
    breakdown.total = t.item(total);
    Ok(SceneLoss {
        total,
        breakdown,
        iou_weights,
    })
}

/// Mean over `passes` dropout-active verb passes of `KL(y ‖ ŷⁱ)` per slot.
///
/// With an additional classifier the single divergence `KL(aux ‖ y)` is
/// returned instead, matching its role during training.
pub fn estimate_inter_var(
    model: &Model,
    t: &mut Tape,
    p: &crate::model::BoundParams,
    inter_emb: Var,
    y_logits: Var,
    passes: usize,
) -> Result<Vec<f64>, ModelError> {
    assert!(passes >= 1, "at least one stochastic pass");
    let slots = t.shape(inter_emb)[0];
    let mut acc = vec![0.0; slots];
    if let Some(aux) = model.aux_verb_logits(t, p, inter_emb)? {
        let kl = kl_rows(t, aux, y_logits)?;
        return Ok(t.data(kl).to_vec());
    }
    if model.config().dropout_rate == 0.0 {
        return Ok(acc);
    }
    for _ in 0..passes {
        let y_hat = model.verb_logits(t, p, inter_emb, true)?;
        let kl = kl_rows(t, y_logits, y_hat)?;
        for (a, v) in acc.iter_mut().zip(t.data(kl)) {
            *a += v;
        }
    }
    Ok(acc.into_iter().map(|v| v / passes as f64).collect())
}

/// Inference for one raster: deterministic predictions plus per-slot
/// interaction variance from `passes` stochastic passes (none when `passes == 0`).
pub fn predict(model: &Model, raster: &Raster, passes: usize, seed: u64) -> Result<Vec<HoiPrediction>, ModelError> {
    let mut t = Tape::new(seed);
    let p = model.bind(&mut t, false);
    let (loc, inter) = model.trunk(&mut t, &p, raster)?;
    let out = model.heads(&mut t, &p, loc, inter, false)?;
    let var = if passes == 0 {
        None
    } else {
        Some(estimate_inter_var(model, &mut t, &p, inter, out.verb_logits, passes)?)
    };
    Ok(predictions(&t, &out, out.verb_logits, var.as_deref()))
}
