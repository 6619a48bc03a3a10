//! Optimization loop: per-scene tapes, set matching, the uncertainty-aware
//! objective, AdamW with decoupled weight decay, checkpoints and resumption.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matching::{cost_matrix, hungarian, Assignment, MatchWeights, MatchingError};
use crate::model::{
    predictions, read_checkpoint, write_checkpoint, BoundParams, Checkpoint, CheckpointError, Model, ModelError,
    NamedTensor, ParamStore,
};
use crate::scenegen::{render, SceneRecord};
use crate::seeds::{derive, stream};
use crate::tensor::{DiffArray, Tape};
use crate::uncertainty::{total_loss, IouWeights, LossBreakdown, LossConfig, SceneLoss, UncertaintyError, VerbPasses};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss at step {step} (scene seed {scene_seed}): {breakdown:?}")]
    NonFiniteLoss {
        step: u64,
        scene_seed: u64,
        breakdown: LossBreakdown,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] UncertaintyError),
    #[error(transparent)]
    Matching(#[from] MatchingError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub lambda_o: f64,
    pub lambda_a: f64,
    /// Couple the verb passes through the KL term; otherwise plain cross-entropy.
    pub interaction_refine: bool,
    pub grad_clip_norm: f64,
    pub match_weights: MatchWeights,
    /// Checkpoint interval in steps (0: only the final checkpoint).
    pub checkpoint_every: u64,
    /// Validation interval in steps (0: only before and after training).
    pub val_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            batch_size: 4,
            steps: 20000,
            seed: 0,
            lambda_o: 1.0,
            lambda_a: 1.0,
            interaction_refine: true,
            grad_clip_norm: 0.1,
            match_weights: MatchWeights::default(),
            checkpoint_every: 0,
            val_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.weight_decay >= 0.0) || !(self.eps > 0.0) || !(self.grad_clip_norm >= 0.0) {
            return bad("weight_decay, eps and grad_clip_norm must be non-negative (eps positive)");
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("betas must lie in [0, 1)");
        }
        if self.lambda_o < 0.0 || self.lambda_a < 0.0 {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda_o: self.lambda_o,
            lambda_a: self.lambda_a,
            weights: self.match_weights,
        }
    }
}

/// AdamW moments, index-aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. Weight decay shrinks weights directly by `lr·wd`.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = cfg.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let shrink = 1.0 - cfg.lr * cfg.weight_decay;
        for (i, g) in grads.iter().enumerate() {
            let p = &mut params.by_index_mut(i).data;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] = p[k] * shrink - cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
    }

    fn tensors(&self, params: &ParamStore) -> Vec<NamedTensor> {
        let moment = |tag: &str, buf: &[Vec<f64>]| -> Vec<NamedTensor> {
            params
                .iter()
                .zip(buf)
                .map(|(p, d)| NamedTensor {
                    name: format!("{tag}.{}", p.name),
                    shape: p.shape.clone(),
                    data: d.clone(),
                })
                .collect()
        };
        let mut out = moment("adam.m", &self.m);
        out.extend(moment("adam.v", &self.v));
        out
    }

    fn from_checkpoint(ckpt: &Checkpoint, params: &ParamStore, step: u64) -> Result<Self, TrainError> {
        let load = |tag: &str| -> Result<Vec<Vec<f64>>, TrainError> {
            params
                .iter()
                .map(|p| {
                    ckpt.tensor(&format!("{tag}.{}", p.name))
                        .map(|t| t.data.clone())
                        .ok_or_else(|| CheckpointError::Format(format!("missing {tag}.{}", p.name)).into())
                })
                .collect()
        };
        Ok(Self {
            step,
            m: load("adam.m")?,
            v: load("adam.v")?,
        })
    }
}

/// Rescales `grads` in place so that their global L2 norm is at most `max_norm`
/// (no-op when `max_norm` is 0). Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Quantities that the objective treats as constants: the matching, the IoU
/// weights and the reference verb logits. Re-using them keeps the objective a
/// smooth function of the parameters around one point (used by gradient checks).
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenContext {
    pub assignment: Assignment,
    pub iou: IouWeights,
    pub reference: Option<DiffArray>,
}

/// Builds the objective for one scene on `t`.
pub fn scene_objective(
    model: &Model,
    t: &mut Tape,
    p: &BoundParams,
    record: &SceneRecord,
    cfg: &TrainConfig,
) -> Result<SceneLoss, TrainError> {
    scene_objective_with(model, t, p, record, cfg, None).map(|(l, _)| l)
}

/// [`scene_objective`] with optional frozen constants; returns the constants used.
pub fn scene_objective_with(
    model: &Model,
    t: &mut Tape,
    p: &BoundParams,
    record: &SceneRecord,
    cfg: &TrainConfig,
    frozen: Option<&FrozenContext>,
) -> Result<(SceneLoss, FrozenContext), TrainError> {
    let raster = render(record, model.config().image_size);
    let (loc, inter) = model.trunk(t, p, &raster)?;
    let aux = model.config().additional_classifier;
    let out = model.heads(t, p, loc, inter, !aux)?;
    let mut verbs = if aux {
        let aux_logits = model.aux_verb_logits(t, p, inter)?.expect("configured");
        VerbPasses {
            reference: cfg.interaction_refine.then_some(aux_logits),
            perturbed: out.verb_logits,
            auxiliary: Some(aux_logits),
        }
    } else if cfg.interaction_refine {
        let reference = match frozen.and_then(|f| f.reference.clone()) {
            Some(r) => t.constant(r),
            None => model.verb_logits(t, p, inter, false)?,
        };
        VerbPasses {
            reference: Some(reference),
            perturbed: out.verb_logits,
            auxiliary: None,
        }
    } else {
        VerbPasses::plain(out.verb_logits)
    };
    if let (Some(f), Some(_)) = (frozen, verbs.reference) {
        if let Some(r) = &f.reference {
            verbs.reference = Some(t.constant(r.clone()));
        }
    }
    let gts = record.ground_truth();
    let assignment = match frozen {
        Some(f) => f.assignment.clone(),
        None => {
            let preds = predictions(t, &out, verbs.perturbed, None);
            hungarian(&cost_matrix(&preds, &gts, &cfg.match_weights)?)?
        }
    };
    let loss = total_loss(t, &out, verbs, &assignment, &gts, &cfg.loss(), frozen.map(|f| &f.iou))?;
    let context = FrozenContext {
        assignment,
        iou: loss.iou_weights.clone(),
        reference: verbs.reference.map(|r| t.value(r).detached()),
    };
    Ok((loss, context))
}

/// Mean gradient and loss over a batch; scenes are processed one tape at a time.
pub fn batch_gradients(
    model: &Model,
    batch: &[&SceneRecord],
    cfg: &TrainConfig,
    step: u64,
) -> Result<(Vec<Vec<f64>>, LossBreakdown), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
    let mut parts = Vec::with_capacity(batch.len());
    for (i, record) in batch.iter().enumerate() {
        let mut t = Tape::new(derive(cfg.seed, &[stream::TRAIN_TAPE, step, i as u64]));
        let p = model.bind(&mut t, true);
        let loss = scene_objective(model, &mut t, &p, record, cfg)?;
        if !loss.breakdown.total.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step,
                scene_seed: record.seed,
                breakdown: loss.breakdown,
            });
        }
        t.backward(loss.total).map_err(ModelError::from)?;
        for (acc, v) in grads.iter_mut().zip(&p.vars) {
            if let Some(g) = t.grad(*v) {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += scale * b);
            }
        }
        parts.push(loss.breakdown);
    }
    let mean = LossBreakdown::mean(&parts).expect("nonempty batch");
    Ok((grads, mean))
}

/// Forward, match, backward, clip and update on one batch.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    batch: &[&SceneRecord],
    cfg: &TrainConfig,
) -> Result<LossBreakdown, TrainError> {
    let (mut grads, loss) = batch_gradients(model, batch, cfg, opt.step)?;
    clip_grad_norm(&mut grads, cfg.grad_clip_norm);
    opt.update(model.params_mut(), &grads, cfg);
    Ok(loss)
}

/// Mean objective over `records` without parameter updates. Dropout masks
/// depend only on the scene position, so the value is comparable across steps.
pub fn evaluate_loss(model: &Model, records: &[SceneRecord], cfg: &TrainConfig) -> Result<LossBreakdown, TrainError> {
    let mut parts = Vec::with_capacity(records.len());
    for (i, record) in records.iter().enumerate() {
        let mut t = Tape::new(derive(cfg.seed, &[stream::VAL_TAPE, i as u64]));
        let p = model.bind(&mut t, false);
        parts.push(scene_objective(model, &mut t, &p, record, cfg)?.breakdown);
    }
    LossBreakdown::mean(&parts).ok_or(TrainError::EmptyBatch)
}

/// Per-step training losses and periodic validation losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub train: Vec<(u64, LossBreakdown)>,
    pub val: Vec<(u64, LossBreakdown)>,
}

pub const CSV_HEADER: &str = "step,l_loc_h,l_loc_o,l_box,l_inter,total";

fn csv(rows: &[(u64, LossBreakdown)]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for (step, b) in rows {
        s.push_str(&format!(
            "{step},{},{},{},{},{}\n",
            b.l_loc_h, b.l_loc_o, b.l_box, b.l_inter, b.total
        ));
    }
    s
}

impl TrainLog {
    pub fn train_csv(&self) -> String {
        csv(&self.train)
    }

    pub fn val_csv(&self) -> String {
        csv(&self.val)
    }

    pub fn initial_val(&self) -> Option<f64> {
        self.val.first().map(|(_, b)| b.total)
    }

    pub fn final_val(&self) -> Option<f64> {
        self.val.last().map(|(_, b)| b.total)
    }
}

/// Deterministic order of training scenes for `epoch`.
fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(seed, &[stream::SHUFFLE, epoch])));
    order
}

/// Indices of the scenes used at `step`; epochs wrap around the dataset.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, n: usize) -> Vec<usize> {
    let start = step as usize * batch_size;
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (start..start + batch_size)
        .map(|k| {
            let epoch = (k / n) as u64;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                cached = Some((epoch, epoch_order(seed, epoch, n)));
            }
            cached.as_ref().expect("set above").1[k % n]
        })
        .collect()
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Full training state (model, optimizer, log).
pub struct TrainState {
    pub model: Model,
    pub opt: AdamW,
    pub log: TrainLog,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let opt = AdamW::new(model.params());
        Self {
            model,
            opt,
            log: TrainLog::default(),
        }
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let meta = serde_json::json!({
            "step": self.opt.step,
            "train": cfg,
            "log": self.log,
        });
        let mut ckpt = self.model.to_checkpoint(meta);
        ckpt.tensors.extend(self.opt.tensors(self.model.params()));
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let model = Model::from_checkpoint(ckpt)?;
        let step = ckpt
            .meta
            .get("step")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| CheckpointError::Format("missing step".into()))?;
        let log = match ckpt.meta.get("log") {
            Some(v) => serde_json::from_value(v.clone()).map_err(CheckpointError::from)?,
            None => TrainLog::default(),
        };
        let opt = AdamW::from_checkpoint(ckpt, model.params(), step)?;
        Ok(Self { model, opt, log })
    }
}

/// Where `fit` writes its artifacts.
#[derive(Clone, Debug)]
pub struct FitOutput {
    pub dir: PathBuf,
}

impl FitOutput {
    pub fn last(&self) -> PathBuf {
        self.dir.join(LAST_CHECKPOINT)
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join(FINAL_CHECKPOINT)
    }

    pub fn train_csv(&self) -> PathBuf {
        self.dir.join("train_loss.csv")
    }

    pub fn val_csv(&self) -> PathBuf {
        self.dir.join("val_loss.csv")
    }
}

fn write_atomic(path: &Path, text: &str) -> std::io::Result<()> {
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(text.as_bytes())?;
    drop(f);
    fs::rename(tmp, path)
}

fn persist(state: &TrainState, cfg: &TrainConfig, out: &FitOutput, path: &Path) -> Result<(), TrainError> {
    write_checkpoint(path, &state.to_checkpoint(cfg))?;
    write_atomic(&out.train_csv(), &state.log.train_csv())?;
    write_atomic(&out.val_csv(), &state.log.val_csv())?;
    Ok(())
}

/// Trains until `cfg.steps`, continuing from `state` (which may be resumed).
///
/// Validation loss is recorded before the first step, every `val_every`
/// steps and after the last step. With `out`, checkpoints and CSV logs are
/// written to disk.
pub fn fit(
    state: &mut TrainState,
    train: &[SceneRecord],
    val: &[SceneRecord],
    cfg: &TrainConfig,
    out: Option<&FitOutput>,
) -> Result<(), TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if let Some(o) = out {
        fs::create_dir_all(&o.dir)?;
    }
    let record_val = |state: &mut TrainState| -> Result<(), TrainError> {
        if !val.is_empty() && state.log.val.last().map(|v| v.0) != Some(state.opt.step) {
            let b = evaluate_loss(&state.model, val, cfg)?;
            state.log.val.push((state.opt.step, b));
        }
        Ok(())
    };
    if state.opt.step == 0 {
        record_val(state)?;
        if let Some(o) = out {
            persist(state, cfg, o, &o.last())?;
        }
    }
    while state.opt.step < cfg.steps {
        let step = state.opt.step;
        let idx = batch_indices(cfg.seed, step, cfg.batch_size, train.len());
        let batch: Vec<&SceneRecord> = idx.iter().map(|&i| &train[i]).collect();
        let loss = train_step(&mut state.model, &mut state.opt, &batch, cfg)?;
        state.log.train.push((step, loss));
        let done = state.opt.step;
        if cfg.val_every > 0 && done % cfg.val_every == 0 && done < cfg.steps {
            record_val(state)?;
        }
        if let Some(o) = out {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                persist(state, cfg, o, &o.last())?;
            }
        }
    }
    record_val(state)?;
    if let Some(o) = out {
        persist(state, cfg, o, &o.last())?;
        persist(state, cfg, o, &o.final_checkpoint())?;
    }
    Ok(())
}

/// Loads `last.ckpt` from `dir` if present.
pub fn resume(dir: &Path) -> Result<Option<TrainState>, TrainError> {
    let path = dir.join(LAST_CHECKPOINT);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(TrainState::from_checkpoint(&read_checkpoint(&path)?)?))
}
