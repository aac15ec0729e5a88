//! Losses, optimizer, schedules and the epoch loop with early stopping.

mod inference;
mod patches;

pub use inference::{
    gaussian_weights, network_grid, postprocess, predict_case, prepare_volume, sliding_window_predict, tile_origins,
    tile_starts, weight_normalizer, SlidingWindow,
};
pub use patches::{crop, reflect_pad, sample_from, sample_patches, PatchBatch, PatchSource, FOREGROUND_FRACTION};

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoconfig::{PlanConfig, Variant};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tape, Tensor};
use crate::synergy_net::{
    cascade_prior, locations_as_rows, lowres_shape, CascadeModel, Checkpoint, CheckpointModel, CodebookUpdate,
    LogitPredictor, NetOptions, Quantizer, SynergyUNet,
};
use crate::volume::{
    load_case, resample_grid, resample_grid_nearest, DatasetManifest, Grid3, LoadOptions, Partition, Shape3,
};

pub const DICE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
    pub vq: f64,
    /// Also the commitment weight of the quantizer.
    pub commit: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            bce: 1.0,
            dice: 1.0,
            vq: 1.0,
            commit: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
    /// Multiply by `step_factor` every `step_every` epochs.
    Step,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_min: f64,
    pub schedule: Schedule,
    pub step_every: usize,
    pub step_factor: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub steps_per_epoch: usize,
    /// Overrides the plan's batch size when set.
    pub batch_size: Option<usize>,
    pub loss_weights: LossWeights,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub net: NetOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 1e-4,
            lr_min: 1e-6,
            schedule: Schedule::Cosine,
            step_every: 10,
            step_factor: 0.999,
            max_epochs: 500,
            patience: 50,
            steps_per_epoch: 250,
            batch_size: None,
            loss_weights: LossWeights::default(),
            weight_decay: 1e-2,
            grad_clip: 12.0,
            seed: 0,
            net: NetOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("invalid training config: {m}")));
        let w = self.loss_weights;
        if [w.bce, w.dice, w.vq, w.commit].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return bad("loss weights must be finite and >= 0".into());
        }
        if self.patience > self.max_epochs {
            return bad(format!("patience {} exceeds max_epochs {}", self.patience, self.max_epochs));
        }
        if self.max_epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == Some(0) {
            return bad("max_epochs, steps_per_epoch and batch_size must be positive".into());
        }
        if !(self.lr_init > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr_init {
            return bad("need 0 <= lr_min <= lr_init and lr_init > 0".into());
        }
        if self.step_every == 0 || !(self.step_factor > 0.0 && self.step_factor <= 1.0) {
            return bad("step schedule needs step_every > 0 and step_factor in (0, 1]".into());
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            return bad("weight_decay must be >= 0 and grad_clip > 0".into());
        }
        if !(self.net.codebook_decay > 0.0 && self.net.codebook_decay < 1.0) {
            return bad("codebook decay must lie in (0, 1)".into());
        }
        Ok(())
    }
}

pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    match cfg.schedule {
        Schedule::Cosine => {
            let t = epoch.min(cfg.max_epochs) as f64 / cfg.max_epochs as f64;
            cfg.lr_min + (cfg.lr_init - cfg.lr_min) * (1.0 + (PI * t).cos()) / 2.0
        }
        Schedule::Step => {
            let k = (epoch / cfg.step_every) as i32;
            (cfg.lr_init * cfg.step_factor.powi(k)).max(cfg.lr_min)
        }
    }
}

/// Mean BCE plus soft Dice of `sigmoid(logits)` against a binary target.
pub fn bce_dice_loss(logits: &[f32], target: &[f32]) -> Result<f64> {
    if logits.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "logits have {} elements, target {}",
            logits.len(),
            target.len()
        )));
    }
    let ps = ParamStore::<f32>::new();
    let mut t = Tape::new(&ps);
    let x = t.input(Tensor::from_vec(&[logits.len()], logits.to_vec())?);
    let bce = t.bce_with_logits(x, target)?;
    let dice = t.soft_dice_loss(x, target, DICE_EPS)?;
    Ok(t.value(bce).item() as f64 + t.value(dice).item() as f64)
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(sizes: &[usize], weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[Vec<f32>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (lr / c1) as f32;
        let c2s = c2.sqrt() as f32;
        let eps = self.eps as f32;
        let decay = (1.0 - lr * self.weight_decay) as f32;
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                p[j] = p[j] * decay - step * m[j] / (v[j].sqrt() / c2s + eps);
            }
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
    pub lr: f64,
    pub perplexity: f64,
    /// Set only for cascades: which of the two networks this epoch trained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
}

/// Mutable state of one network's optimisation.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub epoch: usize,
    pub net: SynergyUNet<f32>,
    pub optimizer: AdamW,
    pub best_val_dice: f64,
    pub best_epoch: usize,
    pub epochs_since_best: usize,
    pub rng: ChaCha8Rng,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: CheckpointModel,
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
}

/// A validation case on the network grid.
#[derive(Clone, Debug)]
pub struct ValCase {
    pub channels: Vec<Grid3<f32>>,
    pub mask: Grid3<u8>,
}

/// Hard Dice with the both-empty convention.
pub fn hard_dice(pred: &[u8], gt: &[u8]) -> f64 {
    let (mut tp, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        tp += (p != 0 && g != 0) as usize;
        np += (p != 0) as usize;
        ng += (g != 0) as usize;
    }
    if np + ng == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (np + ng) as f64
    }
}

fn validate_net(net: &SynergyUNet<f32>, patch: Shape3, val: &[ValCase]) -> Result<f64> {
    let sw = SlidingWindow { net, patch };
    let mut total = 0.0;
    for case in val {
        let refs: Vec<&Grid3<f32>> = case.channels.iter().collect();
        let logits = sw.predict_logits(&refs)?;
        let pred: Vec<u8> = logits.as_slice().iter().map(|&l| u8::from(l > 0.0)).collect();
        total += hard_dice(&pred, case.mask.as_slice());
    }
    Ok(total / val.len().max(1) as f64)
}

struct StepStats {
    loss: f64,
    perplexity: f64,
    pool: Vec<f32>,
}

fn train_step(state: &mut TrainState, sources: &[PatchSource], batch: usize, cfg: &TrainConfig, lr: f64, step: usize) -> Result<StepStats> {
    let b = sample_from(sources, batch, &mut state.rng);
    let net = &state.net;
    let w = cfg.loss_weights;
    let mut tape = Tape::new(&net.params);
    let x = tape.input(b.input);
    let pass = net.forward(&mut tape, x, &Quantizer::Live)?;
    let s = &pass.synergy;
    let bce = tape.bce_with_logits(pass.logits, &b.target)?;
    let dice = tape.soft_dice_loss(pass.logits, &b.target, DICE_EPS)?;
    let total = tape.weighted_sum(&[(bce, w.bce), (dice, w.dice), (s.vq_loss, w.vq), (s.commit_loss, w.commit)]);
    let loss = tape.value(total).item() as f64;
    if !loss.is_finite() {
        let v = |n| tape.value(n).item();
        return Err(Error::NonFiniteLoss {
            epoch: state.epoch,
            step,
            detail: format!(
                "bce {}, dice {}, vq {}, commit {}",
                v(bce),
                v(dice),
                v(s.vq_loss),
                v(s.commit_loss)
            ),
        });
    }
    let grads = tape.backward(total);
    let rows = locations_as_rows(tape.value(s.z))?;
    let indices = s.indices.clone();
    let perplexity = s.perplexity;
    drop(tape);

    let gradient_codebook = cfg.net.codebook_update == CodebookUpdate::Gradient;
    let mut gs: Vec<Vec<f32>> = grads
        .params
        .into_iter()
        .zip(state.net.params.iter())
        .map(|(g, p)| g.map_or_else(|| vec![0.0; p.value.numel()], Tensor::into_data))
        .collect();
    if gradient_codebook {
        let k = state.net.codebook.embeddings.numel();
        gs.push(grads.codebook.map_or_else(|| vec![0.0; k], Tensor::into_data));
    }
    clip_grad_norm(&mut gs, cfg.grad_clip);
    {
        let net = &mut state.net;
        let mut slices: Vec<&mut [f32]> = net.params.values_mut().map(|t| t.data_mut()).collect();
        if gradient_codebook {
            slices.push(net.codebook.embeddings.data_mut());
        }
        state.optimizer.step(&mut slices, &gs, lr);
    }
    if gradient_codebook {
        state.net.codebook.track_usage(&indices);
    } else {
        state.net.codebook.ema_update(&rows, &indices)?;
    }
    Ok(StepStats {
        loss,
        perplexity,
        pool: rows,
    })
}

/// Runs the epoch loop for one network and returns the best snapshot.
#[allow(clippy::too_many_arguments)]
fn fit(
    net: SynergyUNet<f32>,
    sources: &[PatchSource],
    val: &[ValCase],
    patch: Shape3,
    batch: usize,
    cfg: &TrainConfig,
    stage: Option<&str>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(TrainState, Vec<EpochRecord>)> {
    let mut sizes: Vec<usize> = net.params.iter().map(|p| p.value.numel()).collect();
    if cfg.net.codebook_update == CodebookUpdate::Gradient {
        sizes.push(net.codebook.embeddings.numel());
    }
    let mut state = TrainState {
        epoch: 0,
        optimizer: AdamW::new(&sizes, cfg.weight_decay),
        best_val_dice: f64::NEG_INFINITY,
        best_epoch: 0,
        epochs_since_best: 0,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15),
        net,
    };
    let mut best = state.net.clone();
    let mut history = Vec::new();
    for epoch in 0..cfg.max_epochs {
        state.epoch = epoch;
        let lr = lr_schedule(epoch, cfg);
        let mut loss_sum = 0.0;
        let mut perp_sum = 0.0;
        let mut pool = Vec::new();
        for step in 0..cfg.steps_per_epoch {
            let st = train_step(&mut state, sources, batch, cfg, lr, step)?;
            loss_sum += st.loss;
            perp_sum += st.perplexity;
            pool = st.pool;
        }
        state.net.codebook.reseed_dead(&pool, &mut state.rng);
        let val_dice = validate_net(&state.net, patch, val)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / cfg.steps_per_epoch as f64,
            val_dice,
            lr,
            perplexity: perp_sum / cfg.steps_per_epoch as f64,
            stage: stage.map(str::to_owned),
        };
        on_epoch(&rec);
        history.push(rec);
        if val_dice > state.best_val_dice {
            state.best_val_dice = val_dice;
            state.best_epoch = epoch;
            state.epochs_since_best = 0;
            best = state.net.clone();
        } else {
            state.epochs_since_best += 1;
            if state.epochs_since_best > cfg.patience {
                break;
            }
        }
    }
    state.net = best;
    Ok((state, history))
}

/// A training or validation case on the network grid.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub id: String,
    pub image: Grid3<f32>,
    pub mask: Grid3<u8>,
}

/// Loads the cases of a partition, resized to the plan's target shape and
/// z-score normalized.
pub fn load_prepared(manifest: &DatasetManifest, part: Partition, plan: &PlanConfig) -> Result<Vec<PreparedCase>> {
    manifest
        .cases_in(part)
        .par_iter()
        .map(|c| {
            let mask_path = c
                .mask
                .as_ref()
                .ok_or_else(|| Error::InvalidManifest(format!("case {} in {part:?} split has no mask", c.id)))?;
            let (v, m) = load_case(
                &manifest.resolve(&c.volume),
                Some(&manifest.resolve(mask_path)),
                LoadOptions::default(),
            )?;
            let m = m.expect("mask requested");
            let target = plan.target_shape;
            let image = prepare_volume(&v, target).data;
            let mask = if m.shape() == target {
                m.data
            } else {
                resample_grid_nearest(&m.data, target)
            };
            Ok(PreparedCase {
                id: c.id.clone(),
                image,
                mask,
            })
        })
        .collect()
}

fn shrink(cases: &[PreparedCase], shape: Shape3) -> Vec<PreparedCase> {
    cases
        .iter()
        .map(|c| PreparedCase {
            id: c.id.clone(),
            image: if c.image.shape() == shape { c.image.clone() } else { resample_grid(&c.image, shape) },
            mask: if c.mask.shape() == shape { c.mask.clone() } else { resample_grid_nearest(&c.mask, shape) },
        })
        .collect()
}

fn sources_of(cases: &[PreparedCase], priors: Option<&[Grid3<f32>]>, patch: Shape3) -> Result<Vec<PatchSource>> {
    cases
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut ch = vec![c.image.clone()];
            if let Some(p) = priors {
                ch.push(p[i].clone());
            }
            PatchSource::new(ch, c.mask.clone(), patch)
        })
        .collect()
}

fn val_of(cases: &[PreparedCase], priors: Option<&[Grid3<f32>]>) -> Vec<ValCase> {
    cases
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut channels = vec![c.image.clone()];
            if let Some(p) = priors {
                channels.push(p[i].clone());
            }
            ValCase {
                channels,
                mask: c.mask.clone(),
            }
        })
        .collect()
}

/// Trains on already prepared cases. Cascade plans train the low-resolution
/// network first, then the refining network on `[image, prior]` inputs.
pub fn train_prepared(
    train: &[PreparedCase],
    val: &[PreparedCase],
    plan: &PlanConfig,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    plan.validate()?;
    if train.is_empty() {
        return Err(Error::NoTrainingCases);
    }
    if val.is_empty() {
        return Err(Error::InvalidManifest("validation split is empty".into()));
    }
    let batch = cfg.batch_size.unwrap_or(plan.batch_size);
    let patch = plan.patch_size;
    let grid = network_grid(plan);
    match plan.variant {
        Variant::Fullres3d | Variant::Lowres3d => {
            let (tr, va) = (shrink(train, grid), shrink(val, grid));
            let net = SynergyUNet::from_plan(plan, 1, cfg.net, cfg.seed)?;
            let (state, history) = fit(net, &sources_of(&tr, None, patch)?, &val_of(&va, None), patch, batch, cfg, None, on_epoch)?;
            let model = CheckpointModel::Single(state.net);
            Ok(TrainOutcome {
                checkpoint: Checkpoint::from_model(&model, plan, state.best_epoch, state.best_val_dice),
                model,
                history,
                best_epoch: state.best_epoch,
                best_val_dice: state.best_val_dice,
            })
        }
        Variant::Cascade3d => {
            let scale = plan.lowres_scale.expect("validated plan");
            let low = lowres_shape(plan.target_shape, scale);
            let (tr, va) = (shrink(train, low), shrink(val, low));
            let net = SynergyUNet::from_plan(plan, 1, cfg.net, cfg.seed)?;
            let (low_state, mut history) = fit(
                net,
                &sources_of(&tr, None, patch)?,
                &val_of(&va, None),
                patch,
                batch,
                cfg,
                Some("lowres"),
                on_epoch,
            )?;
            let sw = SlidingWindow {
                net: &low_state.net,
                patch,
            };
            let prior = |cases: &[PreparedCase]| -> Result<Vec<Grid3<f32>>> {
                cases.iter().map(|c| cascade_prior(&sw as &dyn LogitPredictor, scale, &c.image)).collect()
            };
            let (tp, vp) = (prior(train)?, prior(val)?);
            let net = SynergyUNet::from_plan(plan, 2, cfg.net, cfg.seed.wrapping_add(1))?;
            let (full_state, h2) = fit(
                net,
                &sources_of(train, Some(&tp), patch)?,
                &val_of(val, Some(&vp)),
                patch,
                batch,
                cfg,
                Some("fullres"),
                on_epoch,
            )?;
            history.extend(h2);
            let model = CheckpointModel::Cascade(CascadeModel::new(low_state.net, full_state.net, scale)?);
            Ok(TrainOutcome {
                checkpoint: Checkpoint::from_model(&model, plan, full_state.best_epoch, full_state.best_val_dice),
                model,
                history,
                best_epoch: full_state.best_epoch,
                best_val_dice: full_state.best_val_dice,
            })
        }
    }
}

/// Loads the train and val partitions of a manifest and trains.
pub fn train(
    manifest: &DatasetManifest,
    plan: &PlanConfig,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let tr = load_prepared(manifest, Partition::Train, plan)?;
    let va = load_prepared(manifest, Partition::Val, plan)?;
    train_prepared(&tr, &va, plan, cfg, on_epoch)
}
