//! Training loops for masked pretraining and supervised fine-tuning.
//!
//! Both loops are single-threaded and fully determined by the seed: the
//! epoch order, every crop, mask and Mixup draw comes from its own stream
//! derived from `(seed, purpose, epoch, index)`.

pub mod augment;
pub mod loss;
pub mod optim;
pub mod schedule;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::mamim::{self, MamimConfig, MaskSpec};
use crate::params::{Ctx, Mode, ParamStore};
use crate::seeds;
use crate::tensor::Tensor;

use self::augment::CropParams;
use self::optim::{AdamW, OptimState};
use self::schedule::CosineSchedule;

const EPOCH: u64 = 1;
const CROP: u64 = 2;
const MASK: u64 = 3;
const MIXUP: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
    /// Slide-level multi-task training of the MIL aggregator.
    Mil,
}

impl Phase {
    pub fn code(self) -> u8 {
        match self {
            Phase::Pretrain => 0,
            Phase::Finetune => 1,
            Phase::Mil => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Phase::Pretrain),
            1 => Some(Phase::Finetune),
            2 => Some(Phase::Mil),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Defaults to `base_lr / 100`.
    #[serde(default)]
    pub min_lr: Option<f64>,
    pub weight_decay: f64,
    /// Mixup Beta parameter; `None` disables Mixup.
    #[serde(default)]
    pub mixup_alpha: Option<f64>,
    /// Global gradient-norm cap; `None` disables clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub random_crop: bool,
    /// Stop after this many optimizer steps.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl TrainConfig {
    /// The full-scale recipe.
    pub fn paper(phase: Phase) -> Self {
        let base = TrainConfig {
            epochs: 100,
            warmup_epochs: 10,
            batch_size: 64,
            base_lr: 5e-5,
            min_lr: None,
            weight_decay: 0.05,
            mixup_alpha: None,
            grad_clip: Some(5.0),
            random_crop: true,
            max_steps: None,
        };
        match phase {
            Phase::Pretrain => base,
            Phase::Finetune => TrainConfig {
                batch_size: 8,
                base_lr: 1e-3,
                mixup_alpha: Some(0.2),
                ..base
            },
            // Bags are precomputed embeddings: no image augmentation.
            Phase::Mil => TrainConfig {
                batch_size: 8,
                base_lr: 1e-3,
                random_crop: false,
                ..base
            },
        }
    }

    /// Desk-scale runs: short schedules on 32x32 synthetic data.
    pub fn desk(phase: Phase) -> Self {
        match phase {
            Phase::Pretrain => TrainConfig {
                epochs: 20,
                warmup_epochs: 2,
                batch_size: 16,
                base_lr: 3e-3,
                random_crop: false,
                ..Self::paper(Phase::Pretrain)
            },
            Phase::Finetune => TrainConfig {
                epochs: 20,
                warmup_epochs: 1,
                base_lr: 5e-3,
                random_crop: false,
                max_steps: Some(200),
                ..Self::paper(Phase::Finetune)
            },
            Phase::Mil => TrainConfig {
                epochs: 30,
                warmup_epochs: 2,
                batch_size: 4,
                ..Self::paper(Phase::Mil)
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        let min_ok = self.min_lr.is_none_or(|m| m > 0.0);
        if !(self.base_lr > 0.0) || !min_ok || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rates must be positive, weight decay non-negative".into()));
        }
        if let Some(a) = self.mixup_alpha {
            if !(a > 0.0) {
                return Err(Error::Config(format!("mixup alpha must be positive, got {a}")));
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn schedule(&self, n: usize) -> CosineSchedule {
        let spe = self.steps_per_epoch(n);
        let total = self.epochs * spe;
        CosineSchedule {
            base_lr: self.base_lr,
            min_lr: self.min_lr.unwrap_or(self.base_lr / 100.0),
            warmup_steps: self.warmup_epochs * spe,
            total_steps: self.max_steps.map_or(total, |m| m.min(total)),
        }
    }

    pub(crate) fn optimizer(&self) -> AdamW {
        AdamW {
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }
}

/// Everything a run mutates: parameters, BN statistics, optimizer moments
/// and the completed-epoch count.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore<f32>,
    pub buffers: ParamStore<f32>,
    pub opt: OptimState<f32>,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(params: ParamStore<f32>, buffers: ParamStore<f32>) -> Self {
        let opt = OptimState::new(&params);
        TrainState {
            params,
            buffers,
            opt,
            epoch: 0,
        }
    }

    pub fn step(&self) -> usize {
        self.opt.step as usize
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(flatten)]
    pub metrics: IndexMap<String, f64>,
}

pub(crate) fn apply_update(tc: &TrainConfig, state: &mut TrainState, mut grads: ParamStore<f32>, lr: f64) -> Result<()> {
    if let Some(c) = tc.grad_clip {
        optim::clip_grad_norm(&mut grads, c);
    }
    tc.optimizer().step(&mut state.params, &grads, &mut state.opt, lr)
}

pub(crate) fn finite_loss(v: f32, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v as f64)
    } else {
        Err(Error::NonFinite(format!("loss {v} at step {}", step + 1)))
    }
}

/// One masked-reconstruction update on `images [B, H, W, 3]`.
pub fn pretrain_step(
    cfg: &MamimConfig,
    tc: &TrainConfig,
    lr: f64,
    state: &mut TrainState,
    images: &Tensor<f32>,
    masks: &[MaskSpec],
) -> Result<f64> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &state.params, state.buffers.clone(), Mode::Train, true);
    let pred = mamim::forward(&ctx, cfg, tape.constant(images.clone()), masks)?;
    let target = mamim::patchify(images, cfg.encoder.patch_size)?;
    let loss = mamim::mamim_loss(pred, &target, masks)?;
    let value = finite_loss(loss.value().item(), state.step())?;
    let grads = ctx.param_grads(&tape.backward(loss)?);
    let buffers = ctx.into_buffers();
    apply_update(tc, state, grads, lr)?;
    state.buffers = buffers;
    Ok(value)
}

/// One classification update; `targets` are `[B, K]` (soft) labels.
pub fn finetune_step(
    cfg: &EncoderConfig,
    tc: &TrainConfig,
    lr: f64,
    state: &mut TrainState,
    images: &Tensor<f32>,
    targets: &Tensor<f32>,
) -> Result<f64> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &state.params, state.buffers.clone(), Mode::Train, true);
    let logits = backbone::classify(&ctx, cfg, tape.constant(images.clone()))?;
    let loss = loss::cross_entropy(logits, targets)?;
    let value = finite_loss(loss.value().item(), state.step())?;
    let grads = ctx.param_grads(&tape.backward(loss)?);
    let buffers = ctx.into_buffers();
    apply_update(tc, state, grads, lr)?;
    state.buffers = buffers;
    Ok(value)
}

pub(crate) fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds::rng(seed, &[EPOCH, epoch as u64]));
    order
}

fn load_batch(images: &[Tensor<f32>], idx: &[usize], crop: Option<(u64, usize, usize)>) -> Result<Tensor<f32>> {
    let items = idx
        .iter()
        .map(|&i| match crop {
            Some((seed, epoch, size)) => {
                let mut rng = seeds::rng(seed, &[CROP, epoch as u64, i as u64]);
                augment::random_resized_crop(&images[i], size, &CropParams::default(), &mut rng)
            }
            None => Ok(images[i].clone()),
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items.iter().collect::<Vec<_>>())
}

fn check_images(images: &[Tensor<f32>]) -> Result<usize> {
    let first = images.first().ok_or_else(|| Error::Invalid("no training images".into()))?;
    match *first.shape() {
        [h, w, _] if h == w => Ok(h),
        ref s => Err(Error::shape("train", format!("expected square [S, S, C] images, got {s:?}"))),
    }
}

/// Masked-image pretraining from `state.epoch` to `tc.epochs` over
/// normalized `[S, S, 3]` images. `log` receives one record per epoch.
pub fn run_pretrain(
    cfg: &MamimConfig,
    tc: &TrainConfig,
    seed: u64,
    images: &[Tensor<f32>],
    state: &mut TrainState,
    log: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<()> {
    tc.validate()?;
    let size = check_images(images)?;
    let sched = tc.schedule(images.len());
    let grid = size / cfg.encoder.patch_size;
    let limit = sched.total_steps;
    while state.epoch < tc.epochs && state.step() < limit {
        let e = state.epoch;
        let (mut total, mut batches, mut lr) = (0.0, 0, 0.0);
        for idx in epoch_order(images.len(), seed, e).chunks(tc.batch_size) {
            if state.step() >= limit {
                break;
            }
            let x = load_batch(images, idx, tc.random_crop.then_some((seed, e, size)))?;
            let masks = idx
                .iter()
                .map(|&i| mamim::make_mask(grid, grid, cfg.mask_ratio, seeds::derive(seed, &[MASK, e as u64, i as u64])))
                .collect::<Result<Vec<_>>>()?;
            lr = sched.lr_at(state.step());
            total += pretrain_step(cfg, tc, lr, state, &x, &masks)?;
            batches += 1;
        }
        state.epoch += 1;
        log(&EpochRecord {
            phase: Phase::Pretrain,
            epoch: state.epoch,
            step: state.step(),
            lr,
            loss: total / batches.max(1) as f64,
            metrics: IndexMap::new(),
        })?;
    }
    Ok(())
}

/// Supervised fine-tuning. After every optimizer step `on_step` sees the
/// state and may return `true` to stop early.
#[allow(clippy::too_many_arguments)]
pub fn run_finetune(
    cfg: &EncoderConfig,
    tc: &TrainConfig,
    seed: u64,
    images: &[Tensor<f32>],
    labels: &[usize],
    state: &mut TrainState,
    on_step: &mut dyn FnMut(&TrainState) -> Result<bool>,
    log: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<()> {
    tc.validate()?;
    let size = check_images(images)?;
    if labels.len() != images.len() {
        return Err(Error::Invalid(format!("{} images but {} labels", images.len(), labels.len())));
    }
    let sched = tc.schedule(images.len());
    let limit = sched.total_steps;
    let mut stop = false;
    while !stop && state.epoch < tc.epochs && state.step() < limit {
        let e = state.epoch;
        let (mut total, mut batches, mut lr) = (0.0, 0, 0.0);
        let mut seen = 0usize;
        for (bi, idx) in epoch_order(images.len(), seed, e).chunks(tc.batch_size).enumerate() {
            if stop || state.step() >= limit {
                break;
            }
            let x = load_batch(images, idx, tc.random_crop.then_some((seed, e, size)))?;
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let y = loss::one_hot::<f32>(&batch_labels, cfg.num_classes)?;
            let (x, y) = match tc.mixup_alpha {
                Some(a) if idx.len() > 1 => {
                    let mut rng = seeds::rng(seed, &[MIXUP, e as u64, bi as u64]);
                    let m = augment::mixup(&x, &y, a, &mut rng)?;
                    (m.x, m.y)
                }
                _ => (x, y),
            };
            lr = sched.lr_at(state.step());
            total += finetune_step(cfg, tc, lr, state, &x, &y)?;
            batches += 1;
            seen += idx.len();
            stop = on_step(state)?;
        }
        state.epoch += 1;
        let mut metrics = IndexMap::new();
        if seen > 0 {
            let logits = predict_logits(cfg, &state.params, &state.buffers, images, tc.batch_size.max(16))?;
            let correct = logits
                .iter()
                .zip(labels)
                .filter(|(l, &y)| argmax(l) == y)
                .count();
            metrics.insert("train_acc".into(), 100.0 * correct as f64 / images.len() as f64);
        }
        log(&EpochRecord {
            phase: Phase::Finetune,
            epoch: state.epoch,
            step: state.step(),
            lr,
            loss: total / batches.max(1) as f64,
            metrics,
        })?;
    }
    Ok(())
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Eval-mode logits for each image, batched.
pub fn predict_logits(
    cfg: &EncoderConfig,
    params: &ParamStore<f32>,
    buffers: &ParamStore<f32>,
    images: &[Tensor<f32>],
    batch: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, params, buffers.clone(), Mode::Eval, false);
        let x = Tensor::stack(&chunk.iter().collect::<Vec<_>>())?;
        let logits = backbone::classify(&ctx, cfg, tape.constant(x))?;
        let v = logits.value();
        out.extend(v.rows().map(|r| r.iter().map(|&x| x as f64).collect::<Vec<_>>()));
    }
    Ok(out)
}

/// Mean masked-reconstruction loss over `images` with masks drawn from
/// `seed`, in eval mode.
pub fn eval_reconstruction(
    cfg: &MamimConfig,
    params: &ParamStore<f32>,
    buffers: &ParamStore<f32>,
    images: &[Tensor<f32>],
    seed: u64,
    batch: usize,
) -> Result<f64> {
    let size = check_images(images)?;
    let grid = size / cfg.encoder.patch_size;
    let (mut total, mut n) = (0.0, 0);
    for (ci, chunk) in images.chunks(batch.max(1)).enumerate() {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, params, buffers.clone(), Mode::Eval, false);
        let x = Tensor::stack(&chunk.iter().collect::<Vec<_>>())?;
        let masks = (0..chunk.len())
            .map(|i| mamim::make_mask(grid, grid, cfg.mask_ratio, seeds::derive(seed, &[MASK, ci as u64, i as u64])))
            .collect::<Result<Vec<_>>>()?;
        let pred = mamim::forward(&ctx, cfg, tape.constant(x.clone()), &masks)?;
        let loss = mamim::mamim_loss(pred, &mamim::patchify(&x, cfg.encoder.patch_size)?, &masks)?;
        total += loss.value().item() as f64 * chunk.len() as f64;
        n += chunk.len();
    }
    Ok(total / n as f64)
}
