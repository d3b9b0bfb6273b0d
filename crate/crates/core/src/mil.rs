//! Slide-level multi-task prediction over bags of precomputed tile
//! embeddings.
//!
//! The aggregator is a linear projection to the model width, a stack of
//! pre-norm residual DMS blocks over the tile sequence, and global average
//! pooling. Tiles are put in raster order of their grid coordinates before
//! anything else, so the result does not depend on how a bag was stored.

use std::collections::{BTreeMap, HashSet};

use indexmap::IndexMap;
use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dms::{self, DmsConfig};
use crate::error::{Error, Result};
use crate::params::{join, Ctx, Mode, ParamSpec, ParamStore};
use crate::seeds;
use crate::tensor::{Scalar, Tensor};
use crate::nn;
use crate::train::{self, loss, EpochRecord, Phase, TrainConfig, TrainState};

const ROUND: u64 = 0x5155;

/// A per-task label. Missing labels are simply absent from the map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Class(usize),
    Value(f64),
}

/// One slide: `[n_tiles, embed_dim]` embeddings with grid coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub slide_id: String,
    pub embeddings: Tensor<f32>,
    pub coords: Vec<(u32, u32)>,
    pub labels: BTreeMap<String, Target>,
}

impl Bag {
    pub fn new(slide_id: impl Into<String>, embeddings: Tensor<f32>, coords: Vec<(u32, u32)>) -> Result<Self> {
        let bag = Bag {
            slide_id: slide_id.into(),
            embeddings,
            coords,
            labels: BTreeMap::new(),
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn with_label(mut self, task: impl Into<String>, target: Target) -> Self {
        self.labels.insert(task.into(), target);
        self
    }

    pub fn n_tiles(&self) -> usize {
        self.coords.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings.shape().get(1).copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.embeddings.shape();
        if s.len() != 2 {
            return Err(Error::shape("bag", format!("embeddings must be [n, d], got {s:?}")));
        }
        if self.coords.is_empty() {
            return Err(Error::Invalid(format!("bag `{}` is empty", self.slide_id)));
        }
        if s[0] != self.coords.len() {
            return Err(Error::shape(
                "bag",
                format!("{} embeddings but {} coordinates", s[0], self.coords.len()),
            ));
        }
        let mut seen = HashSet::with_capacity(self.coords.len());
        if let Some(dup) = self.coords.iter().find(|c| !seen.insert(**c)) {
            return Err(Error::Invalid(format!(
                "bag `{}`: duplicate tile coordinate {dup:?}",
                self.slide_id
            )));
        }
        Ok(())
    }

    /// Tile indices in raster order (row, then column).
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.coords.len()).collect();
        order.sort_by_key(|&i| self.coords[i]);
        order
    }

    /// `[len, d]` embeddings of the given tiles, in the given order.
    pub fn gather(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        let d = self.embed_dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&self.embeddings.data()[i * d..(i + 1) * d]);
        }
        Tensor::new(vec![idx.len(), d], data)
    }

    /// The bag reordered canonically.
    pub fn canonical(&self) -> Result<Bag> {
        let order = self.canonical_order();
        Ok(Bag {
            slide_id: self.slide_id.clone(),
            embeddings: self.gather(&order)?,
            coords: order.iter().map(|&i| self.coords[i]).collect(),
            labels: self.labels.clone(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    #[serde(default)]
    pub num_classes: Option<usize>,
    /// Weight of this task in the joint loss.
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

impl TaskSpec {
    pub fn classification(name: impl Into<String>, num_classes: usize) -> Self {
        TaskSpec {
            name: name.into(),
            kind: TaskKind::Classification,
            num_classes: Some(num_classes),
            weight: 1.0,
        }
    }

    pub fn regression(name: impl Into<String>) -> Self {
        TaskSpec {
            name: name.into(),
            kind: TaskKind::Regression,
            num_classes: None,
            weight: 1.0,
        }
    }

    /// Width of this task's head.
    pub fn outputs(&self) -> usize {
        match self.kind {
            TaskKind::Classification => self.num_classes.unwrap_or(0),
            TaskKind::Regression => 1,
        }
    }

    fn check_target(&self, t: Target) -> Result<()> {
        match (self.kind, t) {
            (TaskKind::Classification, Target::Class(c)) if c < self.outputs() => Ok(()),
            (TaskKind::Regression, Target::Value(v)) if v.is_finite() => Ok(()),
            // Integral values in a text manifest parse as classes.
            (TaskKind::Regression, Target::Class(_)) => Ok(()),
            _ => Err(Error::Invalid(format!("label {t:?} does not fit task `{}`", self.name))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MilConfig {
    /// Read from the bag files; never assumed.
    pub embed_dim: usize,
    pub model_dim: usize,
    pub depth: usize,
    pub state_dim: usize,
    pub tasks: Vec<TaskSpec>,
}

impl MilConfig {
    pub fn new(embed_dim: usize, tasks: Vec<TaskSpec>) -> Self {
        MilConfig {
            embed_dim,
            model_dim: 64,
            depth: 2,
            state_dim: 8,
            tasks,
        }
    }

    pub fn dms(&self) -> DmsConfig {
        DmsConfig::new(self.model_dim, self.state_dim)
    }

    pub fn task(&self, name: &str) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Invalid(format!("unknown task `{name}`")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.model_dim == 0 {
            return Err(Error::Config("embed_dim and model_dim must be positive".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        let mut names = HashSet::new();
        for t in &self.tasks {
            if !names.insert(t.name.as_str()) {
                return Err(Error::Config(format!("duplicate task name `{}`", t.name)));
            }
            match (t.kind, t.num_classes) {
                (TaskKind::Classification, Some(k)) if k >= 2 => {}
                (TaskKind::Classification, _) => {
                    return Err(Error::Config(format!("task `{}` needs num_classes >= 2", t.name)))
                }
                (TaskKind::Regression, Some(_)) => {
                    return Err(Error::Config(format!("regression task `{}` takes no num_classes", t.name)))
                }
                (TaskKind::Regression, None) => {}
            }
            if !(t.weight >= 0.0) {
                return Err(Error::Config(format!("task `{}` weight must be non-negative", t.name)));
            }
        }
        self.dms().validate()
    }

    /// Checks a bag against the configuration and its labels against the
    /// task list.
    pub fn check_bag(&self, bag: &Bag) -> Result<()> {
        bag.validate()?;
        if bag.embed_dim() != self.embed_dim {
            return Err(Error::shape(
                "bag",
                format!("`{}` has embed_dim {}, model expects {}", bag.slide_id, bag.embed_dim(), self.embed_dim),
            ));
        }
        for (name, &t) in &bag.labels {
            self.task(name)?.check_target(t)?;
        }
        Ok(())
    }
}

pub fn head_name(task: &str) -> String {
    format!("mil.heads.{task}")
}

pub fn param_specs(cfg: &MilConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let mut v = nn::linear_specs("mil.proj", cfg.embed_dim, cfg.model_dim, true);
    for j in 0..cfg.depth {
        let p = format!("mil.blocks.{j}");
        v.extend(nn::layer_norm_specs(&join(&p, "norm"), cfg.model_dim));
        v.extend(dms::param_specs(&join(&p, "dms"), &cfg.dms())?);
    }
    for t in &cfg.tasks {
        v.extend(nn::linear_specs(&head_name(&t.name), cfg.model_dim, t.outputs(), true));
    }
    Ok(v)
}

pub fn init<T: Scalar>(cfg: &MilConfig, seed: u64) -> Result<ParamStore<T>> {
    Ok(ParamStore::init(&param_specs(cfg)?, &mut ChaCha8Rng::seed_from_u64(seed)))
}

/// `[B, n, embed_dim]` tile sequences (already in canonical order) to
/// `[B, model_dim]` slide vectors.
pub fn aggregate_tokens<'t, T: Scalar>(ctx: &Ctx<'t, T>, cfg: &MilConfig, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 3 || s[2] != cfg.embed_dim {
        return Err(Error::shape(
            "aggregate",
            format!("expected [B, n, {}], got {s:?}", cfg.embed_dim),
        ));
    }
    let mut t = nn::linear(ctx, "mil.proj", x)?;
    for j in 0..cfg.depth {
        let p = format!("mil.blocks.{j}");
        let y = nn::layer_norm(ctx, &join(&p, "norm"), t)?;
        t = t.add(dms::forward(ctx, &join(&p, "dms"), &cfg.dms(), y)?)?;
    }
    t.mean_axis(1)
}

/// Slide vector `[1, model_dim]` of a bag, after canonical reordering.
pub fn aggregate<'t, T: Scalar>(ctx: &Ctx<'t, T>, cfg: &MilConfig, bag: &Bag) -> Result<Var<'t, T>> {
    cfg.check_bag(bag)?;
    let x = bag.gather(&bag.canonical_order())?;
    aggregate_subset(ctx, cfg, x)
}

fn aggregate_subset<'t, T: Scalar>(ctx: &Ctx<'t, T>, cfg: &MilConfig, x: Tensor<f32>) -> Result<Var<'t, T>> {
    let n = x.shape()[0];
    let x = x.cast::<T>().reshaped(&[1, n, cfg.embed_dim])?;
    aggregate_tokens(ctx, cfg, ctx.tape().constant(x))
}

/// Per-task head outputs: `[B, K]` logits or `[B, 1]` regression values.
pub fn mtl_forward<'t, T: Scalar>(
    ctx: &Ctx<'t, T>,
    cfg: &MilConfig,
    slide: Var<'t, T>,
) -> Result<IndexMap<String, Var<'t, T>>> {
    cfg.tasks
        .iter()
        .map(|t| Ok((t.name.clone(), nn::linear(ctx, &head_name(&t.name), slide)?)))
        .collect()
}

/// Weighted sum over tasks of each task's loss on one slide's outputs.
/// Tasks without a label, or with zero weight, add no node to the graph,
/// so their heads receive exactly zero gradient. `None` when no task
/// contributes.
pub fn joint_loss<'t, T: Scalar>(
    cfg: &MilConfig,
    outputs: &IndexMap<String, Var<'t, T>>,
    labels: &BTreeMap<String, Target>,
) -> Result<Option<Var<'t, T>>> {
    for name in labels.keys().chain(outputs.keys()) {
        cfg.task(name)?;
    }
    let mut total: Option<Var<'t, T>> = None;
    for task in &cfg.tasks {
        let (Some(&target), Some(&out)) = (labels.get(&task.name), outputs.get(&task.name)) else {
            continue;
        };
        if task.weight == 0.0 {
            continue;
        }
        task.check_target(target)?;
        let l = match (task.kind, target) {
            (TaskKind::Classification, Target::Class(c)) => {
                loss::cross_entropy(out, &loss::one_hot(&[c], task.outputs())?)?
            }
            (TaskKind::Regression, t) => {
                let v = match t {
                    Target::Value(v) => v,
                    Target::Class(c) => c as f64,
                };
                loss::mae(out, &Tensor::from_f64(&[1, 1], &[v])?)?
            }
            _ => unreachable!("checked above"),
        };
        let l = if task.weight == 1.0 { l } else { l.scale(task.weight) };
        total = Some(match total {
            Some(acc) => acc.add(l)?,
            None => l,
        });
    }
    Ok(total)
}

/// How tiles are drawn in each inference round.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resampling {
    pub n_rounds: usize,
    /// `None` uses the whole bag every round.
    pub tiles_per_round: Option<usize>,
    pub replacement: bool,
}

impl Default for Resampling {
    fn default() -> Self {
        Resampling {
            n_rounds: 15,
            tiles_per_round: None,
            replacement: false,
        }
    }
}

/// Tile indices for round `r`, in canonical order.
pub fn round_sample(bag: &Bag, rs: &Resampling, seed: u64, r: usize) -> Result<Vec<usize>> {
    let n = bag.n_tiles();
    let canon = bag.canonical_order();
    let k = match rs.tiles_per_round {
        None => return Ok(canon),
        Some(0) => return Err(Error::Invalid("tiles_per_round must be positive".into())),
        Some(k) => k,
    };
    let mut rng = seeds::rng(seed, &[ROUND, r as u64]);
    let mut ranks: Vec<usize> = if rs.replacement {
        (0..k).map(|_| rng.random_range(0..n)).collect()
    } else if k <= n {
        index::sample(&mut rng, n, k).into_vec()
    } else {
        return Err(Error::Invalid(format!(
            "{k} tiles per round from a bag of {n} needs sampling with replacement"
        )));
    };
    // Sampled positions index the canonical order, so sorting them keeps
    // the subsequence in raster order.
    ranks.sort_unstable();
    Ok(ranks.into_iter().map(|i| canon[i]).collect())
}

/// Eval-mode outputs per task for one bag, with no sampling.
pub fn predict<T: Scalar>(cfg: &MilConfig, params: &ParamStore<T>, bag: &Bag) -> Result<IndexMap<String, Vec<f64>>> {
    let rs = Resampling {
        n_rounds: 1,
        ..Resampling::default()
    };
    predict_with_resampling(cfg, params, bag, &rs, 0)
}

/// Mean of per-round outputs: logits for classification tasks (averaged
/// before any softmax), values for regression tasks.
pub fn predict_with_resampling<T: Scalar>(
    cfg: &MilConfig,
    params: &ParamStore<T>,
    bag: &Bag,
    rs: &Resampling,
    seed: u64,
) -> Result<IndexMap<String, Vec<f64>>> {
    cfg.check_bag(bag)?;
    if rs.n_rounds == 0 {
        return Err(Error::Invalid("n_rounds must be positive".into()));
    }
    let mut acc: IndexMap<String, Vec<f64>> = cfg
        .tasks
        .iter()
        .map(|t| (t.name.clone(), vec![0.0; t.outputs()]))
        .collect();
    for r in 0..rs.n_rounds {
        let idx = round_sample(bag, rs, seed, r)?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, params, ParamStore::new(), Mode::Eval, false);
        let slide = aggregate_subset(&ctx, cfg, bag.gather(&idx)?)?;
        for (name, out) in mtl_forward(&ctx, cfg, slide)? {
            let v = out.value();
            for (a, &x) in acc[&name].iter_mut().zip(v.data()) {
                *a += x.to_f64_lossy();
            }
        }
    }
    for v in acc.values_mut() {
        v.iter_mut().for_each(|x| *x /= rs.n_rounds as f64);
    }
    Ok(acc)
}

/// One update on a minibatch of bags; the loss is the mean joint loss
/// over bags that carry at least one label. `None` if none do.
pub fn mil_step(
    cfg: &MilConfig,
    tc: &TrainConfig,
    lr: f64,
    state: &mut TrainState,
    bags: &[&Bag],
) -> Result<Option<f64>> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &state.params, ParamStore::new(), Mode::Train, true);
    let mut losses = Vec::new();
    for bag in bags {
        let out = mtl_forward(&ctx, cfg, aggregate(&ctx, cfg, bag)?)?;
        losses.extend(joint_loss(cfg, &out, &bag.labels)?);
    }
    let Some(&first) = losses.first() else {
        return Ok(None);
    };
    let n = losses.len();
    let total = losses[1..].iter().try_fold(first, |acc, &l| acc.add(l))?;
    let loss = total.scale(1.0 / n as f64);
    let value = train::finite_loss(loss.value().item(), state.step())?;
    let grads = ctx.param_grads(&tape.backward(loss)?);
    train::apply_update(tc, state, grads, lr)?;
    Ok(Some(value))
}

/// Trains from `state.epoch` to `tc.epochs`, one log record per epoch.
pub fn run_mil(
    cfg: &MilConfig,
    tc: &TrainConfig,
    seed: u64,
    bags: &[Bag],
    state: &mut TrainState,
    log: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<()> {
    tc.validate()?;
    if tc.mixup_alpha.is_some() || tc.random_crop {
        return Err(Error::Config("mixup and random_crop do not apply to bag training".into()));
    }
    if bags.is_empty() {
        return Err(Error::Invalid("no training bags".into()));
    }
    for b in bags {
        cfg.check_bag(b)?;
    }
    let sched = tc.schedule(bags.len());
    while state.epoch < tc.epochs && state.step() < sched.total_steps {
        let e = state.epoch;
        let (mut total, mut batches, mut lr) = (0.0, 0, 0.0);
        for idx in train::epoch_order(bags.len(), seed, e).chunks(tc.batch_size) {
            if state.step() >= sched.total_steps {
                break;
            }
            let batch: Vec<&Bag> = idx.iter().map(|&i| &bags[i]).collect();
            lr = sched.lr_at(state.step());
            if let Some(l) = mil_step(cfg, tc, lr, state, &batch)? {
                total += l;
                batches += 1;
            }
        }
        state.epoch += 1;
        log(&EpochRecord {
            phase: Phase::Mil,
            epoch: state.epoch,
            step: state.step(),
            lr,
            loss: total / batches.max(1) as f64,
            metrics: IndexMap::new(),
        })?;
    }
    Ok(())
}
