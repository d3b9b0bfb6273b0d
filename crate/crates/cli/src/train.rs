use std::cell::RefCell;
use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, ValueEnum};
use serde::Serialize;
use ssmamba_core::backbone::{self, EncoderConfig};
use ssmamba_core::io::checkpoint::Checkpoint;
use ssmamba_core::io::dataset::{self, NormStats, Split};
use ssmamba_core::io::JsonlLog;
use ssmamba_core::mamim;
use ssmamba_core::train::{self, EpochRecord, Phase, TrainState};

use crate::config::{Settings, TrainFlags};
use crate::data::{self, ImageRun};

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Directory of PNG/PPM images, searched recursively.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics log (JSON lines); defaults to OUT with a .jsonl extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue a pretraining run from its checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// Dataset root with one subdirectory per class.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Take the encoder weights from a pretraining checkpoint.
    #[arg(long, conflicts_with = "resume")]
    pub init: Option<PathBuf>,
    /// Continue a fine-tuning run from its checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Seed of the 7:1:2 split, separate from --seed so that runs with
    /// different training seeds share one split.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Measure accuracy on --probe-split every N optimizer steps.
    #[arg(long)]
    pub probe_every: Option<usize>,
    #[arg(long, value_enum, default_value = "val")]
    pub probe_split: SplitArg,
    /// Stop as soon as the probe accuracy (percent) reaches this value.
    #[arg(long, requires = "probe_every")]
    pub stop_at_acc: Option<f64>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Serialize)]
struct ProbeRecord<'a> {
    phase: Phase,
    step: usize,
    probe: &'a str,
    acc: f64,
}

fn progress(r: &EpochRecord) {
    let extra: String = r.metrics.iter().map(|(k, v)| format!(" {k} {v:.2}")).collect();
    eprintln!("epoch {:>3} step {:>5} lr {:.2e} loss {:.5}{extra}", r.epoch, r.step, r.lr, r.loss);
}

pub fn pretrain(s: &Settings, a: &PretrainArgs) -> Result<()> {
    let (mut run, mut state, log) = match &a.resume {
        Some(path) => {
            let (ck, mut run) = data::load_checkpoint(path, Phase::Pretrain)?;
            a.train.apply(&mut run.train);
            run.train.validate()?;
            let log = JsonlLog::append(a.log.as_deref().unwrap_or(&data::default_log(&a.out)))?;
            (run, ck.train_state(), log)
        }
        None => {
            let cfg = s.mamim()?;
            let (p, b) = mamim::init(&cfg, s.seed)?;
            let run = ImageRun {
                encoder: cfg.encoder.clone(),
                mamim: Some(cfg),
                train: s.train(Phase::Pretrain, &a.train)?,
                image_size: s.image_size,
                norm: NormStats::identity(),
                seed: s.seed,
                classes: Vec::new(),
                split_seed: 0,
            };
            let log = JsonlLog::create(a.log.as_deref().unwrap_or(&data::default_log(&a.out)))?;
            (run, TrainState::new(p, b), log)
        }
    };
    let Some(cfg) = run.mamim.clone() else {
        bail!("checkpoint has no masked-image model configuration");
    };
    let raw = data::load_images(&data::collect_images(&a.data)?, run.image_size)?;
    if a.resume.is_none() {
        run.norm = NormStats::compute(&raw)?;
    }
    let images = data::normalize(&raw, &run.norm);
    eprintln!(
        "pretraining on {} images, {} steps/epoch, epochs {}..{}",
        images.len(),
        run.train.steps_per_epoch(images.len()),
        state.epoch,
        run.train.epochs
    );
    let mut log = log;
    train::run_pretrain(&cfg, &run.train, run.seed, &images, &mut state, &mut |r| {
        progress(r);
        log.write(r)
    })?;
    Checkpoint::new(Phase::Pretrain, &run, &state, true)?.save(&a.out)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

pub fn finetune(s: &Settings, a: &FinetuneArgs) -> Result<()> {
    let (run, mut state, log) = match &a.resume {
        Some(path) => {
            let (ck, mut run) = data::load_checkpoint(path, Phase::Finetune)?;
            a.train.apply(&mut run.train);
            run.train.validate()?;
            let log = JsonlLog::append(a.log.as_deref().unwrap_or(&data::default_log(&a.out)))?;
            (run, ck.train_state(), log)
        }
        None => {
            let m = dataset::load_dataset(&a.data, a.split_seed)?;
            let (encoder, image_size, pre) = match &a.init {
                Some(path) => {
                    let (ck, pre) = data::load_checkpoint(path, Phase::Pretrain)?;
                    (pre.encoder.clone(), pre.image_size, Some(ck))
                }
                None => (s.encoder.clone(), s.image_size, None),
            };
            let encoder = EncoderConfig { num_classes: m.classes.len(), ..encoder };
            let (mut p, mut b) = backbone::init_classifier(&encoder, s.seed)?;
            if let Some(ck) = &pre {
                let n = p.load_prefix(&ck.params, "encoder.")? + b.load_prefix(&ck.buffers, "encoder.")?;
                eprintln!("loaded {n} pretrained encoder tensors");
            }
            let (raw, _) = dataset::load_split(&m, Split::Train, image_size)?;
            let run = ImageRun {
                encoder,
                mamim: None,
                train: s.train(Phase::Finetune, &a.train)?,
                image_size,
                norm: NormStats::compute(&raw)?,
                seed: s.seed,
                classes: m.classes.clone(),
                split_seed: a.split_seed,
            };
            let log = JsonlLog::create(a.log.as_deref().unwrap_or(&data::default_log(&a.out)))?;
            (run, TrainState::new(p, b), log)
        }
    };
    let m = dataset::load_dataset(&a.data, run.split_seed)?;
    if m.classes != run.classes {
        bail!("{}: classes {:?} differ from the checkpoint's {:?}", a.data.display(), m.classes, run.classes);
    }
    let (raw, labels) = dataset::load_split(&m, Split::Train, run.image_size)?;
    let images = data::normalize(&raw, &run.norm);
    let probe = match a.probe_every {
        Some(0) => bail!("--probe-every must be positive"),
        Some(n) => {
            let split = Split::from(a.probe_split);
            let (raw, y) = dataset::load_split(&m, split, run.image_size)?;
            Some((n, split, data::normalize(&raw, &run.norm), y))
        }
        None => None,
    };
    eprintln!(
        "fine-tuning on {} images ({} classes), {} steps/epoch, max {} steps",
        images.len(),
        run.classes.len(),
        run.train.steps_per_epoch(images.len()),
        run.train.schedule(images.len()).total_steps
    );

    let log = RefCell::new(log);
    let mut reached = None;
    let mut on_step = |st: &TrainState| -> ssmamba_core::Result<bool> {
        let Some((every, split, imgs, y)) = &probe else {
            return Ok(false);
        };
        if st.step() % every != 0 {
            return Ok(false);
        }
        let logits = train::predict_logits(&run.encoder, &st.params, &st.buffers, imgs, 32)?;
        let correct = logits.iter().zip(y).filter(|(l, &c)| train::argmax(l) == c).count();
        let acc = 100.0 * correct as f64 / y.len() as f64;
        log.borrow_mut().write(&ProbeRecord {
            phase: Phase::Finetune,
            step: st.step(),
            probe: split.name(),
            acc,
        })?;
        let hit = a.stop_at_acc.is_some_and(|t| acc >= t);
        if hit && reached.is_none() {
            reached = Some(st.step());
        }
        Ok(hit)
    };
    train::run_finetune(&run.encoder, &run.train, run.seed, &images, &labels, &mut state, &mut on_step, &mut |r| {
        progress(r);
        log.borrow_mut().write(r)
    })?;
    match (a.stop_at_acc, reached) {
        (Some(t), Some(step)) => eprintln!("reached {t}% at step {step}"),
        (Some(t), None) => eprintln!("did not reach {t}% in {} steps", state.step()),
        _ => {}
    }
    Checkpoint::new(Phase::Finetune, &run, &state, true)?.save(&a.out)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}
