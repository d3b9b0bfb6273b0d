use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use ssmamba_core::io::bagfile;
use ssmamba_core::io::checkpoint::Checkpoint;
use ssmamba_core::io::JsonlLog;
use ssmamba_core::metrics;
use ssmamba_core::mil::{self, Bag, MilConfig, Resampling, TaskKind, TaskSpec, Target};
use ssmamba_core::train::{Phase, TrainConfig, TrainState};

use crate::config::{self, Settings, TrainFlags};
use crate::data;

/// Configuration snapshot stored in MIL checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MilRun {
    pub model: MilConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory of `<slide_id>.bag` embedding files.
    #[arg(long)]
    pub bags: PathBuf,
    /// CSV label table: `slide_id` then one column per task; empty cells
    /// are missing labels.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Task as NAME:CLASSES or NAME:reg (repeatable); overrides [mil] tasks.
    #[arg(long = "task", value_parser = config::parse_task)]
    pub tasks: Vec<TaskSpec>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub bags: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Metrics file: one JSON record per task.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-slide outputs as JSON lines.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Inference rounds (default from [resampling], else 15).
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Tiles drawn per round; whole bag if omitted.
    #[arg(long)]
    pub tiles: Option<usize>,
    #[arg(long)]
    pub replacement: bool,
}

fn load_bags(bags: &std::path::Path, labels: &std::path::Path, tasks: &[TaskSpec]) -> Result<Vec<Bag>> {
    let out = bagfile::load_labelled(bags, labels, tasks)?;
    if out.is_empty() {
        bail!("{}: no slides", labels.display());
    }
    Ok(out)
}

pub fn train(s: &Settings, a: &TrainArgs) -> Result<()> {
    let tasks = if a.tasks.is_empty() { s.mil(1, Vec::new())?.tasks } else { a.tasks.clone() };
    let bags = load_bags(&a.bags, &a.labels, &tasks)?;
    let run = MilRun {
        model: s.mil(bags[0].embed_dim(), tasks)?,
        train: s.train(Phase::Mil, &a.train)?,
        seed: s.seed,
    };
    let mut state = TrainState::new(mil::init(&run.model, s.seed)?, Default::default());
    let mut log = JsonlLog::create(a.log.as_deref().unwrap_or(&data::default_log(&a.out)))?;
    eprintln!("training on {} bags, tasks {:?}", bags.len(), run.model.tasks.iter().map(|t| &t.name).collect::<Vec<_>>());
    mil::run_mil(&run.model, &run.train, run.seed, &bags, &mut state, &mut |r| {
        eprintln!("epoch {:>3} step {:>5} lr {:.2e} loss {:.5}", r.epoch, r.step, r.lr, r.loss);
        log.write(r)
    })?;
    Checkpoint::new(Phase::Mil, &run, &state, true)?.save(&a.out)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct TaskRecord<'a> {
    task: &'a str,
    n: usize,
    #[serde(flatten)]
    values: IndexMap<&'static str, f64>,
}

pub fn eval(s: &Settings, a: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    if ck.phase != Phase::Mil {
        bail!("{}: expected a MIL checkpoint, found {:?}", a.ckpt.display(), ck.phase);
    }
    let run: MilRun = ck.config_as()?;
    let bags = load_bags(&a.bags, &a.labels, &run.model.tasks)?;
    let mut rs: Resampling = s.resampling()?;
    if let Some(n) = a.rounds {
        rs.n_rounds = n;
    }
    if a.tiles.is_some() {
        rs.tiles_per_round = a.tiles;
    }
    rs.replacement |= a.replacement;

    let mut preds = Vec::with_capacity(bags.len());
    let mut per_slide = a.predictions.as_deref().map(JsonlLog::create).transpose()?;
    for b in &bags {
        let p = mil::predict_with_resampling(&run.model, &ck.params, b, &rs, s.seed).with_context(|| b.slide_id.clone())?;
        if let Some(log) = per_slide.as_mut() {
            #[derive(Serialize)]
            struct Row<'a> {
                slide_id: &'a str,
                #[serde(flatten)]
                outputs: &'a IndexMap<String, Vec<f64>>,
            }
            log.write(&Row { slide_id: &b.slide_id, outputs: &p })?;
        }
        preds.push(p);
    }

    let mut out = JsonlLog::create(&a.out)?;
    for task in &run.model.tasks {
        let labelled: Vec<(usize, Target)> = bags
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.labels.get(&task.name).map(|&t| (i, t)))
            .collect();
        if labelled.is_empty() {
            eprintln!("{}: no labelled slides, skipped", task.name);
            continue;
        }
        let mut values = IndexMap::new();
        match task.kind {
            TaskKind::Classification => {
                let y: Vec<usize> = labelled
                    .iter()
                    .map(|(_, t)| match *t {
                        Target::Class(c) => Ok(c),
                        Target::Value(v) => Err(anyhow::anyhow!("{}: non-integer label {v}", task.name)),
                    })
                    .collect::<Result<_>>()?;
                let logits: Vec<Vec<f64>> = labelled.iter().map(|(i, _)| preds[*i][&task.name].clone()).collect();
                let m = metrics::evaluate(&y, &logits).with_context(|| task.name.clone())?.rounded();
                values.extend([("acc", m.acc), ("macro_f1", m.macro_f1), ("auc", m.auc)]);
            }
            TaskKind::Regression => {
                let mae = labelled
                    .iter()
                    .map(|(i, t)| {
                        let v = match *t {
                            Target::Class(c) => c as f64,
                            Target::Value(v) => v,
                        };
                        (preds[*i][&task.name][0] - v).abs()
                    })
                    .sum::<f64>()
                    / labelled.len() as f64;
                values.insert("mae", mae);
            }
        }
        let shown: String = values.iter().map(|(k, v)| format!(" {k} {v:.4}")).collect();
        println!("{:<12} n={:<5}{shown}", task.name, labelled.len());
        out.write(&TaskRecord { task: &task.name, n: labelled.len(), values })?;
    }
    Ok(())
}
