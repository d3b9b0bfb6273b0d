use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::builder::PossibleValuesParser;
use clap::Args;
use serde::Serialize;
use ssmamba_core::backbone;
use ssmamba_core::check;
use ssmamba_core::io::dataset::{self, Split};
use ssmamba_core::io::JsonlLog;
use ssmamba_core::metrics::{self, Metrics};
use ssmamba_core::train::{self, Phase};

use crate::config::Settings;
use crate::data;

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Dataset root with one subdirectory per class.
    #[arg(long)]
    pub data: PathBuf,
    /// Fine-tuned checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Metrics file: one JSON record per split.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct SplitRecord {
    split: &'static str,
    n: usize,
    #[serde(flatten)]
    metrics: Metrics,
}

pub fn eval(_: &Settings, a: &EvalArgs) -> Result<()> {
    let (ck, run) = data::load_checkpoint(&a.ckpt, Phase::Finetune)?;
    let m = dataset::load_dataset(&a.data, run.split_seed)?;
    if m.classes != run.classes {
        anyhow::bail!("{}: classes {:?} differ from the checkpoint's {:?}", a.data.display(), m.classes, run.classes);
    }
    let mut out = JsonlLog::create(&a.out)?;
    for split in Split::ALL {
        let (raw, y) = dataset::load_split(&m, split, run.image_size)?;
        if y.is_empty() {
            continue;
        }
        let logits = train::predict_logits(&run.encoder, &ck.params, &ck.buffers, &data::normalize(&raw, &run.norm), 32)?;
        let metrics = metrics::evaluate(&y, &logits).with_context(|| format!("{} split", split.name()))?.rounded();
        println!(
            "{:<5} n={:<5} acc {:>6.2}  macro-F1 {:>6.2}  AUC {:>6.2}",
            split.name(),
            y.len(),
            metrics.acc,
            metrics.macro_f1,
            metrics.auc
        );
        out.write(&SplitRecord { split: split.name(), n: y.len(), metrics })?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

pub fn params(s: &Settings, a: &ParamsArgs) -> Result<()> {
    let parts = backbone::param_breakdown(&s.encoder)?;
    let total = backbone::param_count_total(&s.encoder)?;
    if a.json {
        #[derive(Serialize)]
        struct Out<'a> {
            preset: &'a str,
            total: usize,
            modules: Vec<(String, usize)>,
        }
        println!("{}", serde_json::to_string(&Out { preset: &s.preset, total, modules: parts })?);
        return Ok(());
    }
    println!("preset {} (dims {:?}, depths {:?})", s.preset, s.encoder.dims, s.encoder.depths);
    for (name, n) in &parts {
        println!("  {name:<22} {n:>12}");
    }
    println!("total {total} ({:.2}M)", total as f64 / 1e6);
    Ok(())
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    /// Run only these suites (repeatable); all by default.
    #[arg(long, value_parser = PossibleValuesParser::new(check::SUITES))]
    pub suite: Vec<String>,
    /// Print every check, not just failures.
    #[arg(long, short)]
    pub verbose: bool,
}

/// `Ok(true)` iff every selected suite passes.
pub fn check(a: &CheckArgs) -> Result<bool> {
    let names: Vec<&str> = if a.suite.is_empty() { check::SUITES.to_vec() } else { a.suite.iter().map(String::as_str).collect() };
    let mut ok = true;
    for name in names {
        let report = check::run(name).expect("suite names are validated by the parser");
        println!("{}", report.summary());
        for c in &report.checks {
            if a.verbose || !c.passed {
                println!("    {} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
            }
        }
        ok &= report.passed();
    }
    Ok(ok)
}
