//! `ssmamba`: pretraining, fine-tuning, evaluation and MIL from the shell.

mod config;
mod data;
mod milcmd;
mod report;
mod synthcmd;
mod train;
mod visual;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::config::{FileConfig, Settings};

#[derive(Parser, Debug)]
#[command(name = "ssmamba", version, about = "State-space vision backbone: pretrain, fine-tune, evaluate, MIL")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for initialization, shuffling, masks and augmentation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Model preset: desk, tiny or full.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Masked-image pretraining on a directory of images.
    Pretrain(train::PretrainArgs),
    /// Supervised fine-tuning on a class-per-directory dataset.
    Finetune(train::FinetuneArgs),
    /// Metrics of a fine-tuned checkpoint on every dataset split.
    Eval(report::EvalArgs),
    /// Train the slide-level MIL aggregator on embedding bags.
    MilTrain(milcmd::TrainArgs),
    /// Evaluate a MIL checkpoint with resampled inference.
    MilEval(milcmd::EvalArgs),
    /// Parameter count, total and per module.
    Params(report::ParamsArgs),
    /// Run the oracle and invariant suites; exits nonzero on any failure.
    Check(report::CheckArgs),
    /// Grad-CAM heatmap and overlay for one image.
    Gradcam(visual::GradcamArgs),
    /// Masked / reconstructed / original triptychs from a pretrained model.
    Reconstruct(visual::ReconstructArgs),
    /// Write synthetic datasets (textures, blobs vs stripes, bags).
    Synth(synthcmd::SynthArgs),
}

fn run(cli: Cli) -> Result<bool> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let s = Settings::resolve(file, cli.seed, cli.preset.as_deref())?;
    match cli.command {
        Command::Pretrain(a) => train::pretrain(&s, &a),
        Command::Finetune(a) => train::finetune(&s, &a),
        Command::Eval(a) => report::eval(&s, &a),
        Command::MilTrain(a) => milcmd::train(&s, &a),
        Command::MilEval(a) => milcmd::eval(&s, &a),
        Command::Params(a) => report::params(&s, &a),
        Command::Check(a) => return report::check(&a),
        Command::Gradcam(a) => visual::gradcam(&s, &a),
        Command::Reconstruct(a) => visual::reconstruct(&s, &a),
        Command::Synth(a) => synthcmd::synth(&s, &a),
    }?;
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
