use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use ssmamba_core::backbone::EncoderConfig;
use ssmamba_core::imageops;
use ssmamba_core::io::checkpoint::Checkpoint;
use ssmamba_core::io::dataset::NormStats;
use ssmamba_core::io::image;
use ssmamba_core::mamim::MamimConfig;
use ssmamba_core::tensor::Tensor;
use ssmamba_core::train::{Phase, TrainConfig};

/// Configuration snapshot stored in image-model checkpoints: enough to
/// rebuild the model and its preprocessing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRun {
    pub encoder: EncoderConfig,
    /// Present for pretraining runs.
    #[serde(default)]
    pub mamim: Option<MamimConfig>,
    pub train: TrainConfig,
    pub image_size: usize,
    pub norm: NormStats,
    pub seed: u64,
    /// Class names of a fine-tuned model, in label order.
    #[serde(default)]
    pub classes: Vec<String>,
    #[serde(default)]
    pub split_seed: u64,
}

/// Every PNG/PPM under `dir`, recursively, in sorted order.
pub fn collect_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if image::is_image_path(&p) {
                out.push(p);
            }
        }
    }
    out.sort();
    if out.is_empty() {
        bail!("{}: no PNG or PPM images", dir.display());
    }
    Ok(out)
}

/// Loads and resizes to `size x size`; values stay in `[0, 1]`.
pub fn load_images(paths: &[PathBuf], size: usize) -> Result<Vec<Tensor<f32>>> {
    paths
        .iter()
        .map(|p| {
            let img = image::load(p)?;
            imageops::resize_bilinear(&img, size, size).with_context(|| p.display().to_string())
        })
        .collect()
}

pub fn normalize(images: &[Tensor<f32>], stats: &NormStats) -> Vec<Tensor<f32>> {
    images.iter().map(|t| stats.apply(t)).collect()
}

pub fn load_checkpoint(path: &Path, phase: Phase) -> Result<(Checkpoint, ImageRun)> {
    let ck = Checkpoint::load(path)?;
    if ck.phase != phase {
        bail!("{}: expected a {phase:?} checkpoint, found {:?}", path.display(), ck.phase);
    }
    let run: ImageRun = ck.config_as().with_context(|| path.display().to_string())?;
    Ok((ck, run))
}

/// `path` with its extension replaced by `.jsonl`.
pub fn default_log(path: &Path) -> PathBuf {
    path.with_extension("jsonl")
}

/// Values in `[0, 1]` for display.
pub fn clamp01(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| v.clamp(0.0, 1.0))
}
