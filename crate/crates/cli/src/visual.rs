use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use ssmamba_core::autodiff::Tape;
use ssmamba_core::gradcam;
use ssmamba_core::io::image;
use ssmamba_core::mamim::{self, MaskSpec};
use ssmamba_core::metrics;
use ssmamba_core::params::{Ctx, Mode};
use ssmamba_core::seeds;
use ssmamba_core::tensor::Tensor;
use ssmamba_core::train::Phase;

use crate::config::Settings;
use crate::data;

#[derive(Args, Debug)]
pub struct GradcamArgs {
    /// Fine-tuned checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Target class index; the predicted class if omitted.
    #[arg(long)]
    pub class: Option<usize>,
    /// Receives heatmap.png and overlay.png.
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn gradcam(_: &Settings, a: &GradcamArgs) -> Result<()> {
    let (ck, run) = data::load_checkpoint(&a.ckpt, Phase::Finetune)?;
    let raw = data::load_images(std::slice::from_ref(&a.image), run.image_size)?.remove(0);
    let x = run.norm.apply(&raw);
    let probe = gradcam::grad_cam(&run.encoder, &ck.params, &ck.buffers, &x, 0)?;
    let class = a.class.unwrap_or_else(|| ssmamba_core::train::argmax(&probe.logits));
    let cam = gradcam::grad_cam(&run.encoder, &ck.params, &ck.buffers, &x, class)?;
    fs::create_dir_all(&a.out_dir)?;
    let heat = cam.heatmap.data().iter().flat_map(|&t| gradcam::jet(t)).collect();
    let heat = Tensor::new(vec![run.image_size, run.image_size, 3], heat)?;
    image::save_png(&a.out_dir.join("heatmap.png"), &heat)?;
    image::save_png(&a.out_dir.join("overlay.png"), &gradcam::overlay(&raw, &cam.heatmap)?)?;
    let probs = metrics::softmax(&cam.logits);
    let name = run.classes.get(class).map_or("?", String::as_str);
    println!("class {class} ({name}), p = {:.4}", probs[class]);
    eprintln!("wrote {}/{{heatmap,overlay}}.png", a.out_dir.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    /// Pretraining checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Images to reconstruct (repeatable).
    #[arg(long)]
    pub image: Vec<PathBuf>,
    /// Or: the first --count images of a directory.
    #[arg(long, conflicts_with = "image")]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    /// Output PNG: one masked | reconstructed | original row per image.
    #[arg(long)]
    pub out: PathBuf,
    /// Nearest-neighbour upscaling of the figure.
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
}

const GAP: usize = 2;

pub fn reconstruct(s: &Settings, a: &ReconstructArgs) -> Result<()> {
    let (ck, run) = data::load_checkpoint(&a.ckpt, Phase::Pretrain)?;
    let Some(cfg) = run.mamim.clone() else {
        bail!("{}: no masked-image model configuration", a.ckpt.display());
    };
    let paths = match &a.data {
        Some(dir) => data::collect_images(dir)?.into_iter().take(a.count).collect(),
        None if a.image.is_empty() => bail!("pass --image or --data"),
        None => a.image.clone(),
    };
    let raw = data::load_images(&paths, run.image_size)?;
    let (size, p) = (run.image_size, cfg.encoder.patch_size);
    let grid = size / p;
    let mut rows = Vec::new();
    for (i, img) in raw.iter().enumerate() {
        let x = run.norm.apply(img);
        let mask = mamim::make_mask(grid, grid, cfg.mask_ratio, seeds::derive(s.seed, &[i as u64]))?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &ck.params, ck.buffers.clone(), Mode::Eval, false);
        let pred = mamim::forward(&ctx, &cfg, tape.constant(x.reshaped(&[1, size, size, 3])?), std::slice::from_ref(&mask))?;
        let pred = mamim::unpatchify(&pred.value(), p, 3)?.reshaped(&[size, size, 3])?;
        let recon = data::clamp01(&run.norm.invert(&paste(&x, &pred, &mask, p)));
        let masked = paste(img, &Tensor::from_fn(&[size, size, 3], |_| 0.5), &mask, p);
        rows.push([masked, recon, img.clone()]);
    }
    image::save_png(&a.out, &upscale(&tile(&rows, size), a.scale.max(1)))?;
    eprintln!("wrote {} ({} rows, {:.0}% of patches masked)", a.out.display(), rows.len(), 100.0 * cfg.mask_ratio);
    Ok(())
}

/// `base` with the masked patches taken from `fill`.
fn paste(base: &Tensor<f32>, fill: &Tensor<f32>, mask: &MaskSpec, p: usize) -> Tensor<f32> {
    let w = base.shape()[1];
    let mut out = base.clone();
    for &t in &mask.indices {
        let (gy, gx) = (t / mask.grid_w, t % mask.grid_w);
        for y in gy * p..(gy + 1) * p {
            let row = (y * w + gx * p) * 3..(y * w + (gx + 1) * p) * 3;
            out.data_mut()[row.clone()].copy_from_slice(&fill.data()[row]);
        }
    }
    out
}

/// Lays rows of three `size x size` images on a white sheet.
fn tile(rows: &[[Tensor<f32>; 3]], size: usize) -> Tensor<f32> {
    let (h, w) = (rows.len() * (size + GAP) + GAP, 3 * (size + GAP) + GAP);
    let mut sheet = Tensor::from_fn(&[h, w, 3], |_| 1.0f32);
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            let (top, left) = (GAP + r * (size + GAP), GAP + c * (size + GAP));
            for y in 0..size {
                let dst = ((top + y) * w + left) * 3;
                sheet.data_mut()[dst..dst + size * 3].copy_from_slice(&img.data()[y * size * 3..(y + 1) * size * 3]);
            }
        }
    }
    sheet
}

fn upscale(img: &Tensor<f32>, k: usize) -> Tensor<f32> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    Tensor::from_fn(&[h * k, w * k, 3], |i| {
        let (y, x, c) = (i / (w * k * 3), i / 3 % (w * k), i % 3);
        img.data()[((y / k) * w + x / k) * 3 + c]
    })
}
