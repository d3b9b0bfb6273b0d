use std::fs;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, ValueEnum};
use rand::Rng;
use ssmamba_core::io::{bagfile, image};
use ssmamba_core::mil::{Bag, TaskSpec, Target};
use ssmamba_core::seeds;
use ssmamba_core::synth;
use ssmamba_core::tensor::Tensor;

use crate::config::Settings;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Kind {
    /// Colored gratings for pretraining, written flat into OUT.
    Textures,
    /// Two classes, OUT/blobs and OUT/stripes.
    BlobsStripes,
    /// Embedding bags plus labels.csv with a `label` (2 classes) and a
    /// `score` (regression) task; every fourth slide lacks a score.
    Bags,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub kind: Kind,
    /// Images (textures), images per class (blobs-stripes) or slides (bags).
    #[arg(long)]
    pub n: usize,
    /// Image side; the preset's input size by default.
    #[arg(long)]
    pub size: Option<usize>,
    /// Embedding width of synthetic bags.
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn synth(s: &Settings, a: &SynthArgs) -> Result<()> {
    let size = a.size.unwrap_or(s.image_size);
    fs::create_dir_all(&a.out)?;
    match a.kind {
        Kind::Textures => {
            for (i, img) in synth::texture_set(a.n, size, s.seed).iter().enumerate() {
                image::save_png(&a.out.join(format!("tex_{i:05}.png")), img)?;
            }
        }
        Kind::BlobsStripes => {
            let (images, labels) = synth::blobs_stripes(a.n, size, s.seed);
            let names = ["blobs", "stripes"];
            for name in names {
                fs::create_dir_all(a.out.join(name))?;
            }
            for (i, (img, &y)) in images.iter().zip(&labels).enumerate() {
                image::save_png(&a.out.join(names[y]).join(format!("{:05}.png", i % a.n)), img)?;
            }
        }
        Kind::Bags => {
            let bags: Vec<Bag> = (0..a.n).map(|i| synth_bag(i, a.dim, s.seed)).collect::<Result<_>>()?;
            for b in &bags {
                bagfile::save(&a.out.join(format!("{}.{}", b.slide_id, bagfile::EXTENSION)), b)?;
            }
            let tasks = [TaskSpec::classification("label", 2), TaskSpec::regression("score")];
            bagfile::write_labels(&a.out.join("labels.csv"), &tasks, &bags)?;
        }
    }
    eprintln!("wrote {:?} x{} to {}", a.kind, a.n, a.out.display());
    Ok(())
}

/// Class-1 slides carry a shifted minority of tiles; the score tracks the
/// fraction of shifted tiles.
fn synth_bag(i: usize, dim: usize, seed: u64) -> Result<Bag> {
    let mut rng = seeds::rng(seed, &[i as u64]);
    let class = i % 2;
    let n = rng.random_range(6..24usize);
    let frac = if class == 1 { rng.random_range(0.2..0.6) } else { 0.0 };
    let hot: Vec<bool> = (0..n).map(|_| rng.random_bool(frac)).collect();
    let emb = Tensor::from_fn(&[n, dim], |k| {
        let shift = if hot[k / dim] && k % dim < dim / 2 { 1.0 } else { 0.0 };
        shift + rng.random_range(-0.5f32..0.5)
    });
    let side = (n as f64).sqrt().ceil() as u32;
    let coords = (0..n as u32).map(|t| (t / side, t % side)).collect();
    let bag = Bag::new(format!("slide_{i:04}"), emb, coords)?.with_label("label", Target::Class(class));
    let score = hot.iter().filter(|&&h| h).count() as f64 / n as f64;
    Ok(if i % 4 == 3 { bag } else { bag.with_label("score", Target::Value(score)) })
}
