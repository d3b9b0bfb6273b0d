//! Directory-per-class image datasets, deterministic 7:1:2 splits and
//! train-split normalization.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops;
use crate::io::image;
use crate::seeds;
use crate::tensor::Tensor;

const SPLIT: u64 = 0x5350;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Train/val/test counts for `n` items: `floor(7n/10)`, `floor(n/10)`,
/// `floor(2n/10)`, with the leftover handed out one at a time to train,
/// then val, then test.
pub fn split_counts(n: usize) -> [usize; 3] {
    let mut c = [n * 7 / 10, n / 10, n * 2 / 10];
    let mut rest = n - c.iter().sum::<usize>();
    let mut i = 0;
    while rest > 0 {
        c[i % 3] += 1;
        rest -= 1;
        i += 1;
    }
    c
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    /// Relative to the manifest root.
    pub path: PathBuf,
    pub class: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub records: Vec<Record>,
    pub seed: u64,
}

/// Assigns splits to one class's files. Depends only on `seed`, the class
/// index and the sorted file list.
pub fn assign_splits(files: &[PathBuf], class: usize, seed: u64) -> Vec<Record> {
    let mut sorted = files.to_vec();
    sorted.sort();
    sorted.shuffle(&mut seeds::rng(seed, &[SPLIT, class as u64]));
    let [tr, va, _] = split_counts(sorted.len());
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, path)| Record {
            path,
            class,
            split: if i < tr {
                Split::Train
            } else if i < tr + va {
                Split::Val
            } else {
                Split::Test
            },
        })
        .collect()
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v = fs::read_dir(dir)
        .map_err(|e| Error::file(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::file(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    v.sort();
    Ok(v)
}

/// Scans `root/<class>/*.{png,ppm}`. Classes are the subdirectory names in
/// lexicographic order.
pub fn load_dataset(root: &Path, seed: u64) -> Result<DatasetManifest> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.len() < 2 {
        return Err(Error::file(root, format!("need at least 2 class subdirectories, found {}", class_dirs.len())));
    }
    let mut classes = Vec::new();
    let mut records = Vec::new();
    for (k, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::file(dir, "class directory name is not UTF-8"))?;
        let files: Vec<PathBuf> = sorted_entries(dir)?
            .into_iter()
            .filter(|p| p.is_file() && image::is_image_path(p))
            .map(|p| p.strip_prefix(root).map(Path::to_path_buf).unwrap_or(p))
            .collect();
        if files.is_empty() {
            return Err(Error::file(dir, "class directory has no PNG or PPM images"));
        }
        classes.push(name.to_string());
        records.extend(assign_splits(&files, k, seed));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        classes,
        records,
        seed,
    })
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    path: PathBuf,
    class: String,
    split: Split,
}

impl DatasetManifest {
    pub fn split(&self, s: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == s)
    }

    pub fn count(&self, s: Split, class: usize) -> usize {
        self.split(s).filter(|r| r.class == class).count()
    }

    pub fn path(&self, r: &Record) -> PathBuf {
        self.root.join(&r.path)
    }

    /// `path,class,split` CSV with class names.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::file(path, e))?;
        for r in &self.records {
            w.serialize(CsvRow {
                path: r.path.clone(),
                class: self.classes[r.class].clone(),
                split: r.split,
            })
            .map_err(|e| Error::file(path, e))?;
        }
        w.flush().map_err(|e| Error::file(path, e))
    }

    /// Reads a manifest CSV. Class indices follow sorted class names, as
    /// in [`load_dataset`].
    pub fn read_csv(path: &Path, root: &Path, seed: u64) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path).map_err(|e| Error::file(path, e))?;
        let rows = rd
            .deserialize()
            .collect::<std::result::Result<Vec<CsvRow>, _>>()
            .map_err(|e| Error::file(path, e))?;
        let mut classes: Vec<String> = rows.iter().map(|r| r.class.clone()).collect();
        classes.sort();
        classes.dedup();
        let records = rows
            .into_iter()
            .map(|r| Record {
                class: classes.binary_search(&r.class).expect("collected above"),
                path: r.path,
                split: r.split,
            })
            .collect();
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            classes,
            records,
            seed,
        })
    }
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    pub fn identity() -> Self {
        NormStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    /// Statistics over every pixel of `images` (each `[H, W, 3]`).
    /// Channels with zero variance get std 1.
    pub fn compute<'a>(images: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<Self> {
        let (mut sum, mut sq, mut n) = ([0f64; 3], [0f64; 3], 0usize);
        for img in images {
            for px in img.data().chunks_exact(3) {
                for c in 0..3 {
                    let v = px[c] as f64;
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Invalid("normalization statistics need at least one image".into()));
        }
        let mean = sum.map(|s| s / n as f64);
        let mut std = [0.0; 3];
        for c in 0..3 {
            let var = (sq[c] / n as f64 - mean[c] * mean[c]).max(0.0);
            std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Ok(NormStats { mean, std })
    }

    pub fn apply(&self, img: &Tensor<f32>) -> Tensor<f32> {
        let mut out = img.clone();
        for px in out.data_mut().chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] = ((px[c] as f64 - self.mean[c]) / self.std[c]) as f32;
            }
        }
        out
    }

    /// Maps normalized values back to `[0, 1]`-range pixels.
    pub fn invert(&self, img: &Tensor<f32>) -> Tensor<f32> {
        let mut out = img.clone();
        for px in out.data_mut().chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] = (px[c] as f64 * self.std[c] + self.mean[c]) as f32;
            }
        }
        out
    }
}

/// Bilinear resize to `size x size` followed by normalization.
pub fn preprocess(img: &Tensor<f32>, size: usize, stats: &NormStats) -> Result<Tensor<f32>> {
    Ok(stats.apply(&imageops::resize_bilinear(img, size, size)?))
}

/// A split loaded into memory at `size x size`, not yet normalized.
pub fn load_split(m: &DatasetManifest, split: Split, size: usize) -> Result<(Vec<Tensor<f32>>, Vec<usize>)> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for r in m.split(split) {
        let path = m.path(r);
        let img = image::load(&path)?;
        images.push(imageops::resize_bilinear(&img, size, size).map_err(|e| Error::file(&path, e))?);
        labels.push(r.class);
    }
    Ok((images, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts_follow_remainder_rule() {
        assert_eq!(split_counts(100), [70, 10, 20]);
        assert_eq!(split_counts(101), [71, 10, 20]);
        assert_eq!(split_counts(109), [77, 11, 21]);
        assert_eq!(split_counts(1), [1, 0, 0]);
    }

    #[test]
    fn assignment_ignores_input_order() {
        let files: Vec<PathBuf> = (0..20).map(|i| PathBuf::from(format!("c/{i:02}.png"))).collect();
        let mut rev = files.clone();
        rev.reverse();
        assert_eq!(assign_splits(&files, 0, 3), assign_splits(&rev, 0, 3));
    }
}
