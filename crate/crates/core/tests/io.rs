use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssmamba_core::backbone::{self, EncoderConfig};
use ssmamba_core::error::Error;
use ssmamba_core::io::bagfile;
use ssmamba_core::io::checkpoint::Checkpoint;
use ssmamba_core::io::dataset::{self, DatasetManifest, NormStats, Split};
use ssmamba_core::io::image;
use ssmamba_core::mil::{Bag, TaskSpec, Target};
use ssmamba_core::tensor::Tensor;
use ssmamba_core::train::{Phase, TrainState};

/// An 8-bit image: every value is exactly `k / 255`.
fn quantized(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[h, w, 3], |_| r.random_range(0..=255u8) as f32 / 255.0)
}

fn write_class(root: &Path, name: &str, n: usize, ext: &str) {
    let dir = root.join(name);
    fs::create_dir_all(&dir).unwrap();
    for i in 0..n {
        image::save(&dir.join(format!("{i:03}.{ext}")), &quantized(4, 5, i as u64)).unwrap();
    }
}

#[test]
fn png_and_ppm_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let img = quantized(7, 9, 1);
    for name in ["a.png", "a.ppm"] {
        let p = dir.path().join(name);
        image::save(&p, &img).unwrap();
        assert_eq!(image::load(&p).unwrap(), img, "{name}");
    }
    let ppm = fs::read(dir.path().join("a.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n9 7\n255\n"));
    assert_eq!(ppm.len(), 11 + 7 * 9 * 3);
}

#[test]
fn corrupt_and_unknown_files_name_their_path() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("broken.png");
    fs::write(&bad, b"\x89PNG\r\n\x1a\nnot really").unwrap();
    let err = image::load(&bad).unwrap_err();
    assert!(matches!(&err, Error::File { path, .. } if path == &bad), "{err}");
    assert!(err.to_string().contains("broken.png"));
    let gif = dir.path().join("x.png");
    fs::write(&gif, b"GIF89a....").unwrap();
    assert!(image::load(&gif).unwrap_err().to_string().contains("x.png"));
}

#[test]
fn splits_are_70_10_20_per_class() {
    let dir = tempfile::tempdir().unwrap();
    write_class(dir.path(), "a", 100, "png");
    write_class(dir.path(), "b", 101, "ppm");
    let m = dataset::load_dataset(dir.path(), 7).unwrap();
    assert_eq!(m.classes, vec!["a", "b"]);
    assert_eq!([m.count(Split::Train, 0), m.count(Split::Val, 0), m.count(Split::Test, 0)], [70, 10, 20]);
    assert_eq!([m.count(Split::Train, 1), m.count(Split::Val, 1), m.count(Split::Test, 1)], [71, 10, 20]);
    // Each file lands in exactly one split.
    let mut paths: Vec<&PathBuf> = m.records.iter().map(|r| &r.path).collect();
    paths.sort();
    paths.dedup();
    assert_eq!(paths.len(), 201);
    assert_eq!(m, dataset::load_dataset(dir.path(), 7).unwrap());
    assert_ne!(m.records, dataset::load_dataset(dir.path(), 8).unwrap().records);
}

#[test]
fn manifest_replays_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    write_class(dir.path(), "x", 12, "png");
    write_class(dir.path(), "y", 9, "png");
    let m = dataset::load_dataset(dir.path(), 3).unwrap();
    let csv = dir.path().join("manifest.csv");
    m.write_csv(&csv).unwrap();
    assert_eq!(DatasetManifest::read_csv(&csv, dir.path(), 3).unwrap(), m);
    let (imgs, labels) = dataset::load_split(&m, Split::Test, 8).unwrap();
    assert_eq!(imgs.len(), labels.len());
    assert!(imgs.iter().all(|t| t.shape() == [8, 8, 3]));
}

#[test]
fn empty_class_and_single_class_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_class(dir.path(), "full", 3, "png");
    fs::create_dir(dir.path().join("empty")).unwrap();
    let err = dataset::load_dataset(dir.path(), 0).unwrap_err();
    assert!(err.to_string().contains("empty"), "{err}");
    let lone = tempfile::tempdir().unwrap();
    write_class(lone.path(), "only", 3, "png");
    assert!(dataset::load_dataset(lone.path(), 0).is_err());
}

#[test]
fn constant_image_preprocesses_to_a_constant() {
    let img = Tensor::from_fn(&[10, 14, 3], |i| [0.2f32, 0.5, 0.9][i % 3]);
    let stats = NormStats { mean: [0.1, 0.4, 0.5], std: [0.5, 0.25, 2.0] };
    let out = dataset::preprocess(&img, 6, &stats).unwrap();
    assert_eq!(out.shape(), &[6, 6, 3]);
    let want = [0.2, 0.4, 0.2];
    for px in out.data().chunks_exact(3) {
        for c in 0..3 {
            assert!((px[c] as f64 - want[c]).abs() < 1e-6, "{px:?}");
        }
    }
}

#[test]
fn training_statistics_normalize_to_zero_mean_unit_std() {
    let imgs: Vec<_> = (0..5).map(|s| quantized(8, 8, 10 + s).map(|v| 0.3 + 0.4 * v)).collect();
    let stats = NormStats::compute(&imgs).unwrap();
    let normed: Vec<f64> = imgs.iter().flat_map(|t| stats.apply(t).data().to_vec()).map(|v| v as f64).collect();
    for c in 0..3 {
        let ch: Vec<f64> = normed.iter().skip(c).step_by(3).copied().collect();
        let mean = ch.iter().sum::<f64>() / ch.len() as f64;
        let std = (ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ch.len() as f64).sqrt();
        assert!(mean.abs() < 1e-3 && (std - 1.0).abs() < 1e-3, "channel {c}: {mean} {std}");
    }
    let back = stats.invert(&stats.apply(&imgs[0]));
    assert!(back.max_abs_diff(&imgs[0]) < 1e-6);
    let flat = vec![Tensor::from_fn(&[2, 2, 3], |_| 0.5f32)];
    assert_eq!(NormStats::compute(&flat).unwrap().std, [1.0; 3]);
    assert!(NormStats::compute(&[]).is_err());
}

#[test]
fn checkpoint_file_round_trip() {
    let cfg = EncoderConfig::tiny();
    let (p, b) = backbone::init_classifier::<f32>(&cfg, 4).unwrap();
    let mut state = TrainState::new(p, b);
    state.epoch = 3;
    state.opt.step = 17;
    for (_, t) in state.opt.m.iter_mut() {
        *t = t.map(|_| 0.25);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    for with_opt in [true, false] {
        let ck = Checkpoint::new(Phase::Finetune, &cfg, &state, with_opt).unwrap();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.config_as::<EncoderConfig>().unwrap(), cfg);
        let resumed = back.train_state();
        assert_eq!(resumed.params, state.params);
        assert_eq!(resumed.epoch, 3);
        assert_eq!(resumed.step(), if with_opt { 17 } else { 0 });
    }
    let mut bytes = fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    fs::write(&path, &bytes).unwrap();
    assert!(Checkpoint::load(&path).unwrap_err().to_string().contains("model.ckpt"));
}

#[test]
fn bags_and_label_table_load_together() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = [TaskSpec::classification("grade", 3), TaskSpec::regression("survival")];
    let bags: Vec<Bag> = (0..3)
        .map(|i| {
            let emb = Tensor::from_fn(&[2 + i, 4], |k| (k * (i + 1)) as f32 / 10.0);
            let coords = (0..2 + i as u32).map(|t| (t, 2 * t)).collect();
            let bag = Bag::new(format!("s{i}"), emb, coords).unwrap().with_label("grade", Target::Class(i));
            if i != 1 { bag.with_label("survival", Target::Value(i as f64 + 0.5)) } else { bag }
        })
        .collect();
    for bag in &bags {
        bagfile::save(&dir.path().join(format!("{}.bag", bag.slide_id)), bag).unwrap();
    }
    let labels = dir.path().join("labels.csv");
    bagfile::write_labels(&labels, &tasks, &bags).unwrap();
    let loaded = bagfile::load_labelled(dir.path(), &labels, &tasks).unwrap();
    assert_eq!(loaded, bags);
    assert!(!loaded[1].labels.contains_key("survival"));

    fs::write(&labels, "slide_id,grade,stage\ns0,1,2\n").unwrap();
    assert!(bagfile::load_labelled(dir.path(), &labels, &tasks).is_err());
    fs::write(&labels, "slide_id,grade\nmissing,1\n").unwrap();
    assert!(bagfile::load_labelled(dir.path(), &labels, &tasks).unwrap_err().to_string().contains("missing.bag"));
}
