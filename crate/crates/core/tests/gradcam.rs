use ssmamba_core::autodiff::Tape;
use ssmamba_core::backbone::{self, EncoderConfig};
use ssmamba_core::gradcam::{self, GradCam};
use ssmamba_core::params::{Ctx, Mode, ParamStore};
use ssmamba_core::synth;
use ssmamba_core::tensor::Tensor;

const SIZE: usize = 64;

fn f4(cfg: &EncoderConfig, p: &ParamStore<f32>, b: &ParamStore<f32>, img: &Tensor<f32>) -> Tensor<f32> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, p, b.clone(), Mode::Eval, false);
    let x = tape.constant(img.reshaped(&[1, SIZE, SIZE, 3]).unwrap());
    let f = backbone::encode(&ctx, cfg, x).unwrap();
    let v = f.last().value().clone();
    v
}

fn channel_means(t: &Tensor<f32>) -> Vec<f64> {
    let c = *t.shape().last().unwrap();
    let mut m = vec![0.0; c];
    for (i, &v) in t.data().iter().enumerate() {
        m[i % c] += v as f64;
    }
    let n = (t.data().len() / c) as f64;
    m.iter().map(|v| v / n).collect()
}

fn argmax2(t: &Tensor<f32>) -> (usize, usize) {
    let w = t.shape()[1];
    let i = t.data().iter().enumerate().fold(0, |b, (i, &v)| if v > t.data()[b] { i } else { b });
    (i / w, i % w)
}

/// The tiny preset with a head whose class-1 row is `w` and class-0 row zero.
fn probe(w: &[f64]) -> (EncoderConfig, ParamStore<f32>, ParamStore<f32>) {
    let cfg = EncoderConfig::tiny();
    let (mut p, b) = backbone::init_classifier::<f32>(&cfg, 3).unwrap();
    let c = cfg.dims[3];
    *p.get_mut("head.weight").unwrap() = Tensor::from_fn(&[c, 2], |i| if i % 2 == 1 { w[i / 2] as f32 } else { 0.0 });
    (cfg, p, b)
}

#[test]
fn coarse_map_matches_the_linear_head_in_closed_form() {
    let img = synth::blob_at(SIZE, 20.0, 40.0, 6.0);
    // Cell 5's own feature vector scores |f|^2 > 0 there, so the map is not flat.
    let (cfg, p, b) = probe(&[0.0; 32]);
    let w: Vec<f64> = f4(&cfg, &p, &b, &img).data()[5 * 32..6 * 32].iter().map(|&v| v as f64).collect();
    let (cfg, p, b) = probe(&w);
    let cam: GradCam = gradcam::grad_cam(&cfg, &p, &b, &img, 1).unwrap();
    // d logit / d F4 is w / (h w) everywhere, so the map is ReLU(F4 . w) / (h w).
    let feats = f4(&cfg, &p, &b, &img);
    let (h, wd) = (feats.shape()[1], feats.shape()[2]);
    assert_eq!(cam.coarse.shape(), &[h, wd]);
    for (k, px) in feats.data().chunks_exact(32).enumerate() {
        let want = (px.iter().zip(&w).map(|(&a, &b)| a as f64 * b).sum::<f64>() / (h * wd) as f64).max(0.0);
        assert!((cam.coarse.data()[k] as f64 - want).abs() < 1e-5, "cell {k}");
    }
    assert_eq!(cam.heatmap.shape(), &[SIZE, SIZE]);
    let (lo, hi) = cam.heatmap.data().iter().fold((f32::MAX, f32::MIN), |a, &v| (a.0.min(v), a.1.max(v)));
    assert_eq!((lo, hi), (0.0, 1.0));
}

#[test]
fn zero_head_gives_an_all_zero_heatmap() {
    let (cfg, p, b) = probe(&[0.0; 32]);
    let cam = gradcam::grad_cam(&cfg, &p, &b, &synth::blob_at(SIZE, 30.0, 30.0, 5.0), 1).unwrap();
    assert!(cam.heatmap.data().iter().all(|&v| v == 0.0));
    assert_eq!(cam.logits, vec![0.0, 0.0]);
}

#[test]
fn heatmap_peak_follows_the_blob() {
    let cfg = EncoderConfig::tiny();
    let (p, b) = backbone::init_classifier::<f32>(&cfg, 3).unwrap();
    let blank = f4(&cfg, &p, &b, &synth::blob_at(SIZE, -1e3, -1e3, 6.0));
    let spots = [(12.0, 12.0), (52.0, 52.0), (12.0, 52.0)];
    let imgs: Vec<_> = spots.iter().map(|&(y, x)| synth::blob_at(SIZE, y, x, 6.0)).collect();
    // Probe direction: how much a blob, wherever it is, moves each channel,
    // with the blank response projected out so the background scores ~0.
    let base = channel_means(&blank);
    let mut w = vec![0.0; 32];
    for img in &imgs {
        for (wc, (m, b0)) in w.iter_mut().zip(channel_means(&f4(&cfg, &p, &b, img)).iter().zip(&base)) {
            *wc += (m - b0) / imgs.len() as f64;
        }
    }
    let along = w.iter().zip(&base).map(|(a, b)| a * b).sum::<f64>() / base.iter().map(|b| b * b).sum::<f64>();
    w.iter_mut().zip(&base).for_each(|(a, b)| *a -= along * b);
    let (cfg, p, b) = probe(&w);
    for (img, &(y, x)) in imgs.iter().zip(&spots) {
        let cam = gradcam::grad_cam(&cfg, &p, &b, img, 1).unwrap();
        let (py, px) = argmax2(&cam.heatmap);
        let (half_y, half_x) = (y as usize >= SIZE / 2, x as usize >= SIZE / 2);
        assert_eq!((py >= SIZE / 2, px >= SIZE / 2), (half_y, half_x), "blob at ({y},{x}) peaked at ({py},{px})");
    }
}

#[test]
fn bad_requests_are_errors() {
    let (cfg, p, b) = probe(&[1.0; 32]);
    let img = synth::blob_at(SIZE, 30.0, 30.0, 5.0);
    assert!(gradcam::grad_cam(&cfg, &p, &b, &img, 2).is_err());
    assert!(gradcam::grad_cam(&cfg, &p, &b, &synth::blob_at(40, 3.0, 3.0, 2.0), 0).is_err());
    assert!(gradcam::overlay(&img, &Tensor::zeros(&[8, 8])).is_err());
}

#[test]
fn overlay_blends_half_and_half() {
    let img = Tensor::from_fn(&[2, 2, 3], |i| (i % 5) as f32 / 5.0);
    let heat = Tensor::from_f64(&[2, 2], &[0.0, 1.0, 0.5, 0.25]).unwrap();
    let out = gradcam::overlay(&img, &heat).unwrap();
    for (k, px) in out.data().chunks_exact(3).enumerate() {
        let c = gradcam::jet(heat.data()[k]);
        for ch in 0..3 {
            assert!((px[ch] - (0.5 * img.data()[k * 3 + ch] + 0.5 * c[ch])).abs() < 1e-7);
        }
    }
}

