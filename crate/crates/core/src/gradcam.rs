//! Grad-CAM on the last stage of the classifier.

use crate::autodiff::Tape;
use crate::backbone::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::imageops;
use crate::params::{Ctx, Mode, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCam {
    /// `[H, W]` map in `[0, 1]` at input resolution.
    pub heatmap: Tensor<f32>,
    /// `[h, w]` map at `F_4` resolution, before upsampling and scaling.
    pub coarse: Tensor<f32>,
    pub class: usize,
    pub logits: Vec<f64>,
}

/// Grad-CAM for one normalized `[H, W, 3]` image and target `class`:
/// channel weights are the spatial mean of `d logit / d F_4`, the map is
/// `ReLU(sum_c w_c F_4[..., c])`, upsampled bilinearly and scaled to
/// `[0, 1]`. A constant map becomes all zeros.
pub fn grad_cam(
    cfg: &EncoderConfig,
    params: &ParamStore<f32>,
    buffers: &ParamStore<f32>,
    image: &Tensor<f32>,
    class: usize,
) -> Result<GradCam> {
    let &[h, w, _] = image.shape() else {
        return Err(Error::shape("grad_cam", format!("expected [H, W, 3] image, got {:?}", image.shape())));
    };
    if class >= cfg.num_classes {
        return Err(Error::Invalid(format!("class {class} out of range for {} classes", cfg.num_classes)));
    }
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, params, buffers.clone(), Mode::Eval, true);
    let x = tape.constant(image.reshaped(&[1, h, w, image.shape()[2]])?);
    let feats = backbone::encode(&ctx, cfg, x)?;
    let logits = backbone::head(&ctx, &feats)?;
    let pick = Tensor::from_fn(&[1, cfg.num_classes], |i| if i == class { 1.0 } else { 0.0 });
    let score = logits.mul(tape.constant(pick))?.sum();
    let grads = tape.backward(score)?;

    let f4 = feats.last();
    let a = f4.value();
    let g = grads.get_or_zeros(f4);
    let s = a.shape().to_vec();
    let (fh, fw, c) = (s[1], s[2], s[3]);
    let mut weights = vec![0f64; c];
    for (i, &v) in g.data().iter().enumerate() {
        weights[i % c] += v as f64;
    }
    weights.iter_mut().for_each(|v| *v /= (fh * fw) as f64);
    let coarse: Vec<f32> = a
        .data()
        .chunks_exact(c)
        .map(|px| px.iter().zip(&weights).map(|(&x, &wc)| x as f64 * wc).sum::<f64>().max(0.0) as f32)
        .collect();
    let coarse = Tensor::new(vec![fh, fw], coarse)?;

    let up = imageops::resize_bilinear(&coarse.reshaped(&[fh, fw, 1])?, h, w)?;
    let (lo, hi) = up.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    let heat = if hi > lo {
        up.map(|v| (v - lo) / (hi - lo))
    } else {
        up.map(|_| 0.0)
    };
    let logits: Vec<f64> = logits.value().data().iter().map(|&v| v as f64).collect();
    Ok(GradCam {
        heatmap: heat.reshaped(&[h, w])?,
        coarse,
        class,
        logits,
    })
}

/// Piecewise-linear jet colormap.
pub fn jet(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    let ch = |c: f32| (1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// `0.5 * image + 0.5 * jet(heatmap)`, for an `[H, W, 3]` image in `[0, 1]`.
pub fn overlay(image: &Tensor<f32>, heatmap: &Tensor<f32>) -> Result<Tensor<f32>> {
    let &[h, w, 3] = image.shape() else {
        return Err(Error::shape("overlay", format!("expected [H, W, 3] image, got {:?}", image.shape())));
    };
    if heatmap.shape() != [h, w] {
        return Err(Error::shape("overlay", format!("heatmap {:?} vs image {h}x{w}", heatmap.shape())));
    }
    let mut out = image.clone();
    for (px, &t) in out.data_mut().chunks_exact_mut(3).zip(heatmap.data()) {
        let c = jet(t);
        for k in 0..3 {
            px[k] = (0.5 * px[k].clamp(0.0, 1.0) + 0.5 * c[k]).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}
