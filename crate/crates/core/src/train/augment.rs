//! Mixup and RandomResizedCrop.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::imageops::{crop, resize_bilinear};
use crate::tensor::{Scalar, Tensor};

/// A mixed batch. `lambdas[i]` is the coefficient used for both the image
/// and the label of item `i`, which was mixed with item `perm[i]`.
#[derive(Clone, Debug)]
pub struct Mixed<T: Scalar> {
    pub x: Tensor<T>,
    pub y: Tensor<T>,
    pub lambdas: Vec<f64>,
    pub perm: Vec<usize>,
}

/// `x' = l x_i + (1 - l) x_perm(i)` with the same `l` for the labels.
pub fn mix_with<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, lambda: f64, perm: &[usize]) -> Result<Mixed<T>> {
    let b = *x.shape().first().unwrap_or(&0);
    if y.shape().first() != Some(&b) || perm.len() != b || y.ndim() != 2 {
        return Err(Error::shape(
            "mixup",
            format!("images {:?}, labels {:?}, permutation of {}", x.shape(), y.shape(), perm.len()),
        ));
    }
    let mix = |t: &Tensor<T>| {
        let inner = t.numel() / b;
        let (l, r) = (T::from_f64_lossy(lambda), T::from_f64_lossy(1.0 - lambda));
        let d = t.data();
        Tensor::from_fn(t.shape(), |k| {
            let (i, j) = (k / inner, k % inner);
            l * d[k] + r * d[perm[i] * inner + j]
        })
    };
    Ok(Mixed {
        x: mix(x),
        y: mix(y),
        lambdas: vec![lambda; b],
        perm: perm.to_vec(),
    })
}

/// Mixup with `lambda ~ Beta(alpha, alpha)` and a random permutation.
pub fn mixup<T: Scalar, R: Rng + ?Sized>(x: &Tensor<T>, y: &Tensor<T>, alpha: f64, rng: &mut R) -> Result<Mixed<T>> {
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("mixup alpha must be positive, got {alpha}")));
    }
    let lambda = Beta::new(alpha, alpha)
        .map_err(|e| Error::Config(format!("mixup alpha: {e}")))?
        .sample(rng);
    let mut perm: Vec<usize> = (0..*x.shape().first().unwrap_or(&0)).collect();
    perm.shuffle(rng);
    mix_with(x, y, lambda, &perm)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropParams {
    pub scale: (f64, f64),
    pub ratio: (f64, f64),
}

impl Default for CropParams {
    fn default() -> Self {
        CropParams {
            scale: (0.2, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
        }
    }
}

/// Picks a crop window `(top, left, h, w)`: up to 10 draws of area share
/// and log-uniform aspect ratio, else a center crop clamped to the ratio
/// range.
pub fn crop_window<R: Rng + ?Sized>(h: usize, w: usize, p: &CropParams, rng: &mut R) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let (lr0, lr1) = (p.ratio.0.ln(), p.ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(p.scale.0..=p.scale.1);
        let ar = rng.random_range(lr0..=lr1).exp();
        let cw = (target * ar).sqrt().round() as usize;
        let ch = (target / ar).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < p.ratio.0 {
        (((w as f64 / p.ratio.0).round() as usize).clamp(1, h), w)
    } else if in_ratio > p.ratio.1 {
        (h, ((h as f64 * p.ratio.1).round() as usize).clamp(1, w))
    } else {
        (h, w)
    };
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

/// Random area/aspect crop of an `[H, W, C]` image, resized to
/// `out x out`.
pub fn random_resized_crop<T: Scalar, R: Rng + ?Sized>(
    img: &Tensor<T>,
    out: usize,
    p: &CropParams,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::shape("random_resized_crop", format!("expected [H, W, C], got {s:?}")));
    }
    let (top, left, ch, cw) = crop_window(s[0], s[1], p, rng);
    resize_bilinear(&crop(img, top, left, ch, cw)?, out, out)
}
