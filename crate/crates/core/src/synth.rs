//! Synthetic images for desk-scale runs: periodic textures for masked
//! pretraining, and a blobs-vs-stripes classification task.
//!
//! All images are `[S, S, 3]` with values in `[0, 1]`.

use std::f64::consts::PI;

use rand::Rng;

use crate::seeds;
use crate::tensor::Tensor;

fn color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn image(size: usize, mut f: impl FnMut(f64, f64, usize) -> f64) -> Tensor<f32> {
    Tensor::from_fn(&[size, size, 3], |i| {
        let (y, x, c) = (i / (size * 3), (i / 3) % size, i % 3);
        f(y as f64, x as f64, c).clamp(0.0, 1.0) as f32
    })
}

/// Oriented grating in `[-1, 1]`.
fn grating<R: Rng + ?Sized>(rng: &mut R, periods: std::ops::Range<f64>) -> impl Fn(f64, f64) -> f64 {
    let theta = rng.random_range(0.0..PI);
    let period = rng.random_range(periods);
    let phase = rng.random_range(0.0..2.0 * PI);
    let (ky, kx) = (theta.sin() * 2.0 * PI / period, theta.cos() * 2.0 * PI / period);
    move |y, x| (ky * y + kx * x + phase).sin()
}

/// Two superimposed colored gratings (periods 6 px to half the image)
/// plus light noise.
pub fn texture<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Tensor<f32> {
    let periods = 6.0..(size as f64 / 2.0).max(7.0);
    let (g1, g2) = (grating(rng, periods.clone()), grating(rng, periods));
    let (c0, c1, c2) = (color(rng), color(rng), color(rng));
    let noise: Vec<f64> = (0..size * size * 3).map(|_| rng.random_range(-0.03..0.03)).collect();
    image(size, |y, x, c| {
        let (a, b) = (g1(y, x), g2(y, x));
        let i = (y as usize * size + x as usize) * 3 + c;
        0.5 * c0[c] + 0.25 * a * c1[c] + 0.25 * b * c2[c] + 0.25 + noise[i]
    })
}

/// One Gaussian blob of radius `r` centered at `(cy, cx)` on a dark
/// background.
pub fn blob_at(size: usize, cy: f64, cx: f64, r: f64) -> Tensor<f32> {
    image(size, |y, x, c| {
        let d2 = (y - cy).powi(2) + (x - cx).powi(2);
        0.1 + [0.9, 0.6, 0.3][c] * (-d2 / (2.0 * r * r)).exp()
    })
}

/// Class 0: one or two soft blobs on a noisy background.
pub fn blobs<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Tensor<f32> {
    let s = size as f64;
    let spots: Vec<(f64, f64, f64, [f64; 3])> = (0..rng.random_range(1..=2))
        .map(|_| {
            (
                rng.random_range(0.2 * s..0.8 * s),
                rng.random_range(0.2 * s..0.8 * s),
                rng.random_range(0.1 * s..0.2 * s),
                color(rng),
            )
        })
        .collect();
    let bg = color(rng);
    let noise: Vec<f64> = (0..size * size * 3).map(|_| rng.random_range(-0.05..0.05)).collect();
    image(size, |y, x, c| {
        let mut v = 0.3 * bg[c];
        for &(cy, cx, r, col) in &spots {
            v += 0.7 * col[c] * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * r * r)).exp();
        }
        v + noise[(y as usize * size + x as usize) * 3 + c] + 0.1
    })
}

/// Class 1: a single fine oriented grating (period 4-8 px) on a noisy
/// background.
pub fn stripes<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Tensor<f32> {
    let g = grating(rng, 4.0..8.0);
    let (bg, fg) = (color(rng), color(rng));
    let noise: Vec<f64> = (0..size * size * 3).map(|_| rng.random_range(-0.05..0.05)).collect();
    image(size, |y, x, c| {
        0.3 * bg[c] + 0.35 * (1.0 + g(y, x)) * fg[c] + noise[(y as usize * size + x as usize) * 3 + c] + 0.1
    })
}

/// `n` textures, image `i` drawn from its own stream of `seed`.
pub fn texture_set(n: usize, size: usize, seed: u64) -> Vec<Tensor<f32>> {
    (0..n).map(|i| texture(size, &mut seeds::rng(seed, &[i as u64]))).collect()
}

/// `n_per_class` blobs (label 0) followed by `n_per_class` stripes
/// (label 1).
pub fn blobs_stripes(n_per_class: usize, size: usize, seed: u64) -> (Vec<Tensor<f32>>, Vec<usize>) {
    let mut images = Vec::with_capacity(2 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for class in 0..2 {
        for i in 0..n_per_class {
            let mut rng = seeds::rng(seed, &[class as u64, i as u64]);
            images.push(if class == 0 { blobs(size, &mut rng) } else { stripes(size, &mut rng) });
            labels.push(class);
        }
    }
    (images, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_stay_in_range_and_are_seeded() {
        let a = texture_set(3, 16, 9);
        assert_eq!(a, texture_set(3, 16, 9));
        let (imgs, labels) = blobs_stripes(2, 16, 1);
        assert_eq!(labels, vec![0, 0, 1, 1]);
        for t in a.iter().chain(&imgs) {
            assert_eq!(t.shape(), &[16, 16, 3]);
            assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
