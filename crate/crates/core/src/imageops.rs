//! Geometric operations on `[H, W, C]` images.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn hwc<T: Scalar>(img: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::shape(op, format!("expected [H, W, C] image, got {s:?}"))),
    }
}

/// Bilinear resize with half-pixel centers and edge clamping; resizing to
/// the same size is the identity.
pub fn resize_bilinear<T: Scalar>(img: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (h, w, c) = hwc(img, "resize")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize", format!("empty target {out_h}x{out_w}")));
    }
    // source coordinate and blend weight along one axis
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let (ys, xs) = (axis(h, out_h), axis(w, out_w));
    let src = img.data();
    let px = |y: usize, x: usize, ch: usize| src[(y * w + x) * c + ch].to_f64_lossy();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let top = px(y0, x0, ch) * (1.0 - fx) + px(y0, x1, ch) * fx;
                let bot = px(y1, x0, ch) * (1.0 - fx) + px(y1, x1, ch) * fx;
                let v = if fy == 0.0 { top } else { top * (1.0 - fy) + bot * fy };
                out.push(T::from_f64_lossy(v));
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}

pub fn crop<T: Scalar>(img: &Tensor<T>, top: usize, left: usize, ch: usize, cw: usize) -> Result<Tensor<T>> {
    let (h, w, c) = hwc(img, "crop")?;
    if ch == 0 || cw == 0 || top + ch > h || left + cw > w {
        return Err(Error::shape(
            "crop",
            format!("window {ch}x{cw} at ({top}, {left}) outside {h}x{w}"),
        ));
    }
    let mut out = Vec::with_capacity(ch * cw * c);
    for y in top..top + ch {
        let row = (y * w + left) * c;
        out.extend_from_slice(&img.data()[row..row + cw * c]);
    }
    Tensor::new(vec![ch, cw, c], out)
}

/// Circular shift by `(dy, dx)`: output `(y, x)` takes input
/// `(y - dy, x - dx)` modulo the size. Works on `[H, W, C]`.
pub fn roll<T: Scalar>(img: &Tensor<T>, dy: usize, dx: usize) -> Result<Tensor<T>> {
    let (h, w, c) = hwc(img, "roll")?;
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        let sy = (y + h - dy % h) % h;
        for x in 0..w {
            let sx = (x + w - dx % w) % w;
            out.extend_from_slice(&src[(sy * w + sx) * c..(sy * w + sx + 1) * c]);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_resize_is_identity() {
        let img = Tensor::<f32>::from_fn(&[5, 7, 3], |i| (i * 31 % 17) as f32 / 17.0);
        assert_eq!(resize_bilinear(&img, 5, 7).unwrap(), img);
    }

    #[test]
    fn upsample_interpolates_linearly() {
        // 1x2 ramp [0, 1] to 1x4: half-pixel centers give 0, .25, .75, 1
        let img = Tensor::<f64>::from_f64(&[1, 2, 1], &[0.0, 1.0]).unwrap();
        let r = resize_bilinear(&img, 1, 4).unwrap();
        assert_eq!(r.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn crop_and_roll() {
        let img = Tensor::<f32>::from_fn(&[3, 3, 1], |i| i as f32);
        assert_eq!(crop(&img, 1, 1, 2, 2).unwrap().data(), &[4.0, 5.0, 7.0, 8.0]);
        assert!(crop(&img, 2, 2, 2, 2).is_err());
        assert_eq!(roll(&img, 1, 0).unwrap().data()[..3], [6.0, 7.0, 8.0]);
    }
}
