//! Masked image modeling pretraining.
//!
//! A random `ratio` share of stem tokens is replaced by a learnable mask
//! token (the grid stays complete), the encoder runs as usual, and a light
//! decoder regresses each token's `p x p x 3` pixels. The loss is MSE over
//! masked tokens only.
//!
//! Decoder: `Linear(d4 -> D)`, pre-norm DMS blocks on the stage-4 grid, then
//! per upsampling step `SiLU(PW(Up2(x)) + PW(F_k))` back to the stage-1
//! grid, and a linear pixel head.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{self, EncoderConfig, StageFeatures, NUM_STAGES};
use crate::dms::{self, DmsConfig};
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{join, Ctx, Init, ParamSpec, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const MASK_TOKEN: &str = "mask_token";

/// A resolved token mask for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub ratio: f64,
    pub seed: u64,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Masked raster indices, sorted and unique.
    pub indices: Vec<usize>,
}

impl MaskSpec {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    fn check_grid(&self, h: usize, w: usize) -> Result<()> {
        if (self.grid_h, self.grid_w) != (h, w) {
            return Err(Error::shape(
                "apply_mask",
                format!("mask grid {}x{} vs token grid {h}x{w}", self.grid_h, self.grid_w),
            ));
        }
        if let Some(&i) = self.indices.iter().find(|&&i| i >= h * w) {
            return Err(Error::Invalid(format!("mask index {i} out of range for {h}x{w} grid")));
        }
        Ok(())
    }
}

/// Number of masked tokens, `round(ratio * n)`.
pub fn mask_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64).round() as usize
}

/// Samples `round(ratio * h * w)` distinct token indices uniformly.
pub fn make_mask(grid_h: usize, grid_w: usize, ratio: f64, seed: u64) -> Result<MaskSpec> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio must be in [0, 1), got {ratio}")));
    }
    let n = grid_h * grid_w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = index::sample(&mut rng, n, mask_count(n, ratio)).into_vec();
    indices.sort_unstable();
    Ok(MaskSpec {
        ratio,
        seed,
        grid_h,
        grid_w,
        indices,
    })
}

/// `[B, h, w, 1]` indicator of masked tokens.
pub fn mask_indicator<T: Scalar>(masks: &[MaskSpec], h: usize, w: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); masks.len() * h * w];
    for (b, m) in masks.iter().enumerate() {
        m.check_grid(h, w)?;
        for &i in &m.indices {
            data[b * h * w + i] = T::one();
        }
    }
    Tensor::new(vec![masks.len(), h, w, 1], data)
}

/// Replaces masked tokens of `[B, h, w, C]` by `mask_token [C]`; one spec
/// per batch item.
pub fn apply_mask<'t, T: Scalar>(
    tokens: Var<'t, T>,
    masks: &[MaskSpec],
    mask_token: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let s = tokens.shape();
    if s.len() != 4 || s[0] != masks.len() {
        return Err(Error::shape(
            "apply_mask",
            format!("{} masks for token map {s:?}", masks.len()),
        ));
    }
    let tape = tokens.tape();
    let m = mask_indicator::<T>(masks, s[1], s[2])?;
    let keep = tape.constant(m.map(|v| T::one() - v));
    let fill = tape
        .constant(Tensor::ones(&s))
        .mul_channel(mask_token)?
        .mul(tape.constant(m))?;
    tokens.mul(keep)?.add(fill)
}

/// `[B, H, W, C]` image to `[B, H/p, W/p, p*p*C]` patches, pixel order
/// `(row, col, channel)` within a patch.
pub fn patchify<T: Scalar>(images: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || p == 0 || s[1] % p != 0 || s[2] % p != 0 {
        return Err(Error::shape("patchify", format!("cannot cut {s:?} into {p}x{p} patches")));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / p, w / p);
    let x = images.data();
    let mut out = Vec::with_capacity(x.len());
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..p {
                    let row = ((bi * h + gy * p + py) * w + gx * p) * c;
                    out.extend_from_slice(&x[row..row + p * c]);
                }
            }
        }
    }
    Tensor::new(vec![b, gh, gw, p * p * c], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, p: usize, channels: usize) -> Result<Tensor<T>> {
    let s = patches.shape();
    if s.len() != 4 || p == 0 || s[3] != p * p * channels {
        return Err(Error::shape(
            "unpatchify",
            format!("{s:?} is not a map of {p}x{p}x{channels} patches"),
        ));
    }
    let (b, gh, gw, c) = (s[0], s[1], s[2], channels);
    let (h, w) = (gh * p, gw * p);
    let x = patches.data();
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let src = ((bi * gh + gy) * gw + gx) * p * p * c;
                for py in 0..p {
                    let dst = ((bi * h + gy * p + py) * w + gx * p) * c;
                    out[dst..dst + p * c].copy_from_slice(&x[src + py * p * c..src + (py + 1) * p * c]);
                }
            }
        }
    }
    Tensor::new(vec![b, h, w, c], out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub state_dim: usize,
    pub kernel: usize,
    /// Add pointwise projections of `F_3, F_2, F_1` while upsampling.
    pub lateral: bool,
    /// Add a fixed 2-D sin/cos position code before each upsampling
    /// projection.
    #[serde(default)]
    pub pos_encoding: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            dim: 128,
            depth: 2,
            state_dim: 8,
            kernel: 3,
            lateral: true,
            pos_encoding: false,
        }
    }
}

impl DecoderConfig {
    fn dms(&self) -> DmsConfig {
        DmsConfig {
            dw_kernel: self.kernel,
            conv_kernel: self.kernel,
            ..DmsConfig::new(self.dim, self.state_dim)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MamimConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub mask_ratio: f64,
}

impl MamimConfig {
    pub fn new(encoder: EncoderConfig) -> Self {
        MamimConfig {
            encoder,
            decoder: DecoderConfig::default(),
            mask_ratio: 0.75,
        }
    }

    /// Pixel values predicted per token.
    pub fn patch_pixels(&self) -> usize {
        self.encoder.patch_size * self.encoder.patch_size * self.encoder.in_channels
    }
}

pub fn decoder_specs(cfg: &MamimConfig) -> Result<Vec<ParamSpec>> {
    let (e, d) = (&cfg.encoder, &cfg.decoder);
    let mut v = nn::linear_specs("decoder.proj", e.dims[NUM_STAGES - 1], d.dim, true);
    for j in 0..d.depth {
        let b = format!("decoder.blocks.{j}");
        v.extend(nn::layer_norm_specs(&join(&b, "norm"), d.dim));
        v.extend(dms::param_specs(&join(&b, "dms"), &d.dms())?);
    }
    for s in 0..NUM_STAGES - 1 {
        v.extend(nn::linear_specs(&format!("decoder.up.{s}"), d.dim, d.dim, true));
        if d.lateral {
            let src = e.dims[NUM_STAGES - 2 - s];
            v.extend(nn::linear_specs(&format!("decoder.lateral.{s}"), src, d.dim, false));
        }
    }
    v.extend(nn::linear_specs("decoder.head", d.dim, cfg.patch_pixels(), true));
    Ok(v)
}

/// Encoder, mask token and decoder.
pub fn param_specs(cfg: &MamimConfig) -> Result<Vec<ParamSpec>> {
    let mut v = backbone::encoder_specs(&cfg.encoder)?;
    v.push(ParamSpec::new(MASK_TOKEN, &[cfg.encoder.dims[0]], Init::Uniform(0.02)));
    v.extend(decoder_specs(cfg)?);
    Ok(v)
}

pub fn init<T: Scalar>(cfg: &MamimConfig, seed: u64) -> Result<(ParamStore<T>, ParamStore<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ParamStore::init(&param_specs(cfg)?, &mut rng);
    let buffers = ParamStore::init(&backbone::encoder_buffer_specs(&cfg.encoder), &mut rng);
    Ok((params, buffers))
}

/// Predicts `[B, h1, w1, p*p*3]` pixels from the stage features.
pub fn decode<'t, T: Scalar>(
    ctx: &Ctx<'t, T>,
    cfg: &MamimConfig,
    features: &StageFeatures<'t, T>,
) -> Result<Var<'t, T>> {
    let d = &cfg.decoder;
    let mut x = nn::linear(ctx, "decoder.proj", features.last())?;
    let s = x.shape();
    let (b, h, w) = (s[0], s[1], s[2]);
    let mut t = x.reshape(&[b, h * w, d.dim])?;
    for j in 0..d.depth {
        let p = format!("decoder.blocks.{j}");
        let y = nn::layer_norm(ctx, &join(&p, "norm"), t)?;
        t = t.add(dms::forward(ctx, &join(&p, "dms"), &d.dms(), y)?)?;
    }
    x = t.reshape(&[b, h, w, d.dim])?;
    for s in 0..NUM_STAGES - 1 {
        x = x.upsample_nearest(2)?;
        if d.pos_encoding {
            let sh = x.shape();
            let pe = position_encoding::<T>(sh[1], sh[2], sh[3]);
            let pe = Tensor::stack(&vec![&pe; sh[0]])?;
            x = x.add(ctx.tape().constant(pe))?;
        }
        x = nn::linear(ctx, &format!("decoder.up.{s}"), x)?;
        if d.lateral {
            let skip = features.maps[NUM_STAGES - 2 - s];
            x = x.add(nn::linear(ctx, &format!("decoder.lateral.{s}"), skip)?)?;
        }
        x = x.silu();
    }
    nn::linear(ctx, "decoder.head", x)
}

/// `[h, w, c]` fixed sin/cos code: the first half of the channels encodes
/// the row, the second half the column, at geometrically spaced
/// frequencies.
pub fn position_encoding<T: Scalar>(h: usize, w: usize, c: usize) -> Tensor<T> {
    let half = c / 2;
    let pairs = (half / 2).max(1);
    Tensor::from_fn(&[h, w, c], |i| {
        let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
        let (pos, k) = if ch < half { (y, ch) } else { (x, ch - half) };
        let freq = 1.0 / 100f64.powf((k / 2) as f64 / pairs as f64);
        let a = pos as f64 * freq;
        T::from_f64_lossy(if k % 2 == 0 { a.sin() } else { a.cos() })
    })
}

/// Masked stem tokens through encoder and decoder.
pub fn forward<'t, T: Scalar>(
    ctx: &Ctx<'t, T>,
    cfg: &MamimConfig,
    images: Var<'t, T>,
    masks: &[MaskSpec],
) -> Result<Var<'t, T>> {
    let s = images.shape();
    if s.len() == 4 {
        cfg.encoder.check_input(s[1], s[2])?;
    }
    let tokens = backbone::patch_embed(ctx, &cfg.encoder, images)?;
    let tokens = apply_mask(tokens, masks, ctx.param(MASK_TOKEN)?)?;
    let features = backbone::encode_tokens(ctx, &cfg.encoder, tokens)?;
    decode(ctx, cfg, &features)
}

/// Mean squared error over masked tokens, averaged over masked tokens and
/// pixel values. Gradients at visible tokens are exactly zero.
pub fn mamim_loss<'t, T: Scalar>(pred: Var<'t, T>, target: &Tensor<T>, masks: &[MaskSpec]) -> Result<Var<'t, T>> {
    let s = pred.shape();
    if s.as_slice() != target.shape() || s.len() != 4 || s[0] != masks.len() {
        return Err(Error::shape(
            "mamim_loss",
            format!("pred {s:?}, target {:?}, {} masks", target.shape(), masks.len()),
        ));
    }
    let masked: usize = masks.iter().map(MaskSpec::len).sum();
    if masked == 0 {
        return Err(Error::Invalid("reconstruction loss is undefined for an empty mask".into()));
    }
    let tape: &'t Tape<T> = pred.tape();
    let m = tape.constant(mask_indicator::<T>(masks, s[1], s[2])?);
    let sq = pred.sub(tape.constant(target.clone()))?.square().mul(m)?;
    Ok(sq.sum().scale(1.0 / (masked * s[3]) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_count_rounding() {
        assert_eq!(make_mask(14, 14, 0.75, 0).unwrap().len(), 147);
        assert!(make_mask(4, 4, 0.0, 0).unwrap().is_empty());
        assert!(make_mask(4, 4, 1.0, 0).is_err());
    }

    #[test]
    fn patchify_roundtrip() {
        let img = Tensor::<f32>::from_fn(&[2, 8, 8, 3], |i| i as f32);
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.shape(), &[2, 2, 2, 48]);
        // first patch starts with the image's first row segment
        assert_eq!(&p.data()[..12], &img.data()[..12]);
        assert_eq!(&p.data()[12..24], &img.data()[24..36]);
        assert_eq!(unpatchify(&p, 4, 3).unwrap(), img);
    }

    #[test]
    fn decoder_shape_follows_stage_one_grid() {
        let cfg = MamimConfig::new(EncoderConfig::desk());
        let (params, buffers) = init::<f32>(&cfg, 0).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &params, buffers, crate::params::Mode::Eval, false);
        let img = tape.constant(Tensor::zeros(&[1, 32, 32, 3]));
        let masks = vec![make_mask(8, 8, 0.75, 1).unwrap()];
        let pred = forward(&ctx, &cfg, img, &masks).unwrap();
        assert_eq!(pred.shape(), vec![1, 8, 8, 48]);
    }
}
