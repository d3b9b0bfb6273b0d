//! Four-stage hierarchical encoder and the classification head.
//!
//! ```text
//! tokens = Conv_{p x p, stride p}(image)
//! stage k: F = LPR_k(x); F = F + DMS(LN(F)) (n_k times, raster order)
//!          x = Conv_{2x2, stride 2}(F) between stages
//! logits = Linear(GAP(F_4))
//! ```
//!
//! All maps are channels-last `[B, H, W, C]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::dms::{self, DmsConfig};
use crate::error::{Error, Result};
use crate::lpr::{self, LprConfig, LprVariant};
use crate::nn;
use crate::params::{count, fan_in_bound, join, Ctx, Init, ParamSpec, ParamStore};
use crate::tensor::Scalar;

pub const NUM_STAGES: usize = 4;

/// Parameter count the full preset is tuned towards.
pub const FULL_TARGET_PARAMS: usize = 25_300_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub in_channels: usize,
    pub dims: [usize; NUM_STAGES],
    pub depths: [usize; NUM_STAGES],
    pub state_dim: usize,
    /// Kernel of the LPR depthwise conv and both DMS convs.
    pub kernel: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub lpr_variant: LprVariant,
}

impl EncoderConfig {
    /// Desk-scale preset for 32x32 inputs.
    pub fn desk() -> Self {
        EncoderConfig {
            patch_size: 4,
            in_channels: 3,
            dims: [16, 32, 64, 128],
            depths: [1, 1, 2, 1],
            state_dim: 8,
            kernel: 3,
            num_classes: 2,
            lpr_variant: LprVariant::Residual,
        }
    }

    /// Gradient-check preset for 16x16 inputs. Patch 2 keeps the input
    /// divisible by `patch * 8`.
    pub fn tiny() -> Self {
        EncoderConfig {
            patch_size: 2,
            dims: [4, 8, 16, 32],
            depths: [1, 1, 1, 1],
            state_dim: 2,
            ..Self::desk()
        }
    }

    /// Full-scale preset (224x224 input, 9 classes); depths come from
    /// [`search_full_depths`].
    pub fn full() -> Self {
        EncoderConfig {
            patch_size: 4,
            in_channels: 3,
            dims: [96, 192, 384, 768],
            depths: [2, 2, 21, 7],
            state_dim: 16,
            kernel: 3,
            num_classes: 9,
            lpr_variant: LprVariant::Residual,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected desk, tiny or full)"
            ))),
        }
    }

    pub fn lpr(&self, stage: usize) -> LprConfig {
        LprConfig {
            channels: self.dims[stage],
            kernel: self.kernel,
            variant: self.lpr_variant,
        }
    }

    pub fn dms(&self, stage: usize) -> DmsConfig {
        DmsConfig {
            dw_kernel: self.kernel,
            conv_kernel: self.kernel,
            ..DmsConfig::new(self.dims[stage], self.state_dim)
        }
    }

    /// Overall downsampling factor from input to the last stage.
    pub fn total_stride(&self) -> usize {
        self.patch_size << (NUM_STAGES - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "patch_size, in_channels and num_classes must be positive".into(),
            ));
        }
        for k in 0..NUM_STAGES {
            self.lpr(k).validate()?;
            self.dms(k).validate()?;
        }
        Ok(())
    }

    /// Checks that an `h x w` input survives the stem and three 2x downsamples.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let s = self.total_stride();
        if h % s != 0 || w % s != 0 {
            return Err(Error::shape(
                "encode",
                format!("input {h}x{w} is not divisible by patch_size * 8 = {s}"),
            ));
        }
        Ok(())
    }

    /// `(H, W)` of stage `k` (0-based) for an `h x w` input.
    pub fn stage_resolution(&self, stage: usize, h: usize, w: usize) -> (usize, usize) {
        let f = self.patch_size << stage;
        (h / f, w / f)
    }
}

fn stage_prefix(k: usize) -> String {
    format!("encoder.stages.{k}")
}

fn block_prefix(k: usize, j: usize) -> String {
    format!("encoder.stages.{k}.blocks.{j}")
}

pub fn stem_specs(cfg: &EncoderConfig) -> Vec<ParamSpec> {
    let p = cfg.patch_size;
    vec![
        ParamSpec::new(
            "encoder.stem.weight",
            &[p, p, cfg.in_channels, cfg.dims[0]],
            Init::Uniform(fan_in_bound(p * p * cfg.in_channels)),
        ),
        ParamSpec::new("encoder.stem.bias", &[cfg.dims[0]], Init::Zeros),
    ]
}

pub fn stage_specs(cfg: &EncoderConfig, k: usize) -> Result<Vec<ParamSpec>> {
    let mut v = lpr::param_specs(&join(&stage_prefix(k), "lpr"), &cfg.lpr(k))?;
    for j in 0..cfg.depths[k] {
        let b = block_prefix(k, j);
        v.extend(nn::layer_norm_specs(&join(&b, "norm"), cfg.dims[k]));
        v.extend(dms::param_specs(&join(&b, "dms"), &cfg.dms(k))?);
    }
    Ok(v)
}

pub fn downsample_specs(cfg: &EncoderConfig, k: usize) -> Vec<ParamSpec> {
    let (ci, co) = (cfg.dims[k], cfg.dims[k + 1]);
    let d = join(&stage_prefix(k), "down");
    vec![
        ParamSpec::new(join(&d, "weight"), &[2, 2, ci, co], Init::Uniform(fan_in_bound(4 * ci))),
        ParamSpec::new(join(&d, "bias"), &[co], Init::Zeros),
    ]
}

/// Everything under `encoder.`: stem, stages and downsamplers.
pub fn encoder_specs(cfg: &EncoderConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let mut v = stem_specs(cfg);
    for k in 0..NUM_STAGES {
        v.extend(stage_specs(cfg, k)?);
        if k + 1 < NUM_STAGES {
            v.extend(downsample_specs(cfg, k));
        }
    }
    Ok(v)
}

pub fn encoder_buffer_specs(cfg: &EncoderConfig) -> Vec<ParamSpec> {
    (0..NUM_STAGES)
        .flat_map(|k| lpr::buffer_specs(&join(&stage_prefix(k), "lpr"), &cfg.lpr(k)))
        .collect()
}

/// Zero-initialized: a fresh classifier predicts the uniform distribution
/// whatever the encoder's feature scale.
pub fn head_specs(cfg: &EncoderConfig) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new("head.weight", &[cfg.dims[NUM_STAGES - 1], cfg.num_classes], Init::Zeros),
        ParamSpec::new("head.bias", &[cfg.num_classes], Init::Zeros),
    ]
}

/// Encoder plus classification head.
pub fn classifier_specs(cfg: &EncoderConfig) -> Result<Vec<ParamSpec>> {
    let mut v = encoder_specs(cfg)?;
    v.extend(head_specs(cfg));
    Ok(v)
}

/// Exact parameter count of the classifier (encoder + head).
pub fn param_count_total(cfg: &EncoderConfig) -> Result<usize> {
    Ok(count(&classifier_specs(cfg)?))
}

/// Per-module parameter counts in layout order.
pub fn param_breakdown(cfg: &EncoderConfig) -> Result<Vec<(String, usize)>> {
    cfg.validate()?;
    let mut out = vec![("stem".to_string(), count(&stem_specs(cfg)))];
    for k in 0..NUM_STAGES {
        out.push((format!("stage{}.lpr", k + 1), lpr::param_count(&cfg.lpr(k))?));
        let per_block = dms::param_count(&cfg.dms(k))? + 2 * cfg.dims[k];
        out.push((format!("stage{}.dms x{}", k + 1, cfg.depths[k]), per_block * cfg.depths[k]));
        if k + 1 < NUM_STAGES {
            out.push((format!("stage{}.downsample", k + 1), count(&downsample_specs(cfg, k))));
        }
    }
    out.push(("head".to_string(), count(&head_specs(cfg))));
    Ok(out)
}

/// Picks stage-3/4 depths for the full dims so the classifier lands
/// closest to [`FULL_TARGET_PARAMS`], holding stages 1-2 at depth 2.
/// Ties go to the shallower network, then to the smaller stage-4 depth.
pub fn search_full_depths() -> Result<[usize; NUM_STAGES]> {
    let mut cfg = EncoderConfig::full();
    let mut best: Option<(usize, usize, [usize; NUM_STAGES])> = None;
    for n3 in 2..=40 {
        for n4 in 2..=20 {
            cfg.depths = [2, 2, n3, n4];
            let dist = param_count_total(&cfg)?.abs_diff(FULL_TARGET_PARAMS);
            let key = (dist, n3 + n4, cfg.depths);
            if best.as_ref().is_none_or(|b| (key.0, key.1, key.2[3]) < (b.0, b.1, b.2[3])) {
                best = Some(key);
            }
        }
    }
    Ok(best.expect("non-empty search").2)
}

/// Freshly initialized classifier parameters and BN buffers.
pub fn init_classifier<T: Scalar>(cfg: &EncoderConfig, seed: u64) -> Result<(ParamStore<T>, ParamStore<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ParamStore::init(&classifier_specs(cfg)?, &mut rng);
    let buffers = ParamStore::init(&encoder_buffer_specs(cfg), &mut rng);
    Ok((params, buffers))
}

/// Stage outputs `F_1..F_4`, each `[B, H_k, W_k, d_k]`.
#[derive(Clone, Copy, Debug)]
pub struct StageFeatures<'t, T: Scalar> {
    pub maps: [Var<'t, T>; NUM_STAGES],
}

impl<'t, T: Scalar> StageFeatures<'t, T> {
    pub fn last(&self) -> Var<'t, T> {
        self.maps[NUM_STAGES - 1]
    }
}

/// Strided patch projection `[B, H, W, 3] -> [B, H/p, W/p, d_1]`.
pub fn patch_embed<'t, T: Scalar>(ctx: &Ctx<'t, T>, cfg: &EncoderConfig, image: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = image.shape();
    if s.len() != 4 || s[3] != cfg.in_channels {
        return Err(Error::shape(
            "patch_embed",
            format!("expected [B, H, W, {}] image, got {s:?}", cfg.in_channels),
        ));
    }
    let p = cfg.patch_size;
    if s[1] % p != 0 || s[2] % p != 0 {
        return Err(Error::shape(
            "patch_embed",
            format!("image {}x{} is not divisible by patch size {p}", s[1], s[2]),
        ));
    }
    image
        .conv2d(ctx.param("encoder.stem.weight")?, p, 0)?
        .add_channel(ctx.param("encoder.stem.bias")?)
}

/// One stage: LPR on the map, then pre-norm residual DMS blocks over the
/// raster-ordered token sequence.
pub fn stage_forward<'t, T: Scalar>(
    ctx: &Ctx<'t, T>,
    cfg: &EncoderConfig,
    k: usize,
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let x = lpr::forward(ctx, &join(&stage_prefix(k), "lpr"), &cfg.lpr(k), x)?;
    let s = x.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let mut t = x.reshape(&[b, h * w, c])?;
    for j in 0..cfg.depths[k] {
        let p = block_prefix(k, j);
        let y = nn::layer_norm(ctx, &join(&p, "norm"), t)?;
        t = t.add(dms::forward(ctx, &join(&p, "dms"), &cfg.dms(k), y)?)?;
    }
    t.reshape(&[b, h, w, c])
}

/// Runs the stages on stem output (possibly masked).
pub fn encode_tokens<'t, T: Scalar>(
    ctx: &Ctx<'t, T>,
    cfg: &EncoderConfig,
    tokens: Var<'t, T>,
) -> Result<StageFeatures<'t, T>> {
    let mut x = tokens;
    let mut maps = Vec::with_capacity(NUM_STAGES);
    for k in 0..NUM_STAGES {
        let f = stage_forward(ctx, cfg, k, x)?;
        maps.push(f);
        if k + 1 < NUM_STAGES {
            let d = join(&stage_prefix(k), "down");
            x = f
                .conv2d(ctx.param(&join(&d, "weight"))?, 2, 0)?
                .add_channel(ctx.param(&join(&d, "bias"))?)?;
        }
    }
    Ok(StageFeatures {
        maps: maps.try_into().map_err(|_| Error::Invalid("stage count".into()))?,
    })
}

pub fn encode<'t, T: Scalar>(ctx: &Ctx<'t, T>, cfg: &EncoderConfig, image: Var<'t, T>) -> Result<StageFeatures<'t, T>> {
    let s = image.shape();
    if s.len() == 4 {
        cfg.check_input(s[1], s[2])?;
    }
    let tokens = patch_embed(ctx, cfg, image)?;
    encode_tokens(ctx, cfg, tokens)
}

/// `Linear(GAP(F_4))`; logits, no softmax.
pub fn head<'t, T: Scalar>(ctx: &Ctx<'t, T>, features: &StageFeatures<'t, T>) -> Result<Var<'t, T>> {
    nn::linear(ctx, "head", features.last().global_avg_pool()?)
}

pub fn classify<'t, T: Scalar>(ctx: &Ctx<'t, T>, cfg: &EncoderConfig, image: Var<'t, T>) -> Result<Var<'t, T>> {
    head(ctx, &encode(ctx, cfg, image)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::Mode;
    use crate::tensor::Tensor;

    #[test]
    fn presets_validate() {
        for name in ["desk", "tiny", "full"] {
            EncoderConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(EncoderConfig::preset("huge").is_err());
    }

    #[test]
    fn breakdown_sums_to_total() {
        for cfg in [EncoderConfig::desk(), EncoderConfig::tiny()] {
            let sum: usize = param_breakdown(&cfg).unwrap().iter().map(|(_, n)| n).sum();
            assert_eq!(sum, param_count_total(&cfg).unwrap());
        }
    }

    #[test]
    fn indivisible_input_rejected() {
        let cfg = EncoderConfig::desk();
        let (p, b) = init_classifier::<f32>(&cfg, 0).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &p, b, Mode::Eval, false);
        let img = tape.constant(Tensor::zeros(&[1, 30, 32, 3]));
        assert!(matches!(encode(&ctx, &cfg, img), Err(Error::Shape { .. })));
    }

    #[test]
    fn desk_logits_shape() {
        let cfg = EncoderConfig::desk();
        let (p, b) = init_classifier::<f32>(&cfg, 0).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &p, b, Mode::Eval, false);
        let img = tape.constant(Tensor::from_fn(&[2, 32, 32, 3], |i| (i % 13) as f32 / 13.0));
        let f = encode(&ctx, &cfg, img).unwrap();
        for k in 0..NUM_STAGES {
            let (h, w) = cfg.stage_resolution(k, 32, 32);
            assert_eq!(f.maps[k].shape(), vec![2, h, w, cfg.dims[k]]);
        }
        assert_eq!(head(&ctx, &f).unwrap().shape(), vec![2, 2]);
    }
}
