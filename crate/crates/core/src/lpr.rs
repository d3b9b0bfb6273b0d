//! Local perception residual (LPR) embedding.
//!
//! ```text
//! xl  = ReLU(BN(PW_{C -> C/2}(x)))
//! xdw = BN(DW_{k x k}(xl))
//! out = PW_{C/2 -> C}(ReLU(xdw)) + x
//! ```
//!
//! The expanding pointwise conv starts at zero, so a fresh block is the
//! identity map. A ghost-feature variant (primary conv and a depthwise
//! "cheap" conv concatenated, no residual) is available through
//! [`LprVariant::Ghost`].

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{fan_in_bound, join, Ctx, Init, ParamSpec};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LprVariant {
    #[default]
    Residual,
    Ghost,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LprConfig {
    pub channels: usize,
    pub kernel: usize,
    #[serde(default)]
    pub variant: LprVariant,
}

/// Depthwise kernel of the ghost variant's cheap operation.
const GHOST_DW_KERNEL: usize = 3;

impl LprConfig {
    pub fn new(channels: usize) -> Self {
        LprConfig {
            channels,
            kernel: 3,
            variant: LprVariant::Residual,
        }
    }

    pub fn bottleneck(&self) -> usize {
        self.channels / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 || self.channels % 2 != 0 {
            return Err(Error::Config(format!(
                "LPR channels must be even and >= 2, got {}",
                self.channels
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("LPR kernel must be odd, got {}", self.kernel)));
        }
        Ok(())
    }
}

pub fn param_specs(prefix: &str, cfg: &LprConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let (c, h, k) = (cfg.channels, cfg.bottleneck(), cfg.kernel);
    let mut v = Vec::new();
    match cfg.variant {
        LprVariant::Residual => {
            v.push(ParamSpec::new(join(prefix, "reduce.weight"), &[c, h], Init::Uniform(fan_in_bound(c))));
            v.extend(nn::batch_norm_specs(&join(prefix, "bn1"), h));
            v.push(ParamSpec::new(join(prefix, "dw.weight"), &[h, k, k], Init::Uniform(fan_in_bound(k * k))));
            v.extend(nn::batch_norm_specs(&join(prefix, "bn2"), h));
            v.push(ParamSpec::new(join(prefix, "expand.weight"), &[h, c], Init::Zeros));
        }
        LprVariant::Ghost => {
            v.push(ParamSpec::new(
                join(prefix, "primary.weight"),
                &[k, k, c, h],
                Init::Uniform(fan_in_bound(k * k * c)),
            ));
            v.extend(nn::batch_norm_specs(&join(prefix, "bn1"), h));
            let g = GHOST_DW_KERNEL;
            v.push(ParamSpec::new(join(prefix, "dw.weight"), &[h, g, g], Init::Uniform(fan_in_bound(g * g))));
            v.extend(nn::batch_norm_specs(&join(prefix, "bn2"), h));
        }
    }
    Ok(v)
}

pub fn buffer_specs(prefix: &str, cfg: &LprConfig) -> Vec<ParamSpec> {
    let h = cfg.bottleneck();
    let mut v = nn::batch_norm_buffers(&join(prefix, "bn1"), h);
    v.extend(nn::batch_norm_buffers(&join(prefix, "bn2"), h));
    v
}

pub fn param_count(cfg: &LprConfig) -> Result<usize> {
    Ok(crate::params::count(&param_specs("", cfg)?))
}

/// Weights in the depthwise stage, `k^2 * C/2`.
pub fn depthwise_param_count(cfg: &LprConfig) -> usize {
    cfg.kernel * cfg.kernel * cfg.bottleneck()
}

fn check_input<T: Scalar>(cfg: &LprConfig, x: Var<'_, T>) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[3] != cfg.channels {
        return Err(Error::shape(
            "lpr",
            format!("expected [B, H, W, {}] input, got {s:?}", cfg.channels),
        ));
    }
    Ok(())
}

/// The residual variant's non-residual path,
/// `PW(ReLU(BN(DW(ReLU(BN(PW(x)))))))`.
pub fn branch<'t, T: Scalar>(
    ctx: &Ctx<'t, T>,
    prefix: &str,
    cfg: &LprConfig,
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    check_input(cfg, x)?;
    let xl = x.linear(ctx.param(&join(prefix, "reduce.weight"))?, None)?;
    let xl = nn::batch_norm(ctx, &join(prefix, "bn1"), xl)?.relu();
    let xdw = xl.depthwise_conv2d(ctx.param(&join(prefix, "dw.weight"))?)?;
    let xdw = nn::batch_norm(ctx, &join(prefix, "bn2"), xdw)?;
    xdw.relu().linear(ctx.param(&join(prefix, "expand.weight"))?, None)
}

pub fn forward<'t, T: Scalar>(
    ctx: &Ctx<'t, T>,
    prefix: &str,
    cfg: &LprConfig,
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    match cfg.variant {
        LprVariant::Residual => branch(ctx, prefix, cfg, x)?.add(x),
        LprVariant::Ghost => ghost_forward(ctx, prefix, cfg, x),
    }
}

/// Primary `k x k` conv to `C/2` channels, a depthwise conv generating
/// `C/2` ghost channels from it, and their concatenation.
pub fn ghost_forward<'t, T: Scalar>(
    ctx: &Ctx<'t, T>,
    prefix: &str,
    cfg: &LprConfig,
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    check_input(cfg, x)?;
    let xl = x.conv2d(ctx.param(&join(prefix, "primary.weight"))?, 1, cfg.kernel / 2)?;
    let xl = nn::batch_norm(ctx, &join(prefix, "bn1"), xl)?.relu();
    let xdw = xl.depthwise_conv2d(ctx.param(&join(prefix, "dw.weight"))?)?;
    let xdw = nn::batch_norm(ctx, &join(prefix, "bn2"), xdw)?.relu();
    xl.concat(xdw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::{Mode, ParamStore};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stores(cfg: &LprConfig) -> (ParamStore<f32>, ParamStore<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (
            ParamStore::init(&param_specs("lpr", cfg).unwrap(), &mut rng),
            ParamStore::init(&buffer_specs("lpr", cfg), &mut rng),
        )
    }

    #[test]
    fn odd_channels_rejected() {
        assert!(matches!(LprConfig::new(7).validate(), Err(Error::Config(_))));
    }

    #[test]
    fn depthwise_count_formula() {
        let cfg = LprConfig::new(8);
        assert_eq!(depthwise_param_count(&cfg), 36);
        assert_eq!(cfg.kernel * cfg.kernel * cfg.bottleneck() * cfg.bottleneck(), 144);
    }

    #[test]
    fn shape_preserved_at_full_scale() {
        let cfg = LprConfig::new(96);
        let (p, b) = stores(&cfg);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &p, b, Mode::Eval, false);
        let x = tape.constant(Tensor::from_fn(&[1, 56, 56, 96], |i| (i % 7) as f32));
        assert_eq!(forward(&ctx, "lpr", &cfg, x).unwrap().shape(), vec![1, 56, 56, 96]);
    }

    #[test]
    fn ghost_variant_keeps_channels() {
        let cfg = LprConfig {
            variant: LprVariant::Ghost,
            ..LprConfig::new(8)
        };
        let (p, b) = stores(&cfg);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &p, b, Mode::Train, false);
        let x = tape.constant(Tensor::from_fn(&[2, 5, 5, 8], |i| ((i * 7) % 11) as f32 / 11.0));
        assert_eq!(forward(&ctx, "lpr", &cfg, x).unwrap().shape(), vec![2, 5, 5, 8]);
    }
}
