//! Directional multi-scale (DMS) token mixer.
//!
//! Two branches, each fed by its own `C -> C/2` projection of the full
//! input:
//!
//! ```text
//! x1 = BiScan(SiLU(SepConv1d(Linear_ssm(x))))
//! x2 = SiLU(Conv1d(Linear_conv(x)))
//! y  = Linear_out(concat(x1, x2))
//! ```
//!
//! The scan branch runs a forward and a reversed selective scan with
//! independent parameters and sums them, so every position sees context
//! from both sides.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{fan_in_bound, join, Ctx, Init, ParamSpec};
use crate::scan::{self, default_dt_rank, SsmParams, SsmShape};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DmsConfig {
    /// Block width `C`; must be even.
    pub channels: usize,
    /// SSM state size `N`.
    pub state_dim: usize,
    /// Depthwise kernel of the separable conv (odd).
    pub dw_kernel: usize,
    /// Kernel of the regular conv branch (odd).
    pub conv_kernel: usize,
    /// Rank of the step-size projection; `None` means `ceil((C/2) / 16)`.
    #[serde(default)]
    pub dt_rank: Option<usize>,
}

impl DmsConfig {
    pub fn new(channels: usize, state_dim: usize) -> Self {
        DmsConfig {
            channels,
            state_dim,
            dw_kernel: 3,
            conv_kernel: 3,
            dt_rank: None,
        }
    }

    pub fn branch_width(&self) -> usize {
        self.channels / 2
    }

    pub fn ssm_shape(&self) -> SsmShape {
        let d = self.branch_width();
        SsmShape {
            channels: d,
            state: self.state_dim,
            dt_rank: self.dt_rank.unwrap_or_else(|| default_dt_rank(d)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 || self.channels % 2 != 0 {
            return Err(Error::Config(format!(
                "DMS channels must be even and >= 2, got {}",
                self.channels
            )));
        }
        for (name, k) in [("dw_kernel", self.dw_kernel), ("conv_kernel", self.conv_kernel)] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("DMS {name} must be odd, got {k}")));
            }
        }
        if self.state_dim == 0 || self.dt_rank == Some(0) {
            return Err(Error::Config("DMS state_dim and dt_rank must be positive".into()));
        }
        Ok(())
    }
}

/// Weights of the separable conv: depthwise `[C', k]` then pointwise
/// `[C', C']`, both bias-free.
pub fn sep_conv_specs(prefix: &str, c: usize, k: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(join(prefix, "dw"), &[c, k], Init::Uniform(fan_in_bound(k))),
        ParamSpec::new(join(prefix, "pw"), &[c, c], Init::Uniform(fan_in_bound(c))),
    ]
}

/// Bias-free separable conv parameter count, `C'k + C'^2`.
pub fn sep_conv_param_count(c: usize, k: usize) -> usize {
    c * k + c * c
}

/// Bias-free standard conv parameter count, `C'^2 k`.
pub fn standard_conv_param_count(c: usize, k: usize) -> usize {
    c * c * k
}

/// Depthwise (per-channel, centered) filtering followed by pointwise
/// channel mixing.
pub fn sep_conv1d<'t, T: Scalar>(x: Var<'t, T>, dw: Var<'t, T>, pw: Var<'t, T>) -> Result<Var<'t, T>> {
    x.depthwise_conv1d(dw)?.linear(pw, None)
}

pub fn param_specs(prefix: &str, cfg: &DmsConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let (c, d) = (cfg.channels, cfg.branch_width());
    let mut v = nn::linear_specs(&join(prefix, "proj_ssm"), c, d, true);
    v.extend(nn::linear_specs(&join(prefix, "proj_conv"), c, d, true));
    v.extend(sep_conv_specs(&join(prefix, "sep"), d, cfg.dw_kernel));
    v.push(ParamSpec::new(
        join(prefix, "conv.weight"),
        &[cfg.conv_kernel, d, d],
        Init::Uniform(fan_in_bound(cfg.conv_kernel * d)),
    ));
    v.push(ParamSpec::new(join(prefix, "conv.bias"), &[d], Init::Zeros));
    v.extend(scan::ssm_specs(&join(prefix, "ssm_fwd"), cfg.ssm_shape()));
    v.extend(scan::ssm_specs(&join(prefix, "ssm_bwd"), cfg.ssm_shape()));
    v.extend(nn::linear_specs(&join(prefix, "out"), c, c, true));
    Ok(v)
}

pub fn param_count(cfg: &DmsConfig) -> Result<usize> {
    Ok(crate::params::count(&param_specs("", cfg)?))
}

/// The two branch outputs before fusion, each `[B, L, C/2]`.
pub fn branches<'t, T: Scalar>(
    ctx: &Ctx<'t, T>,
    prefix: &str,
    cfg: &DmsConfig,
    x: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let shape = x.shape();
    if shape.len() != 3 || shape[2] != cfg.channels {
        return Err(Error::shape(
            "dms",
            format!("expected [B, L, {}] input, got {shape:?}", cfg.channels),
        ));
    }
    let p = |n: &str| ctx.param(&join(prefix, n));

    let x1 = nn::linear(ctx, &join(prefix, "proj_ssm"), x)?;
    let x1 = sep_conv1d(x1, p("sep.dw")?, p("sep.pw")?)?.silu();
    let fwd = SsmParams::bind(ctx, &join(prefix, "ssm_fwd"))?;
    let bwd = SsmParams::bind(ctx, &join(prefix, "ssm_bwd"))?;
    let x1 = scan::scan_bidirectional(&fwd, &bwd, x1)?;

    let x2 = nn::linear(ctx, &join(prefix, "proj_conv"), x)?;
    let x2 = x2.conv1d(p("conv.weight")?)?.add_channel(p("conv.bias")?)?.silu();
    Ok((x1, x2))
}

/// DMS block over a token sequence `[B, L, C]`; shape is preserved.
pub fn forward<'t, T: Scalar>(
    ctx: &Ctx<'t, T>,
    prefix: &str,
    cfg: &DmsConfig,
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (x1, x2) = branches(ctx, prefix, cfg, x)?;
    nn::linear(ctx, &join(prefix, "out"), x1.concat(x2)?)
}

/// Parameter layout of a stock Mamba block at width `C` with a
/// `C -> 2C` input projection (split into scan input and gate), a causal
/// depthwise conv, the `x_proj` / `dt_proj` SSM projections, per-channel
/// `A` and `D`, and a `C -> C` output projection. Only used as a
/// parameter-count reference.
pub fn vanilla_mamba_specs(channels: usize, state_dim: usize, conv_kernel: usize) -> Vec<ParamSpec> {
    let (c, n) = (channels, state_dim);
    let r = default_dt_rank(c);
    let u = |fan: usize| Init::Uniform(fan_in_bound(fan));
    vec![
        ParamSpec::new("in_proj.weight", &[c, 2 * c], u(c)),
        ParamSpec::new("conv1d.weight", &[c, conv_kernel], u(conv_kernel)),
        ParamSpec::new("conv1d.bias", &[c], Init::Zeros),
        ParamSpec::new("x_proj.weight", &[c, r + 2 * n], u(c)),
        ParamSpec::new("dt_proj.weight", &[r, c], u(r)),
        ParamSpec::new("dt_proj.bias", &[c], Init::Zeros),
        ParamSpec::new("a_log", &[c, n], Init::Zeros),
        ParamSpec::new("d", &[c], Init::Ones),
        ParamSpec::new("out_proj.weight", &[c, c], u(c)),
    ]
}

pub fn vanilla_mamba_param_count(channels: usize, state_dim: usize) -> usize {
    crate::params::count(&vanilla_mamba_specs(channels, state_dim, 4))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::{Mode, ParamStore};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &DmsConfig, seed: u64) -> ParamStore<f64> {
        ParamStore::init(&param_specs("dms", cfg).unwrap(), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn config_validation() {
        assert!(DmsConfig::new(5, 4).validate().is_err());
        let mut c = DmsConfig::new(8, 4);
        c.dw_kernel = 4;
        assert!(c.validate().is_err());
        assert!(DmsConfig::new(8, 4).validate().is_ok());
    }

    #[test]
    fn shape_is_preserved() {
        let cfg = DmsConfig::new(96, 16);
        let params = setup(&cfg, 1).cast::<f32>();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &params, ParamStore::new(), Mode::Eval, false);
        let x = tape.constant(Tensor::from_fn(&[1, 49, 96], |i| ((i % 17) as f32 - 8.0) / 8.0));
        let y = forward(&ctx, "dms", &cfg, x).unwrap();
        assert_eq!(y.shape(), vec![1, 49, 96]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_output() {
        let cfg = DmsConfig::new(8, 4);
        let mut params = setup(&cfg, 2);
        for (name, t) in params.iter_mut() {
            if name.ends_with(".bias") && !name.contains("dt_bias") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &params, ParamStore::new(), Mode::Eval, false);
        let x = tape.constant(Tensor::zeros(&[2, 6, 8]));
        let y = forward(&ctx, "dms", &cfg, x).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_width_is_a_shape_error() {
        let cfg = DmsConfig::new(8, 4);
        let params = setup(&cfg, 3);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &params, ParamStore::new(), Mode::Eval, false);
        let x = tape.constant(Tensor::zeros(&[1, 6, 6]));
        assert!(matches!(forward(&ctx, "dms", &cfg, x), Err(Error::Shape { .. })));
    }

    #[test]
    fn param_count_is_independent_of_width_squared_scaling() {
        let small = param_count(&DmsConfig::new(64, 16)).unwrap() as f64;
        let big = param_count(&DmsConfig::new(128, 16)).unwrap() as f64;
        let ratio = big / small;
        assert!((3.5..4.0).contains(&ratio), "{ratio}");
    }
}
