//! Parameterized layers shared by the blocks.

use crate::autodiff::{NormStats, Var};
use crate::error::Result;
use crate::params::{fan_in_bound, join, Ctx, Init, ParamSpec};
use crate::tensor::{Scalar, Tensor};

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

pub fn linear_specs(prefix: &str, d_in: usize, d_out: usize, bias: bool) -> Vec<ParamSpec> {
    let mut v = vec![ParamSpec::new(
        join(prefix, "weight"),
        &[d_in, d_out],
        Init::Uniform(fan_in_bound(d_in)),
    )];
    if bias {
        v.push(ParamSpec::new(join(prefix, "bias"), &[d_out], Init::Zeros));
    }
    v
}

pub fn linear<'t, T: Scalar>(ctx: &Ctx<'t, T>, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let w = ctx.param(&join(prefix, "weight"))?;
    let b = ctx.param(&join(prefix, "bias")).ok();
    x.linear(w, b)
}

pub fn layer_norm_specs(prefix: &str, c: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(join(prefix, "weight"), &[c], Init::Ones),
        ParamSpec::new(join(prefix, "bias"), &[c], Init::Zeros),
    ]
}

pub fn layer_norm<'t, T: Scalar>(ctx: &Ctx<'t, T>, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    x.layer_norm(
        ctx.param(&join(prefix, "weight"))?,
        ctx.param(&join(prefix, "bias"))?,
    )
}

pub fn batch_norm_specs(prefix: &str, c: usize) -> Vec<ParamSpec> {
    layer_norm_specs(prefix, c)
}

/// Running statistics; these are state, not parameters.
pub fn batch_norm_buffers(prefix: &str, c: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(join(prefix, "running_mean"), &[c], Init::Zeros),
        ParamSpec::new(join(prefix, "running_var"), &[c], Init::Ones),
    ]
}

pub fn batch_norm<'t, T: Scalar>(ctx: &Ctx<'t, T>, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let gamma = ctx.param(&join(prefix, "weight"))?;
    let beta = ctx.param(&join(prefix, "bias"))?;
    let (mean_name, var_name) = (join(prefix, "running_mean"), join(prefix, "running_var"));
    if !ctx.is_train() {
        let mean = ctx.buffer(&mean_name)?.into_data();
        let var = ctx.buffer(&var_name)?.into_data();
        return Ok(x.batch_norm(gamma, beta, NormStats::Running { mean, var })?.0);
    }
    let (y, stats) = x.batch_norm(gamma, beta, NormStats::Batch)?;
    let (mean, var) = stats.expect("batch statistics");
    let shape = x.shape();
    let m = shape.iter().product::<usize>() / shape.last().copied().unwrap_or(1);
    let unbias = if m > 1 { m as f64 / (m as f64 - 1.0) } else { 1.0 };
    let mom = T::from_f64_lossy(BN_MOMENTUM);
    let keep = T::one() - mom;
    let unbias = T::from_f64_lossy(unbias);
    let rm = ctx.buffer(&mean_name)?;
    let rv = ctx.buffer(&var_name)?;
    let c = mean.len();
    let new_mean = Tensor::from_fn(&[c], |i| keep * rm.data()[i] + mom * mean[i]);
    let new_var = Tensor::from_fn(&[c], |i| keep * rv.data()[i] + mom * var[i] * unbias);
    ctx.set_buffer(&mean_name, new_mean)?;
    ctx.set_buffer(&var_name, new_var)?;
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::{Mode, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batch_norm_updates_running_stats_in_train_mode() {
        let specs = batch_norm_specs("bn", 2);
        let params = ParamStore::<f64>::init(&specs, &mut ChaCha8Rng::seed_from_u64(0));
        let buffers = ParamStore::init(&batch_norm_buffers("bn", 2), &mut ChaCha8Rng::seed_from_u64(0));
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &params, buffers, Mode::Train, false);
        // channel 0: 1, 3 -> mean 2, unbiased var 2; channel 1: constant 5
        let x = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 5.0, 3.0, 5.0]).unwrap());
        batch_norm(&ctx, "bn", x).unwrap();
        let buf = ctx.into_buffers();
        let rm = buf.get("bn.running_mean").unwrap().data().to_vec();
        let rv = buf.get("bn.running_var").unwrap().data().to_vec();
        assert!((rm[0] - 0.2).abs() < 1e-12 && (rm[1] - 0.5).abs() < 1e-12);
        assert!((rv[0] - (0.9 + 0.2)).abs() < 1e-12 && (rv[1] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_leaves_buffers_alone() {
        let params = ParamStore::<f64>::init(&batch_norm_specs("bn", 3), &mut ChaCha8Rng::seed_from_u64(0));
        let buffers = ParamStore::init(&batch_norm_buffers("bn", 3), &mut ChaCha8Rng::seed_from_u64(0));
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &params, buffers.clone(), Mode::Eval, false);
        let x = tape.constant(Tensor::from_fn(&[4, 3], |i| i as f64));
        let y = batch_norm(&ctx, "bn", x).unwrap();
        // running mean 0, var 1: output is x / sqrt(1 + eps)
        let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!(y.value().data().iter().enumerate().all(|(i, &v)| (v - i as f64 * scale).abs() < 1e-12));
        assert_eq!(ctx.into_buffers(), buffers);
    }
}
