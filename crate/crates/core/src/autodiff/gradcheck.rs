//! Central finite differences against the tape's analytic gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Both error figures of one finite-difference comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdError {
    /// `max_i |a_i - fd_i| / max(|a_i|, |fd_i|, 1e-8)`.
    pub elementwise: f64,
    /// `max_i |a_i - fd_i| / max(|a|_inf, |fd|_inf)`, or the absolute
    /// error when both gradients vanish.
    pub normwise: f64,
}

/// Largest per-element relative error between the analytic and
/// central-difference gradients of `f` at `input`; see [`FdError`].
///
/// `f` must build a 0-d output from its argument using tape primitives;
/// it is re-run twice per input element.
pub fn finite_diff_check<F>(f: F, input: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    Ok(finite_diff_errors(f, input, eps)?.elementwise)
}

pub fn finite_diff_errors<F>(f: F, input: &Tensor<f64>, eps: f64) -> Result<FdError>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let analytic = analytic_grad(&f, input)?;
    let (mut rel, mut worst, mut scale) = (0.0f64, 0.0f64, 0.0f64);
    let mut probe = input.clone();
    for i in 0..input.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        let diff = (a - fd).abs();
        rel = rel.max(diff / a.abs().max(fd.abs()).max(1e-8));
        worst = worst.max(diff);
        scale = scale.max(a.abs()).max(fd.abs());
    }
    Ok(FdError {
        elementwise: rel,
        normwise: if scale > 0.0 { worst / scale } else { worst },
    })
}

/// Gradient of `f` at `input` via one backward sweep.
pub fn analytic_grad<F>(f: &F, input: &Tensor<f64>) -> Result<Tensor<f64>>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let x = tape.param(input.clone());
    let out = f(&tape, x)?;
    require_scalar(out)?;
    let grads = tape.backward(out)?;
    Ok(grads.get_or_zeros(x))
}

fn eval<F>(f: &F, input: &Tensor<f64>) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let x = tape.constant(input.clone());
    let out = f(&tape, x)?;
    require_scalar(out)?;
    let v = out.value().item();
    Ok(v)
}

fn require_scalar(out: Var<'_, f64>) -> Result<()> {
    let shape = out.shape();
    if shape.is_empty() {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "finite-difference check needs a scalar-valued function, got shape {shape:?}"
        )))
    }
}
