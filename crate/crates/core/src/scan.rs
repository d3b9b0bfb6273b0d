//! Selective state-space scan.
//!
//! For every channel `d` the scan carries an `N`-dim state:
//!
//! ```text
//! abar_t = exp(-delta_t[d] * A)          (zero-order hold)
//! bbar_t = delta_t[d] * B_t
//! h_t    = abar_t * h_{t-1} + bbar_t * x_t[d],   h_0 = 0
//! y_t[d] = <C_t, h_t>
//! ```
//!
//! `A` is diagonal and stored as `exp(log_a)`; `delta`, `B` and `C` are
//! projected from the input sequence, which is what makes the scan
//! selective. The recurrence is a fused [`CustomOp`] so the tape holds one
//! node per scan rather than one per timestep.

use crate::autodiff::{CustomOp, Var};
use crate::error::{Error, Result};
use crate::params::{fan_in_bound, join, Ctx, Init, ParamSpec};
use crate::tensor::{Scalar, Tensor};

/// Shapes of one directional set of scan parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsmShape {
    /// Channels scanned (each with its own state).
    pub channels: usize,
    /// State size `N`.
    pub state: usize,
    /// Rank of the low-rank step-size projection.
    pub dt_rank: usize,
}

impl SsmShape {
    pub fn new(channels: usize, state: usize) -> Self {
        SsmShape {
            channels,
            state,
            dt_rank: default_dt_rank(channels),
        }
    }
}

/// `ceil(channels / 16)`, at least 1.
pub fn default_dt_rank(channels: usize) -> usize {
    channels.div_ceil(16).max(1)
}

/// Parameter layout for one scan direction under `prefix`:
/// `dt_down [D,R]`, `dt_up [R,D]`, `dt_bias [D]`, `b_proj.{weight,bias}`,
/// `c_proj.{weight,bias}`, `log_a [N]`.
pub fn ssm_specs(prefix: &str, s: SsmShape) -> Vec<ParamSpec> {
    let (d, n, r) = (s.channels, s.state, s.dt_rank);
    vec![
        ParamSpec::new(join(prefix, "dt_down"), &[d, r], Init::Uniform(fan_in_bound(d))),
        ParamSpec::new(join(prefix, "dt_up"), &[r, d], Init::Uniform(fan_in_bound(r))),
        ParamSpec::new(
            join(prefix, "dt_bias"),
            &[d],
            Init::InvSoftplus {
                min: 1e-3,
                max: 1e-1,
            },
        ),
        ParamSpec::new(join(prefix, "b_proj.weight"), &[d, n], Init::Uniform(fan_in_bound(d))),
        ParamSpec::new(join(prefix, "b_proj.bias"), &[n], Init::Zeros),
        ParamSpec::new(join(prefix, "c_proj.weight"), &[d, n], Init::Uniform(fan_in_bound(d))),
        ParamSpec::new(join(prefix, "c_proj.bias"), &[n], Init::Zeros),
        ParamSpec::new(join(prefix, "log_a"), &[n], Init::LogRange),
    ]
}

/// One direction's scan parameters bound onto a tape.
#[derive(Clone, Copy, Debug)]
pub struct SsmParams<'t, T: Scalar> {
    pub dt_down: Var<'t, T>,
    pub dt_up: Var<'t, T>,
    pub dt_bias: Var<'t, T>,
    pub w_b: Var<'t, T>,
    pub b_b: Var<'t, T>,
    pub w_c: Var<'t, T>,
    pub b_c: Var<'t, T>,
    pub log_a: Var<'t, T>,
}

impl<'t, T: Scalar> SsmParams<'t, T> {
    pub fn bind(ctx: &Ctx<'t, T>, prefix: &str) -> Result<Self> {
        let p = |n: &str| ctx.param(&join(prefix, n));
        Ok(SsmParams {
            dt_down: p("dt_down")?,
            dt_up: p("dt_up")?,
            dt_bias: p("dt_bias")?,
            w_b: p("b_proj.weight")?,
            b_b: p("b_proj.bias")?,
            w_c: p("c_proj.weight")?,
            b_c: p("c_proj.bias")?,
            log_a: p("log_a")?,
        })
    }

    /// Per-token step sizes `softplus(x W_down W_up + bias)`.
    pub fn delta(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(x
            .linear(self.dt_down, None)?
            .linear(self.dt_up, Some(self.dt_bias))?
            .softplus())
    }
}

#[inline]
fn zoh<T: Scalar>(delta: T, a: T, b: T) -> (T, T) {
    ((-delta * a).exp(), delta * b)
}

/// Zero-order-hold discretization of one token: returns
/// `(exp(-delta * a), delta * b)` elementwise over the state.
pub fn discretize<T: Scalar>(a: &[T], b: &[T], delta: T) -> Result<(Vec<T>, Vec<T>)> {
    if !(delta > T::zero()) || !delta.is_finite() {
        return Err(Error::Invalid(format!(
            "step size must be positive and finite, got {delta}"
        )));
    }
    if a.len() != b.len() {
        return Err(Error::shape(
            "discretize",
            format!("A has {} entries but B has {}", a.len(), b.len()),
        ));
    }
    Ok(a.iter().zip(b).map(|(&a, &b)| zoh(delta, a, b)).unzip())
}

#[derive(Debug)]
struct SelectiveScanOp<T> {
    /// Hidden states `h_t` for every `[b, t, d, n]`.
    states: Vec<T>,
    dims: [usize; 4],
}

/// Runs the recurrence on raw tensors: `x, delta: [B, L, D]`, `a: [N]`,
/// `b, c: [B, L, N]`. Returns `y: [B, L, D]` and all hidden states.
fn scan_forward<T: Scalar>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
) -> (Tensor<T>, Vec<T>) {
    let [bs, l, d] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let n = a.numel();
    let (xd, dd, ad, bd, cd) = (x.data(), delta.data(), a.data(), b.data(), c.data());
    let mut y = vec![T::zero(); bs * l * d];
    let mut states = vec![T::zero(); bs * l * d * n];
    let mut h = vec![T::zero(); d * n];
    for bi in 0..bs {
        h.iter_mut().for_each(|v| *v = T::zero());
        for t in 0..l {
            let row = bi * l + t;
            let (bt, ct) = (&bd[row * n..(row + 1) * n], &cd[row * n..(row + 1) * n]);
            for ch in 0..d {
                let dt = dd[row * d + ch];
                let xv = xd[row * d + ch];
                let hs = &mut h[ch * n..(ch + 1) * n];
                let mut acc = T::zero();
                for k in 0..n {
                    let (abar, bbar) = zoh(dt, ad[k], bt[k]);
                    hs[k] = abar * hs[k] + bbar * xv;
                    acc += ct[k] * hs[k];
                }
                y[row * d + ch] = acc;
                states[(row * d + ch) * n..(row * d + ch + 1) * n].copy_from_slice(hs);
            }
        }
    }
    (Tensor::from_parts(vec![bs, l, d], y), states)
}

impl<T: Scalar> CustomOp<T> for SelectiveScanOp<T> {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>> {
        let [x, delta, a, b, c] = inputs else {
            return Err(Error::Tape("selective_scan expects 5 inputs".into()));
        };
        let [bs, l, d, n] = self.dims;
        let (xd, dd, ad, bd, cd) = (x.data(), delta.data(), a.data(), b.data(), c.data());
        let gy = grad_output.data();
        let hs = &self.states;
        let mut gx = vec![T::zero(); x.numel()];
        let mut gdelta = vec![T::zero(); delta.numel()];
        let mut ga = vec![T::zero(); n];
        let mut gb = vec![T::zero(); b.numel()];
        let mut gc = vec![T::zero(); c.numel()];
        let mut carry = vec![T::zero(); d * n];
        for bi in 0..bs {
            carry.iter_mut().for_each(|v| *v = T::zero());
            for t in (0..l).rev() {
                let row = bi * l + t;
                for ch in 0..d {
                    let i = row * d + ch;
                    let (dt, xv, g) = (dd[i], xd[i], gy[i]);
                    let h_now = &hs[i * n..(i + 1) * n];
                    let mut gx_acc = T::zero();
                    let mut gdt_acc = T::zero();
                    for k in 0..n {
                        let h_prev = if t == 0 { T::zero() } else { hs[(i - d) * n + k] };
                        let (abar, bbar) = zoh(dt, ad[k], bd[row * n + k]);
                        gc[row * n + k] += g * h_now[k];
                        let dh = carry[ch * n + k] + cd[row * n + k] * g;
                        gx_acc += dh * bbar;
                        gb[row * n + k] += dh * dt * xv;
                        let decay = abar * h_prev;
                        gdt_acc += dh * (bd[row * n + k] * xv - ad[k] * decay);
                        ga[k] -= dh * dt * decay;
                        carry[ch * n + k] = dh * abar;
                    }
                    gx[i] += gx_acc;
                    gdelta[i] += gdt_acc;
                }
            }
        }
        Ok(vec![
            Tensor::from_parts(x.shape().to_vec(), gx),
            Tensor::from_parts(delta.shape().to_vec(), gdelta),
            Tensor::from_parts(a.shape().to_vec(), ga),
            Tensor::from_parts(b.shape().to_vec(), gb),
            Tensor::from_parts(c.shape().to_vec(), gc),
        ])
    }
}

/// Differentiable fused scan over `x, delta: [B, L, D]`, `a: [N]`,
/// `b, c: [B, L, N]`.
pub fn selective_scan<'t, T: Scalar>(
    x: Var<'t, T>,
    delta: Var<'t, T>,
    a: Var<'t, T>,
    b: Var<'t, T>,
    c: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (y, states, dims) = {
        let (xv, dv, av, bv, cv) = (x.value(), delta.value(), a.value(), b.value(), c.value());
        let [bs, l, d] = match *xv.shape() {
            [bs, l, d] => [bs, l, d],
            ref s => return Err(Error::shape("selective_scan", format!("x must be [B, L, D], got {s:?}"))),
        };
        let n = match *av.shape() {
            [n] => n,
            ref s => return Err(Error::shape("selective_scan", format!("A must be [N], got {s:?}"))),
        };
        if dv.shape() != xv.shape() {
            return Err(Error::shape(
                "selective_scan",
                format!("delta {:?} does not match x {:?}", dv.shape(), xv.shape()),
            ));
        }
        for (name, t) in [("B", &bv), ("C", &cv)] {
            if t.shape() != [bs, l, n] {
                return Err(Error::shape(
                    "selective_scan",
                    format!("{name} is {:?}, expected {:?}", t.shape(), [bs, l, n]),
                ));
            }
        }
        if let Some(bad) = dv.data().iter().find(|&&v| !(v > T::zero()) || !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "selective_scan: step size must be positive and finite, got {bad}"
            )));
        }
        let (y, states) = scan_forward(&xv, &dv, &av, &bv, &cv);
        (y, states, [bs, l, d, n])
    };
    x.tape()
        .custom(&[x, delta, a, b, c], y, Box::new(SelectiveScanOp { states, dims }))
}

/// Unidirectional selective scan of `x: [B, L, D]`: projects step sizes,
/// `B_t` and `C_t` from `x` and runs the recurrence left to right.
pub fn scan_sequential<'t, T: Scalar>(p: &SsmParams<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let delta = p.delta(x)?;
    let b = x.linear(p.w_b, Some(p.b_b))?;
    let c = x.linear(p.w_c, Some(p.b_c))?;
    let a = p.log_a.exp();
    selective_scan(x, delta, a, b, c)
}

/// Sum of a forward scan and a scan over the reversed sequence (with its
/// own parameters), re-reversed to align positions.
pub fn scan_bidirectional<'t, T: Scalar>(
    fwd: &SsmParams<'t, T>,
    bwd: &SsmParams<'t, T>,
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let forward = scan_sequential(fwd, x)?;
    let backward = scan_sequential(bwd, x.flip(1)?)?.flip(1)?;
    forward.add(backward)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn discretize_identity_and_half() {
        let (abar, bbar) = discretize(&[0.0f64, 0.0], &[2.0, 3.0], 0.5).unwrap();
        assert_eq!(abar, vec![1.0, 1.0]);
        assert_eq!(bbar, vec![1.0, 1.5]);
        let (abar, _) = discretize(&[1.0f64], &[1.0], std::f64::consts::LN_2).unwrap();
        assert!((abar[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn discretize_rejects_non_positive_step() {
        assert!(discretize(&[1.0f64], &[1.0], 0.0).is_err());
        assert!(discretize(&[1.0f64], &[1.0], -0.1).is_err());
        assert!(discretize(&[1.0f64], &[1.0], f64::NAN).is_err());
    }

    #[test]
    fn single_step_scan() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 1, 1], &[2.0]).unwrap());
        let dt = tape.constant(Tensor::from_f64(&[1, 1, 1], &[0.5]).unwrap());
        let a = tape.constant(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::from_f64(&[1, 1, 2], &[1.0, -1.0]).unwrap());
        let c = tape.constant(Tensor::from_f64(&[1, 1, 2], &[3.0, 4.0]).unwrap());
        let y = selective_scan(x, dt, a, b, c).unwrap();
        // C . (dt * B * x) = 3 * 1 + 4 * (-1) = -1
        assert!((y.value().item() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_decay_scan_is_cumulative_sum() {
        let tape = Tape::<f64>::new();
        let l = 6;
        let xs: Vec<f64> = (0..l).map(|i| i as f64 - 2.5).collect();
        let x = tape.constant(Tensor::from_f64(&[1, l, 1], &xs).unwrap());
        let dt = tape.constant(Tensor::full(&[1, l, 1], 0.25));
        let a = tape.constant(Tensor::zeros(&[3]));
        let b = tape.constant(Tensor::full(&[1, l, 3], 2.0));
        let c = tape.constant(Tensor::full(&[1, l, 3], 0.5));
        let y = selective_scan(x, dt, a, b, c).unwrap();
        let mut run = 0.0;
        for (t, &v) in y.value().data().iter().enumerate() {
            run += xs[t];
            // 3 states * C * dt * B * cumsum
            assert!((v - 3.0 * 0.5 * 0.25 * 2.0 * run).abs() < 1e-12);
        }
    }

    #[test]
    fn non_positive_step_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 1]));
        let dt = tape.constant(Tensor::from_f64(&[1, 2, 1], &[0.1, 0.0]).unwrap());
        let a = tape.constant(Tensor::ones(&[1]));
        let b = tape.constant(Tensor::ones(&[1, 2, 1]));
        assert!(selective_scan(x, dt, a, b, b).is_err());
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, 5, 3]));
        let dt = tape.constant(Tensor::full(&[2, 5, 3], 0.3));
        let a = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::full(&[2, 5, 4], 0.7));
        let y = selective_scan(x, dt, a, b, b).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }
}
