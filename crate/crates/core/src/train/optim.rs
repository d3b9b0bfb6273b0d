//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First/second moments shaped like the parameters, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T: Scalar> {
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: ParamStore<T> = {
            let mut z = ParamStore::new();
            for (k, t) in params.iter() {
                z.insert(k.clone(), Tensor::zeros(t.shape()));
            }
            z
        };
        OptimState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Weight decay applies to matrices and kernels only; vectors (biases,
/// norm affines, `A` logs, mask tokens) are left alone.
pub fn decays(t_shape: &[usize]) -> bool {
    t_shape.len() >= 2
}

/// Global L2 norm over all gradients.
pub fn global_norm<T: Scalar>(grads: &ParamStore<T>) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data().iter().map(|v| v.to_f64_lossy().powi(2)))
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients in place so their global norm is at most `max_norm`.
pub fn clip_grad_norm<T: Scalar>(grads: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

impl AdamW {
    /// One update of every parameter that has a gradient.
    ///
    /// ```text
    /// p <- p - lr * wd * p            (matrices only)
    /// m <- b1 m + (1 - b1) g,   v <- b2 v + (1 - b2) g^2
    /// p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
    /// ```
    ///
    /// A non-finite gradient aborts before anything is modified.
    pub fn step<T: Scalar>(
        &self,
        params: &mut ParamStore<T>,
        grads: &ParamStore<T>,
        state: &mut OptimState<T>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads.iter() {
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}` at step {}", state.step + 1)));
            }
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adamw",
                    format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let f = T::from_f64_lossy;
        let (b1, b2) = (f(self.beta1), f(self.beta2));
        let c1 = f(1.0 - self.beta1.powi(t));
        let c2 = f(1.0 - self.beta2.powi(t));
        let (lr_t, eps) = (f(lr), f(self.eps));
        let decay = f(lr * self.weight_decay);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name)?;
            let wd = decays(p.shape());
            let m = state.m.get_mut(name)?.data_mut();
            let v = state.v.get_mut(name)?.data_mut();
            for (i, (pi, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                if wd {
                    *pi -= decay * *pi;
                }
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                *pi -= lr_t * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f64, g: f64) -> (ParamStore<f64>, ParamStore<f64>) {
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::full(&[1, 1], p));
        let mut gs = ParamStore::new();
        gs.insert("w", Tensor::full(&[1, 1], g));
        (ps, gs)
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let (mut p, g) = single(0.5, 0.2);
        let mut st = OptimState::new(&p);
        let opt = AdamW { weight_decay: 0.1, ..AdamW::default() };
        opt.step(&mut p, &g, &mut st, 0.01).unwrap();
        // decay: 0.5 - 0.01*0.1*0.5 = 0.4995; m_hat = 0.2, v_hat = 0.04
        let expect = 0.4995 - 0.01 * 0.2 / (0.2 + 1e-8);
        assert!((p.get("w").unwrap().item() - expect).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_aborts_untouched() {
        let (mut p, g) = single(0.5, f64::NAN);
        let before = p.clone();
        let mut st = OptimState::new(&p);
        assert!(matches!(
            AdamW::default().step(&mut p, &g, &mut st, 0.1),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(p, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clipping_caps_norm() {
        let (_, mut g) = single(0.0, 30.0);
        assert_eq!(clip_grad_norm(&mut g, 5.0), 30.0);
        assert!((global_norm(&g) - 5.0).abs() < 1e-12);
    }
}
