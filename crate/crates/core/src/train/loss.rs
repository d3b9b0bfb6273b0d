//! Classification and regression losses.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `[B, K]` one-hot rows.
pub fn one_hot<T: Scalar>(labels: &[usize], k: usize) -> Result<Tensor<T>> {
    if labels.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Invalid(format!("label {bad} out of range for {k} classes")));
    }
    Ok(Tensor::from_fn(&[labels.len(), k], |i| {
        if labels[i / k] == i % k {
            T::one()
        } else {
            T::zero()
        }
    }))
}

/// `-mean_b sum_k t[b,k] * log_softmax(logits)[b,k]`; soft targets allowed.
pub fn cross_entropy<'t, T: Scalar>(logits: Var<'t, T>, targets: &Tensor<T>) -> Result<Var<'t, T>> {
    let s = logits.shape();
    if s.len() != 2 || s.as_slice() != targets.shape() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {s:?} vs targets {:?}", targets.shape()),
        ));
    }
    let t = logits.tape().constant(targets.clone());
    Ok(logits.log_softmax().mul(t)?.sum().scale(-1.0 / s[0] as f64))
}

/// Mean absolute error.
pub fn mae<'t, T: Scalar>(pred: Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
    if pred.shape().as_slice() != target.shape() {
        return Err(Error::shape(
            "mae",
            format!("pred {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    Ok(pred.sub(pred.tape().constant(target.clone()))?.abs().mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn uniform_logits_give_ln_k() {
        let tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[3, 9]));
        let ce = cross_entropy(logits, &one_hot(&[0, 4, 8], 9).unwrap()).unwrap();
        assert!((ce.value().item() - 9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_or_bad_labels() {
        assert!(one_hot::<f32>(&[], 3).is_err());
        assert!(one_hot::<f32>(&[3], 3).is_err());
    }

    #[test]
    fn mae_zero_at_target() {
        let tape = Tape::<f64>::new();
        let t = Tensor::from_f64(&[2, 1], &[1.5, -2.0]).unwrap();
        assert_eq!(mae(tape.constant(t.clone()), &t).unwrap().value().item(), 0.0);
    }
}
