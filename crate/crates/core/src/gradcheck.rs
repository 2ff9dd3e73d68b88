//! Central finite-difference oracle for tape gradients.

use crate::error::TensorError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// `f` receives a fresh tape and the leaf holding `x` and returns the scalar
/// root. The result is the largest per-coordinate
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`. `x` is never
/// mutated; perturbed copies are evaluated on their own tapes.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, TensorError>,
{
    if !(eps > 0.0) {
        return Err(TensorError::InvalidArgument { op: "finite_diff_check", msg: format!("eps must be positive, got {eps}") });
    }
    let mut tape = Tape::new();
    let leaf = tape.param(x.clone());
    let root = f(&mut tape, leaf)?;
    let value = tape.value(root).item();
    if !value.is_finite() {
        return Err(TensorError::NonFinite { op: "finite_diff_check" });
    }
    let grads = tape.backward(root)?;
    let analytic = grads.get(leaf).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor<f64>| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let leaf = tape.constant(probe);
        let root = f(&mut tape, leaf)?;
        let v = tape.value(root).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TensorError::NonFinite { op: "finite_diff_check" })
        }
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let err = finite_diff_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                t.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_vec(vec![0.3, -0.7]);
        let err = finite_diff_check(
            |t, x| {
                let z = t.scale(x, 0.0)?;
                let c = t.constant(Tensor::scalar(4.0));
                let s = t.sum(z)?;
                t.add(s, c)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn input_is_not_mutated() {
        let x = Tensor::from_vec(vec![0.5, 1.5]);
        let before = x.clone();
        finite_diff_check(|t, x| t.sum(x), &x, 1e-3).unwrap();
        assert_eq!(x, before);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::from_vec(vec![0.0, 1.0]);
        assert!(finite_diff_check(|t, x| { let l = t.log(x)?; t.sum(l) }, &x, 1e-5).is_err());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu(x) at a kink with a step wider than the distance to it.
        let x = Tensor::from_vec(vec![1e-6]);
        let err = finite_diff_check(|t, x| { let r = t.relu(x)?; t.sum(r) }, &x, 1e-3).unwrap();
        assert!(err > 0.1);
    }
}
