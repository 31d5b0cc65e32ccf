//! Central-difference verification of the tape's backward rules.

use super::tape::{Tape, TensorId};
use super::Tensor;
use crate::error::{Error, Result};

/// Default probe step for 32-bit data.
pub const GRAD_CHECK_EPS: f32 = 1e-3;

/// Compares the tape gradient of a scalar function against central finite
/// differences, coordinate by coordinate. Returns the max relative error,
/// with `max(|analytic|, |numeric|, 1e-8)` in the denominator.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f32) -> Result<f32>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    if eps <= 0.0 {
        return Err(Error::Contract("grad_check eps must be positive".into()));
    }
    // analytic gradient
    let mut tape = Tape::new();
    let xid = tape.leaf(x);
    let out = f(&mut tape, xid).map_err(|e| Error::Eval(e.to_string()))?;
    if tape.numel(out) != 1 {
        return Err(Error::Contract("grad_check needs a scalar function".into()));
    }
    tape.backward(out)?;
    let analytic: Vec<f32> = tape
        .grad(xid)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut t = Tape::inference();
        let id = t.leaf(probe);
        let o = f(&mut t, id).map_err(|e| Error::Eval(e.to_string()))?;
        let v = t.scalar_value(o);
        if !v.is_finite() {
            return Err(Error::Eval("non-finite probe value".into()));
        }
        Ok(v)
    };

    let mut worst = 0.0f32;
    let mut data = x.data().to_vec();
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + eps;
        let hi = eval(&Tensor::from_vec(x.shape(), data.clone())?)?;
        data[i] = orig - eps;
        let lo = eval(&Tensor::from_vec(x.shape(), data.clone())?)?;
        data[i] = orig;
        let numeric = ((hi - lo) / (2.0 * eps as f64)) as f32;
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

/// [`grad_check`] at the default 32-bit step.
pub fn grad_check_default<F>(f: F, x: &Tensor) -> Result<f32>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    grad_check(f, x, GRAD_CHECK_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact_up_to_rounding() {
        let x = Tensor::from_vec(&[4], vec![0.3, -1.2, 0.7, 2.0]).unwrap();
        let err = grad_check_default(|t, x| t.sum_all(x), &x).unwrap();
        assert!(err < 1e-4, "linear fd error {err}");
    }

    #[test]
    fn quadratic_matches_analytic_gradient() {
        // loss = sum(x^2): grad 2x; at [1,2] the gradient is [2,4]
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let xid = tape.leaf(&x);
        let sq = tape.mul(xid, xid).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(xid).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-6 && (g[1] - 4.0).abs() < 1e-6);

        let err = grad_check_default(
            |t, x| {
                let sq = t.mul(x, x)?;
                t.sum_all(sq)
            },
            &x,
        )
        .unwrap();
        assert!(err <= 1e-4, "quadratic fd error {err}");
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let x = Tensor::zeros(&[2]);
        assert!(grad_check(|t, x| t.sum_all(x), &x, 0.0).is_err());
    }
}
