//! Finite-difference verification of reverse-mode gradients.

use alloc::vec::Vec;

use crate::error::{err_arg, Result};
use crate::tape::{Tape, Val};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar function against central
/// differences at `point`, returning the max over coordinates of
/// |analytic - central| / max(1, |central|).
///
/// `eps` must lie in [1e-6, 1e-3]; the function should be smooth at the
/// point (nudge inputs away from ReLU and hinge kinks).
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, Val) -> Result<Val>,
{
    grad_check_multi(
        |tape, vals| f(tape, vals[0]),
        core::slice::from_ref(point),
        eps,
    )
}

/// Multi-input variant of [`grad_check`]: the function sees one `Val` per
/// point tensor and the error is maximized over every coordinate of every
/// input.
pub fn grad_check_multi<F>(f: F, points: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Val]) -> Result<Val>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(err_arg!("grad_check eps must be in [1e-6, 1e-3], got {eps}"));
    }

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vals: Vec<Val> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vals)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(err_arg!("grad_check function must return a scalar"));
        }
        Ok(v.data()[0])
    };

    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vals: Vec<Val> = points.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vals)?;
        tape.backward(out)?;
        vals.iter()
            .zip(points)
            .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| alloc::vec![0.0; t.numel()]))
            .collect()
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = points.to_vec();
    for (ti, point) in points.iter().enumerate() {
        for i in 0..point.numel() {
            let x = point.data()[i];
            work[ti].data_mut()[i] = x + eps;
            let f_plus = eval(&work)?;
            work[ti].data_mut()[i] = x - eps;
            let f_minus = eval(&work)?;
            work[ti].data_mut()[i] = x;
            let central = (f_plus - f_minus) / (2.0 * eps);
            let err = (analytic[ti][i] - central).abs() / central.abs().max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_nearly_exact() {
        let point = Tensor::from_vec(&[4], alloc::vec![0.3, -1.4, 2.2, 0.9]).unwrap();
        let err = grad_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                Ok(tape.sum(sq))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "quadratic grad_check error {err}");
    }

    #[test]
    fn rejects_out_of_range_eps() {
        let point = Tensor::scalar(1.0);
        assert!(grad_check(|tape, x| Ok(tape.sum(x)), &point, 1e-2).is_err());
    }
}
