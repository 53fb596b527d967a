//! Central finite-difference gradient verification.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Compare the analytic gradient of `f` against central finite differences,
/// elementwise over every input tensor. Returns the worst relative error,
/// where relative error is `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// `f` must build a scalar output on the tape from the given input nodes.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if step <= 0.0 {
        return Err(Error::Argument("grad_check step must be positive".into()));
    }

    let eval = |tensors: &[Tensor]| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.input(t.clone())).collect();
        let out = f(&mut tape, &ids)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::Argument("grad_check needs a scalar function".into()));
        }
        let value = tape.value(out).item();
        tape.backward(out)?;
        let grads = ids.iter().map(|&id| tape.grad(id).to_vec()).collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs)?;

    let mut worst = 0.0f64;
    let mut perturbed: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let orig = input.data()[ei];
            perturbed[ti].data_mut()[ei] = orig + step;
            let (f_plus, _) = eval(&perturbed)?;
            perturbed[ti].data_mut()[ei] = orig - step;
            let (f_minus, _) = eval(&perturbed)?;
            perturbed[ti].data_mut()[ei] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = analytic[ti][ei];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_two_x() {
        let x = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(
            |g, ids| {
                let sq = g.mul(ids[0], ids[0])?;
                g.sum(sq)
            },
            &[x.clone()],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-9, "err {err}");

        // analytic gradient itself is [2, 4, 6]
        let mut tape = Tape::new();
        let id = tape.input(x);
        let sq = tape.mul(id, id).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(id), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn linear_gradient_is_exact_ones() {
        let x = Tensor::from_vec(vec![4], vec![0.3, -1.2, 4.0, 0.0]).unwrap();
        let err = grad_check(|g, ids| g.sum(ids[0]), &[x], 1e-6).unwrap();
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|g, ids| g.sum(ids[0]), &[x], 0.0).is_err());
    }
}
