//! Finite-difference verification of tape gradients.
//!
//! The checker replays a scalar-valued tape program under elementwise central
//! differences and compares against the analytic gradients from
//! [`Tape::backward`](super::Tape::backward). Programs handed to the checker
//! must be deterministic: any dropout masks or other sampled structure must be
//! derived from state fixed inside the closure, so that repeated evaluations
//! differ only through the perturbed parameter.

use super::{Tape, Tensor, TensorError, ValueId};

/// Builds a scalar loss on `tape` from leafed parameter ids.
pub trait LossProgram {
    fn loss(&mut self, tape: &mut Tape, params: &[ValueId]) -> Result<ValueId, TensorError>;
}

impl<F> LossProgram for F
where
    F: FnMut(&mut Tape, &[ValueId]) -> Result<ValueId, TensorError>,
{
    fn loss(&mut self, tape: &mut Tape, params: &[ValueId]) -> Result<ValueId, TensorError> {
        self(tape, params)
    }
}

fn eval_loss(
    program: &mut impl LossProgram,
    params: &[Tensor],
) -> Result<f64, TensorError> {
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = params.iter().map(|p| tape.leaf(p)).collect();
    let loss = program.loss(&mut tape, &ids)?;
    if tape.value(loss).numel() != 1 {
        return Err(TensorError::ShapeMismatch {
            op: "finite_diff_grad_check",
            detail: "loss program must produce a scalar".into(),
        });
    }
    Ok(tape.value(loss).item())
}

/// Compares analytic gradients of `program` against central finite
/// differences at every element of every parameter, returning the maximum
/// relative error `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn finite_diff_grad_check(
    mut program: impl LossProgram,
    params: &[Tensor],
    eps: f64,
) -> Result<f64, TensorError> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(TensorError::InvalidArgument {
            op: "finite_diff_grad_check",
            detail: format!("eps must be positive and finite, got {eps}"),
        });
    }
    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = params.iter().map(|p| tape.leaf(p)).collect();
    let loss = program.loss(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| tape.grad(id).to_vec()).collect();
    drop(tape);

    // Numeric passes: one central difference per parameter element.
    let mut scratch: Vec<Tensor> = params.to_vec();
    let mut max_err = 0.0f64;
    for (pi, param) in params.iter().enumerate() {
        for ei in 0..param.numel() {
            let base = param.data()[ei];
            scratch[pi].data_mut()[ei] = base + eps;
            let plus = eval_loss(&mut program, &scratch)?;
            scratch[pi].data_mut()[ei] = base - eps;
            let minus = eval_loss(&mut program, &scratch)?;
            scratch[pi].data_mut()[ei] = base;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][ei];
            let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            if !err.is_finite() {
                return Err(TensorError::NonFinite {
                    op: "finite_diff_grad_check",
                });
            }
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_bowl_gradients_check_out() {
        // loss = CE(x . w, 0) over a tiny fixed problem.
        let x = Tensor::from_rows(&[vec![0.4, -1.1], vec![2.0, 0.3]]).unwrap();
        let w = Tensor::from_rows(&[vec![0.7, -0.2], vec![0.1, 0.9]]).unwrap();
        let err = finite_diff_grad_check(
            move |tape: &mut Tape, params: &[ValueId]| {
                let ix = tape.leaf(&x);
                let y = tape.matmul(ix, params[0])?;
                let pooled = tape.mean_rows(y)?;
                let flat = tape.reshape(pooled, &[2])?;
                tape.cross_entropy(flat, 0)
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "max relative error {err}");
    }

    #[test]
    fn rejects_non_positive_eps() {
        let w = Tensor::scalar(1.0).unwrap();
        let res = finite_diff_grad_check(
            |tape: &mut Tape, params: &[ValueId]| tape.sum_scalars(&params[..1]),
            &[w],
            0.0,
        );
        assert!(matches!(res, Err(TensorError::InvalidArgument { .. })));
    }
}
