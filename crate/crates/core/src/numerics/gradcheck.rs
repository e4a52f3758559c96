//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{DType, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max_i |analytic_i − numeric_i| / max(1, |numeric_i|)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

fn eval_scalar<F>(f: &F, x: &Tensor, tape: &mut Tape) -> Result<(Var, Var)>
where
    F: Fn(&mut Tape, &Var) -> Result<Var>,
{
    let xv = tape.leaf(x.clone());
    let y = f(tape, &xv)?;
    if y.value().numel() != 1 {
        return Err(Error::shape(format!(
            "grad_check needs a scalar-valued function, got {:?}",
            y.shape()
        )));
    }
    Ok((xv, y))
}

/// Compares the tape gradient of the scalar `f(x)` with central differences
/// at step `eps`, always in 64-bit precision.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("grad_check step must be positive, got {eps}")));
    }
    let x = x.clone().with_dtype(DType::F64);
    let mut tape = Tape::recording(DType::F64);
    let (xv, y) = eval_scalar(&f, &x, &mut tape)
        .map_err(|e| Error::invalid(format!("grad_check forward pass failed: {e}")))?;
    let analytic = tape.backward(&y)?.wrt(&xv);

    let mut numeric = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for (i, slot) in numeric.iter_mut().enumerate() {
        let orig = probe.data()[i];
        let mut side = |v: f64| -> Result<f64> {
            probe.data_mut()[i] = v;
            let mut t = Tape::inference(DType::F64);
            let (_, y) = eval_scalar(&f, &probe, &mut t)
                .map_err(|e| Error::invalid(format!("grad_check coordinate {i}: {e}")))?;
            Ok(y.value().item())
        };
        let plus = side(orig + eps)?;
        let minus = side(orig - eps)?;
        probe.data_mut()[i] = orig;
        *slot = (plus - minus) / (2.0 * eps);
    }

    let (mut max_rel_error, mut worst_index) = (0.0, 0);
    for (i, (a, n)) in analytic.data().iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / n.abs().max(1.0);
        if err > max_rel_error || err.is_nan() {
            max_rel_error = err;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric: Tensor::new(x.shape(), numeric)?,
    })
}
