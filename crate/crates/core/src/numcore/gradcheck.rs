//! Central-difference gradient oracle.
//!
//! The numeric side never touches [`Tape::backward`]: it only re-evaluates
//! the forward value at `x ± eps·e_i`, so it stays independent of every
//! hand-written vector-Jacobian product it checks.

use super::{Matrix, NumError, Tape, Var};

/// Denominator floor for the relative error. Entries whose true gradient
/// is (numerically) zero would otherwise be scored against pure rounding
/// noise of the difference quotient.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Matrix,
    pub numeric: Matrix,
    /// `max_i |a_i - n_i| / max(|a_i|, |n_i|, GRAD_CHECK_FLOOR)`
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Compares the tape gradient of scalar `f` at `x` against central
/// differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Matrix, eps: f64) -> Result<GradCheckReport, NumError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, NumError>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let analytic = tape.backward(out)?.get_or_zeros(xv);

    let eval = |m: Matrix| -> Result<f64, NumError> {
        let mut t = Tape::new();
        let v = t.param(m);
        let o = f(&mut t, v)?;
        let shape = t.value(o).shape();
        if shape != (1, 1) {
            return Err(NumError::NotScalar { shape });
        }
        Ok(t.scalar(o))
    };

    let mut numeric = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        numeric.data_mut()[i] = (eval(plus)? - eval(minus)?) / (2.0 * eps);
    }

    let mut max_rel_error = 0.0f64;
    let mut max_abs_error = 0.0f64;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        let abs = (a - n).abs();
        max_abs_error = max_abs_error.max(abs);
        max_rel_error = max_rel_error.max(abs / a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR));
    }
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_error,
        max_abs_error,
    })
}
