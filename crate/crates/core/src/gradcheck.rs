//! Central finite differences as an independent oracle for the tape.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Step size used by the gradient suites.
pub const DEFAULT_EPS: f64 = 1e-4;

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// `f` builds a scalar graph from its input; it is evaluated once on a tape
/// where `x` is a trainable leaf and then `2·numel(x)` more times on
/// perturbed constants. Returns
/// `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_with(f, x, eps, |g| Ok(g.clone()))
}

/// Like [`finite_diff_check`], but passes the analytic gradient through
/// `tamper` first. Used to verify the suite rejects a wrong gradient.
pub(crate) fn check_with<F, T>(f: F, x: &Tensor, eps: f64, tamper: T) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
    T: Fn(&Tensor) -> Result<Tensor>,
{
    if !(eps > 0.0) {
        return Err(Error::ConfigInvalid(format!("finite-difference eps must be > 0, got {eps}")));
    }
    let analytic = analytic_grad(&f, x)?;
    let analytic = tamper(&analytic)?;

    let eval = |v: Tensor, i: usize| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(v);
        match f(&mut tape, xv) {
            Ok(root) => {
                let out = tape.value(root).item()?;
                if out.is_finite() {
                    Ok(out)
                } else {
                    Err(Error::NonFiniteEvaluation(i))
                }
            }
            Err(Error::NonFinite(_)) => Err(Error::NonFiniteEvaluation(i)),
            Err(e) => Err(e),
        }
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let xi = x.data()[i];
        let plus = eval(x.with_element(i, xi + eps)?, i)?;
        let minus = eval(x.with_element(i, xi - eps)?, i)?;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// Tape gradient of `f` at `x`; zeros when no gradient reaches `x`.
pub fn analytic_grad<F>(f: &F, x: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let root = f(&mut tape, leaf)?;
    tape.backward(root)?;
    match tape.grad(leaf) {
        Some(g) => Ok(g.clone()),
        None => Tensor::zeros(x.shape().to_vec()),
    }
}
