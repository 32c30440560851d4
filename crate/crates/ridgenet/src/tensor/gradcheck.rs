//! Central finite-difference verification of reverse-mode gradients.

use super::{no_grad, Element, Tensor};
use crate::error::{Error, Result};

/// Relative-error floor: coordinates where both gradients are below this are
/// compared absolutely.
pub const REL_FLOOR: f64 = 1e-8;

/// Compare `backward`'s gradient of a scalar-valued tensor function against
/// central finite differences, coordinate by coordinate.
///
/// Returns the maximum over coordinates of
/// `|fd - grad| / max(|fd|, |grad|, 1e-8)`.
///
/// `f` is called once with graph recording enabled (for the analytic
/// gradient) and `2 * numel` times with recording disabled (for the
/// probes). It must be a pure function of the probe tensor's values.
pub fn finite_difference_check<E, F>(f: F, x: &Tensor<E>, h: E) -> Result<f64>
where
    E: Element,
    F: Fn(&Tensor<E>) -> Result<Tensor<E>>,
{
    if h <= E::zero() {
        return Err(Error::invalid("finite_difference_check: h must be positive".to_string()));
    }

    let probe = Tensor::param_from_vec(x.shape(), x.to_vec())?;
    let loss = f(&probe)?;
    if loss.numel() != 1 {
        return Err(Error::invalid(format!(
            "finite_difference_check: f must be scalar-valued, got shape {:?}",
            loss.shape()
        )));
    }
    loss.backward()?;
    let analytic = probe.grad().unwrap_or_else(|| vec![E::zero(); probe.numel()]);

    let mut base = x.to_vec();
    let mut max_err = 0.0f64;
    for i in 0..base.len() {
        let orig = base[i];
        base[i] = orig + h;
        let fp = eval_scalar(&f, x.shape(), &base)?;
        base[i] = orig - h;
        let fm = eval_scalar(&f, x.shape(), &base)?;
        base[i] = orig;

        let fd = (fp - fm) / (2.0 * h.as_f64());
        let a = analytic[i].as_f64();
        let denom = fd.abs().max(a.abs()).max(REL_FLOOR);
        max_err = max_err.max((fd - a).abs() / denom);
    }
    Ok(max_err)
}

fn eval_scalar<E, F>(f: &F, shape: &[usize], data: &[E]) -> Result<f64>
where
    E: Element,
    F: Fn(&Tensor<E>) -> Result<Tensor<E>>,
{
    let t = Tensor::from_vec(shape, data.to_vec())?;
    let out = no_grad(|| f(&t))?;
    if out.numel() != 1 {
        return Err(Error::invalid(format!(
            "finite_difference_check: f must be scalar-valued, got shape {:?}",
            out.shape()
        )));
    }
    Ok(out.item().as_f64())
}
