//! Finite-difference validation of recorded gradients.

use super::Tensor;
use crate::{Error, Real, Result};

/// Central-difference gradient of the scalar produced by `f` with respect to
/// every element of `param`. `f` must rebuild its graph on each call, reading
/// the current contents of `param`.
pub fn numerical_gradient(
    mut f: impl FnMut() -> Result<Tensor>,
    param: &Tensor,
    epsilon: Real,
) -> Result<Vec<Real>> {
    let base = param.to_vec();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        param.set_elem(i, base[i] + epsilon);
        let up = f()?.item();
        param.set_elem(i, base[i] - epsilon);
        let down = f()?.item();
        param.set_elem(i, base[i]);
        grad[i] = (up - down) / (2.0 * epsilon);
    }
    Ok(grad)
}

/// Compare reverse-mode gradients of the scalar produced by `f` against
/// central differences over every element of `params`.
///
/// Returns the worst relative error `|a - n| / max(1, |a|, |n|)`. Any
/// non-finite value in the loss or either gradient is an error.
pub fn grad_check(
    mut f: impl FnMut() -> Result<Tensor>,
    params: &[Tensor],
    epsilon: Real,
) -> Result<Real> {
    for p in params {
        p.clear_grad();
    }
    let loss = f()?;
    if !loss.is_scalar() {
        return Err(Error::shape("grad check", "scalar loss", format!("{:?}", loss.shape())));
    }
    if !loss.item().is_finite() {
        return Err(Error::NonFinite(format!("loss value {}", loss.item())));
    }
    loss.backward()?;
    let analytic: Vec<Vec<Real>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let mut worst: Real = 0.0;
    for (p, a) in params.iter().zip(&analytic) {
        let n = numerical_gradient(&mut f, p, epsilon)?;
        for (i, (&ai, &ni)) in a.iter().zip(n.iter()).enumerate() {
            if !ai.is_finite() || !ni.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient element {i}: analytic {ai}, numeric {ni}"
                )));
            }
            let rel = (ai - ni).abs() / ai.abs().max(ni.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches_closed_form() {
        // d/dx sum(x^2) = 2x; finite differences agree to high precision.
        let x = Tensor::param(&[3], vec![0.5, -1.25, 2.0]).unwrap();
        let worst = grad_check(|| Ok(x.square().sum()), std::slice::from_ref(&x), 1e-5).unwrap();
        assert!(worst < 1e-8, "worst relative error {worst}");
        assert_eq!(x.grad().unwrap(), vec![1.0, -2.5, 4.0]);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // Pretend d/dx of 3x is 3 while evaluating x^2: differences disagree.
        let x = Tensor::param(&[1], vec![2.0]).unwrap();
        let analytic_loss = x.mul_scalar(3.0).sum();
        analytic_loss.backward().unwrap();
        let n = numerical_gradient(|| Ok(x.square().sum()), &x, 1e-5).unwrap();
        let a = x.grad().unwrap();
        let rel = (a[0] - n[0]).abs() / a[0].abs().max(n[0].abs()).max(1.0);
        assert!(rel > 1e-2, "expected a visible mismatch, got {rel}");
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let x = Tensor::param(&[1], vec![-1.0]).unwrap();
        let r = grad_check(|| Ok(x.ln().sum()), std::slice::from_ref(&x), 1e-6);
        assert!(r.is_err());
    }
}
