//! Finite-difference gradient oracle and comparison helpers. The oracle only
//! re-runs the forward function on perturbed copies of the input, so it stays
//! independent of every backward rule it is used to check.

use super::Tensor;
use crate::error::Result;

/// Central-difference gradient of a scalar function at `x`:
/// (f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps) per element. The difference
/// quotient is taken in f64.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&Tensor) -> Result<f32>,
    x: &Tensor,
    eps: f32,
) -> Result<Vec<f32>> {
    assert!(eps > 0.0, "finite_diff_grad: eps must be positive");
    let shape = x.shape();
    let base = x.to_vec();
    let mut grad = vec![0.0f32; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = f(&Tensor::from_vec(&shape, plus)?)? as f64;
        let fm = f(&Tensor::from_vec(&shape, minus)?)? as f64;
        grad[i] = ((fp - fm) / (2.0 * eps as f64)) as f32;
    }
    Ok(grad)
}

/// Central difference restricted to a coordinate subset; avoids full sweeps
/// on large parameter tensors.
pub fn finite_diff_grad_at(
    f: &mut dyn FnMut(&Tensor) -> Result<f32>,
    x: &Tensor,
    coords: &[usize],
    eps: f32,
) -> Result<Vec<f32>> {
    assert!(eps > 0.0, "finite_diff_grad_at: eps must be positive");
    let shape = x.shape();
    let base = x.to_vec();
    let mut grad = Vec::with_capacity(coords.len());
    for &i in coords {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = f(&Tensor::from_vec(&shape, plus)?)? as f64;
        let fm = f(&Tensor::from_vec(&shape, minus)?)? as f64;
        grad.push(((fp - fm) / (2.0 * eps as f64)) as f32);
    }
    Ok(grad)
}

/// Worst element of |a - b| / max(atol, rtol·max(|a|,|b|)); values ≤ 1 pass.
pub fn worst_violation(analytic: &[f32], numeric: &[f32], rtol: f32, atol: f32) -> f32 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / atol.max(rtol * a.abs().max(n.abs())))
        .fold(0.0f32, f32::max)
}

/// Default tolerances for f32 forward passes: max(1e-3 relative, 1e-4 absolute).
pub const RTOL: f32 = 1e-3;
pub const ATOL: f32 = 1e-4;

/// Checks autodiff against central differences for a scalar-valued function
/// of one input tensor. Returns the worst violation ratio (≤ 1 passes).
pub fn check_grad(
    f: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    eps: f32,
) -> Result<f32> {
    let leaf = x.detach().with_requires_grad();
    let loss = f(&leaf)?;
    loss.backward()?;
    let analytic = leaf.grad().expect("input did not receive a gradient");
    let numeric = finite_diff_grad(&mut |t| Ok(f(t)?.item()), x, eps)?;
    Ok(worst_violation(&analytic, &numeric, RTOL, ATOL))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_of_sum_is_ones() {
        let x = Tensor::from_vec(&[4], vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let g = finite_diff_grad(&mut |t| Ok(t.sum().item()), &x, 1e-3).unwrap();
        for v in g {
            assert!((v - 1.0).abs() < 1e-2, "{v}");
        }
    }

    #[test]
    fn finite_diff_of_square_sum() {
        // f(x) = sum(x^2) at x = [3] has gradient [6].
        let x = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let g = finite_diff_grad(&mut |t| Ok(t.mul(t)?.sum().item()), &x, 1e-3).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-2, "{}", g[0]);
    }
}
