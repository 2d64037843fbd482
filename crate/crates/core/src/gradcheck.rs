//! Central finite differences, the independent oracle for every backward
//! kernel. Nothing here touches the tape's backward path: gradients are
//! estimated purely from repeated forward evaluations.

use crate::tensor::Tensor;

/// Default step for 64-bit checks.
pub const FD_STEP: f64 = 1e-5;

/// Estimate d f / d x elementwise with central differences.
pub fn central_diff(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Elementwise comparison with a relative tolerance and an absolute floor:
/// each pair must satisfy |a - b| <= max(abs_floor, rel * max(|a|, |b|)).
/// Returns the first offending element on failure.
pub fn compare_grads(
    analytic: &Tensor,
    estimate: &Tensor,
    rel: f64,
    abs_floor: f64,
) -> Result<(), String> {
    assert_eq!(analytic.shape(), estimate.shape());
    for i in 0..analytic.len() {
        let a = analytic.data()[i];
        let b = estimate.data()[i];
        let diff = (a - b).abs();
        let tol = abs_floor.max(rel * a.abs().max(b.abs()));
        if diff > tol {
            return Err(format!(
                "gradient mismatch at element {i}: analytic {a:.9e}, finite-diff {b:.9e}, \
                 |diff| {diff:.3e} > tol {tol:.3e}"
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let fd = central_diff(&x, FD_STEP, |t| t.data().iter().map(|v| v * v).sum());
        let want = x.scaled(2.0);
        compare_grads(&want, &fd, 1e-6, 1e-9).unwrap();
    }

    #[test]
    fn comparison_reports_offender() {
        let a = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2], vec![1.0, 1.1]).unwrap();
        let err = compare_grads(&a, &b, 1e-4, 1e-7).unwrap_err();
        assert!(err.contains("element 1"), "{err}");
    }
}
