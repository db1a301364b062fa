//! Central finite differences, used as the independent oracle for every
//! analytic gradient in the crate.

use crate::tensor::Tensor;

/// `∂f/∂x` by central differences with step `eps`, one coordinate at a time.
pub fn central_difference(x: &Tensor, eps: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Scalar version of [`central_difference`].
pub fn central_difference_scalar(x: f64, eps: f64, f: impl Fn(f64) -> f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

/// `|a−b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Largest elementwise [`relative_error`].
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}

#[track_caller]
pub fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64) {
    let err = max_relative_error(analytic, numeric);
    assert!(
        err <= tol,
        "relative error {err:e} > {tol:e}\nanalytic: {analytic:?}\nnumeric:  {numeric:?}"
    );
}
