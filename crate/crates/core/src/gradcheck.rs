//! Central finite differences for verifying analytic gradients.

use crate::tensor::Tensor;

/// Step used by the gradient diagnostics and loss checks.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Gradient of the scalar function `f` at `x` by central differences:
/// `(f(x + h·e_i) - f(x - h·e_i)) / 2h` for every element `i`.
pub fn central_difference(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Largest elementwise relative error `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn max_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes differ");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}
