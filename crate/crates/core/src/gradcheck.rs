//! Central finite differences for checking analytic gradients.

use alloc::vec::Vec;

use crate::tensor::Tensor;

/// Numerical gradient of `f` at `x` by central differences with step `h`.
pub fn numeric_gradient(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    Tensor::from_vec(x.shape(), grad)
}

/// Largest elementwise relative error `|a − n| / max(|a|, |n|, floor)`.
///
/// `floor` keeps entries whose true gradient is ~0 from dominating through
/// rounding noise in the finite difference.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
