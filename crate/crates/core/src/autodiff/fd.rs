use super::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference estimate of the gradient of a scalar function.
///
/// Coordinate `i` is `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`. `f` is only ever
/// evaluated, so the estimate is independent of any backward pass.
pub fn finite_difference_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Vec<f64> {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    grad
}

/// Largest coordinate-wise relative error between two gradients.
///
/// The denominator is `max(|a|, |b|, floor)` so coordinates whose true
/// gradient vanishes are compared absolutely at the scale of `floor`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
