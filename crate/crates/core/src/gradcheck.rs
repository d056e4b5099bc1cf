//! Central finite differences and error metrics for gradient checks.

/// Default step for central differences.
pub const STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at `x` with step [`STEP`].
pub fn central_diff(x: &[f64], f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    central_diff_with(x, STEP, f)
}

pub fn central_diff_with(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest elementwise relative error `|a-b| / max(|a|, |b|, floor)`.
///
/// The floor keeps entries whose true gradient is zero from dividing
/// round-off noise by zero.
pub fn max_rel_err_floor(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// [`max_rel_err_floor`] with a floor of `1e-4`.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    max_rel_err_floor(a, b, 1e-4)
}

/// Norm-wise relative error `‖a-b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn norm_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}
