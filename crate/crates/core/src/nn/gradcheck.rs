/// Central finite-difference gradient of `f` at `x` with step `eps`.
pub fn central_difference<F>(mut f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let plus = f(&probe);
            probe[i] = x[i] - eps;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Largest elementwise `|a - b| / max(|a|, |b|, floor)`, with `floor = 1e-4`.
///
/// The floor keeps entries whose true gradient is essentially zero from
/// dominating through rounding noise.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}
