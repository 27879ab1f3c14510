//! Finite-difference oracles for checking hand-written backward passes.

/// Central differences `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h` for every
/// coordinate of `theta`.
pub fn central_difference(theta: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = theta.to_vec();
    let mut grads = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + step;
        let plus = f(&probe);
        probe[i] = theta[i] - step;
        let minus = f(&probe);
        probe[i] = theta[i];
        grads.push((plus - minus) / (2.0 * step));
    }
    grads
}

/// Floor on the denominator of [`relative_error`]; below it the comparison
/// degrades to an absolute one.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

/// `|a − b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Largest [`relative_error`] over paired gradients.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}

/// Gap between the `k`-th and `(k+1)`-th largest probabilities, or
/// `f64::INFINITY` when `k` covers every entry. Selection is not
/// differentiable where this gap vanishes.
pub fn topk_margin(probs: &[f64], k: usize) -> f64 {
    if k >= probs.len() {
        return f64::INFINITY;
    }
    let mut sorted = probs.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[k - 1] - sorted[k]
}
