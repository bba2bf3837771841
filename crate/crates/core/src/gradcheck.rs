//! Central finite-difference helpers for verifying analytic gradients.
//!
//! These are verification oracles: they only ever call the loss forward
//! path, never the gradient path they are checking.

use ndarray::Array2;

/// Central finite differences of a scalar function of a matrix argument.
pub fn central_diff_matrix<F>(f: F, x: &Array2<f64>, step: f64) -> Array2<f64>
where
    F: Fn(&Array2<f64>) -> f64,
{
    let mut grad = Array2::zeros(x.dim());
    let mut probe = x.clone();
    for idx in ndarray::indices(x.dim()) {
        let orig = probe[idx];
        probe[idx] = orig + step;
        let up = f(&probe);
        probe[idx] = orig - step;
        let down = f(&probe);
        probe[idx] = orig;
        grad[idx] = (up - down) / (2.0 * step);
    }
    grad
}

/// Central finite differences of a scalar function of a flat slice argument.
pub fn central_diff_slice<F>(f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for k in 0..x.len() {
        let orig = probe[k];
        probe[k] = orig + step;
        let up = f(&probe);
        probe[k] = orig - step;
        let down = f(&probe);
        probe[k] = orig;
        grad[k] = (up - down) / (2.0 * step);
    }
    grad
}

/// Largest elementwise relative error between two gradients. Entries where
/// both sides are below `floor` in magnitude are compared absolutely
/// against `floor` instead.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| {
            let scale = a.abs().max(n.abs());
            if scale < floor {
                (a - n).abs() / floor
            } else {
                (a - n).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}
