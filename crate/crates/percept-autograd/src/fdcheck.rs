//! Finite-difference gradient checking utilities.
//!
//! These helpers are production code (not test-only) so integration tests
//! across the workspace can verify analytic gradients of composite models
//! against central differences.

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Relative error between an analytic and a numeric derivative, guarded
/// against division by tiny magnitudes.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Central difference of a scalar closure.
pub fn central_diff(f: &mut dyn FnMut(f64) -> f64, x0: f64, eps: f64) -> f64 {
    (f(x0 + eps) - f(x0 - eps)) / (2.0 * eps)
}

/// Compares analytic parameter gradients against central differences at the
/// given element indices and returns the maximum relative error.
///
/// `loss` must rebuild the computation from scratch from the store (a fresh
/// graph per call) and return the scalar loss value.
pub fn max_rel_err_vs_fd(
    store: &mut ParamStore,
    pid: ParamId,
    analytic: &Tensor,
    indices: &[(usize, usize)],
    eps: f64,
    loss: &mut dyn FnMut(&ParamStore) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    for &(r, c) in indices {
        let original = store.get(pid).get(r, c);
        store.get_mut(pid).set(r, c, original + eps);
        let plus = loss(store);
        store.get_mut(pid).set(r, c, original - eps);
        let minus = loss(store);
        store.get_mut(pid).set(r, c, original);
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(rel_err(analytic.get(r, c), numeric));
    }
    worst
}

/// Evenly spread sample indices over a tensor, capped at `max_samples`.
/// Checking every element of large parameters is wasteful; a deterministic
/// stride covers corners and interior alike.
pub fn sample_indices(rows: usize, cols: usize, max_samples: usize) -> Vec<(usize, usize)> {
    let total = rows * cols;
    let n = total.min(max_samples.max(1));
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let flat = k * total / n;
        out.push((flat / cols, flat % cols));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_of_square() {
        let mut f = |x: f64| x * x;
        let d = central_diff(&mut f, 3.0, 1e-5);
        assert!(rel_err(6.0, d) < 1e-9);
    }

    #[test]
    fn sample_indices_cover_extremes() {
        let idx = sample_indices(10, 10, 7);
        assert_eq!(idx.len(), 7);
        assert_eq!(idx[0], (0, 0));
        assert!(idx.iter().all(|&(r, c)| r < 10 && c < 10));
    }
}
