//! Empirical weak-convexity modulus.
//!
//! A differentiable `f` is mu-weakly convex iff for all pairs
//! `f(x) >= f(x') + grad f(x')^T (x - x') - mu/2 ||x - x'||^2`.
//! Over a finite sample the smallest admissible `mu` is the largest ratio
//! `2 (f(x') + grad f(x')^T (x - x') - f(x)) / ||x - x'||^2`.

use crate::error::{AftoError, Result};
use crate::linalg::{dist_sq, dot, sub};

const ROUNDING_FLOOR: f64 = 1e-12;

/// Smallest `mu >= 0` satisfying the first-order condition on the sampled
/// ordered pairs.
///
/// Pairs are enumerated in a fixed order (`(i, k)` and `(k, i)` for every
/// `i < k`, with `k` increasing) and truncated at `pair_samples`, so appending
/// sample points only appends pairs and the estimate never decreases.
pub fn estimate_mu<F, G>(f: F, grad: G, points: &[Vec<f64>], pair_samples: usize) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    if points.len() < 2 {
        return Err(AftoError::Config("estimate_mu needs at least two sample points".into()));
    }
    let values: Vec<f64> = points.iter().map(|p| f(p)).collect();
    let grads: Vec<Vec<f64>> = points.iter().map(|p| grad(p)).collect();

    let mut mu: f64 = 0.0;
    let mut used = 0usize;
    let mut informative = 0usize;
    'outer: for k in 1..points.len() {
        for i in 0..k {
            for (a, b) in [(i, k), (k, i)] {
                if used == pair_samples {
                    break 'outer;
                }
                used += 1;
                // x = points[a], x' = points[b]
                let d2 = dist_sq(&points[a], &points[b]);
                if d2 == 0.0 {
                    continue;
                }
                informative += 1;
                let lin = values[b] + dot(&grads[b], &sub(&points[a], &points[b]));
                let mut excess = lin - values[a];
                // rounding noise of the linearization is not curvature
                if excess.abs() <= ROUNDING_FLOOR * (1.0 + lin.abs() + values[a].abs()) {
                    excess = 0.0;
                }
                let ratio = 2.0 * excess / d2;
                if ratio.is_finite() {
                    mu = mu.max(ratio);
                }
            }
        }
    }
    if informative == 0 {
        return Err(AftoError::DegenerateSamples);
    }
    Ok(mu.max(0.0))
}
