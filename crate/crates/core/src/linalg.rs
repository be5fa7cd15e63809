//! Dense vector helpers and the numeric utilities shared by every layer:
//! squared-ball projection and central finite differences.

use crate::error::{AftoError, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `y += s * x`
pub fn axpy(y: &mut [f64], s: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

pub(crate) fn check_len(what: &'static str, v: &[f64], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(AftoError::Dimension {
            what,
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

/// Projects `v` onto the ball `{u : ||u||^2 <= alpha}`.
pub fn project_ball_sq(v: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = v.to_vec();
    project_ball_sq_in_place(&mut out, alpha);
    out
}

pub fn project_ball_sq_in_place(v: &mut [f64], alpha: f64) {
    let n2 = norm_sq(v);
    if n2 <= alpha {
        return;
    }
    let scale = (alpha.max(0.0) / n2).sqrt();
    for x in v.iter_mut() {
        *x *= scale;
    }
}

/// Step used for central differences around `v`: `1e-5 * (1 + ||v||_inf)`.
pub fn default_fd_step(v: &[f64]) -> f64 {
    1e-5 * (1.0 + norm_inf(v))
}

/// Central-difference gradient of `f` at `v` with step `h`.
pub fn finite_diff_grad<F>(f: F, v: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(AftoError::Config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = v.to_vec();
    let mut grad = Vec::with_capacity(v.len());
    for k in 0..v.len() {
        let orig = probe[k];
        probe[k] = orig + h;
        let fp = f(&probe);
        probe[k] = orig - h;
        let fm = f(&probe);
        probe[k] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(AftoError::NonFinite {
                what: "finite-difference probe".into(),
                index: Some(k),
            });
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// A point drawn uniformly from `[-scale, scale]^d`.
pub fn uniform_box<R: rand::Rng + ?Sized>(rng: &mut R, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-scale..=scale)).collect()
}

/// Relative error `||a - b|| / max(||b||, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    dist_sq(a, b).sqrt() / norm_sq(b).sqrt().max(floor)
}
