//! Cut validity checks and empirical weak-convexity estimates for the two
//! constraint functions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cuts::{validate_cut, Cut, CutPoint, PointSampler, ValidationReport};
use crate::error::{AftoError, Result};
use crate::harness::RefineRecord;
use crate::inner::{h_at, TraceSampler, UnrollTrace};
use crate::linalg::finite_diff_grad;
use crate::mu::estimate_mu;
use crate::problem::TrilevelProblem;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Feasible points checked per cut.
    pub samples: usize,
    /// Proposal budget per cut.
    pub max_draws: usize,
    /// Spread of the unroll inputs around the cut anchor.
    pub radius: f64,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            samples: 1000,
            max_draws: 20_000,
            radius: 1.0,
            seed: 0,
        }
    }
}

fn h_or_inf<P: TrilevelProblem + ?Sized>(problem: &P, trace: &UnrollTrace, p: &CutPoint) -> f64 {
    h_at(problem, trace, p).unwrap_or(f64::INFINITY)
}

/// Checks `cut` against points of `{h <= eps}` around `anchor`, where `h` is
/// the constraint function of `trace`'s layer.
pub fn check_cut<P: TrilevelProblem + ?Sized>(
    problem: &P,
    cut: &Cut,
    trace: &UnrollTrace,
    anchor: &CutPoint,
    eps: f64,
    cfg: &SamplingConfig,
) -> ValidationReport {
    let mut sampler = TraceSampler {
        problem,
        trace,
        anchor: anchor.clone(),
        radius: cfg.radius,
        eps,
    };
    validate_cut(
        cut,
        |p| h_or_inf(problem, trace, p),
        eps,
        &mut sampler,
        &problem.bounds(),
        cfg.samples,
        cfg.max_draws,
        cfg.seed,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineCheck {
    pub t: usize,
    pub layer_i: ValidationReport,
    pub layer_ii: ValidationReport,
}

/// Validates both cuts of a recorded refinement event.
pub fn check_refinement<P: TrilevelProblem + ?Sized>(
    problem: &P,
    rec: &RefineRecord,
    eps: [f64; 2],
    cfg: &SamplingConfig,
) -> RefineCheck {
    RefineCheck {
        t: rec.t,
        layer_i: check_cut(problem, &rec.cut_i, &rec.trace_i, &rec.anchor_i, eps[0], cfg),
        layer_ii: check_cut(problem, &rec.cut_ii, &rec.trace_ii, &rec.anchor_ii, eps[1], cfg),
    }
}

/// Estimates the weak-convexity modulus of `trace`'s `h` from `points`
/// sampled around `anchor` (inputs within `radius`, free blocks within
/// `radius` of the unroll endpoint). Gradients are central differences of
/// the re-run unroll.
pub fn estimate_h_mu<P: TrilevelProblem + ?Sized>(
    problem: &P,
    trace: &UnrollTrace,
    anchor: &CutPoint,
    points: usize,
    radius: f64,
    seed: u64,
) -> Result<f64> {
    let mut sampler = TraceSampler {
        problem,
        trace,
        anchor: anchor.clone(),
        radius,
        eps: radius * radius,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<Vec<f64>> = (0..points).map(|_| sampler.propose(&mut rng).flatten()).collect();
    let f = |v: &[f64]| h_or_inf(problem, trace, &CutPoint::unflatten(anchor, v));
    let values_ok = pts.iter().all(|p| f(p).is_finite());
    if !values_ok {
        return Err(AftoError::NonFinite {
            what: format!("h_{} at a sampled point", trace.layer.name()),
            index: None,
        });
    }
    let grad = |v: &[f64]| finite_diff_grad(f, v, 1e-5).unwrap_or_else(|_| vec![f64::NAN; v.len()]);
    estimate_mu(f, grad, &pts, usize::MAX)
}
