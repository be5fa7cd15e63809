//! Layer-I and layer-II mu-cuts and the polytopes built from them.
//!
//! A cut is a linear inequality over the consensus blocks `z_1, z_2, z_3` and
//! the per-worker local blocks (`x_{3,j}` for layer I, `x_{2,j}` and `x_{3,j}`
//! for layer II):
//!
//! ```text
//!   sum_i a_i^T z_i + sum_j b2_j^T x_{2,j} + sum_j b3_j^T x_{3,j} <= c
//! ```
//!
//! For layer I the `z_2` slot holds the level-2 inner copy `z'_2`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AftoError, Result};
use crate::inner::{eval_h1, eval_h2, grad_h, GradMode, UnrollTrace};
use crate::linalg::{all_finite, dot, norm_sq};
use crate::problem::{Bounds, Dims, TrilevelProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layer {
    I,
    II,
}

impl Layer {
    pub fn name(self) -> &'static str {
        match self {
            Layer::I => "I",
            Layer::II => "II",
        }
    }
}

/// A point (or a gradient) in the space a cut lives in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutPoint {
    pub z: [Vec<f64>; 3],
    /// Per-worker `x_{2,j}`; empty for layer-I points.
    pub x2: Vec<Vec<f64>>,
    pub x3: Vec<Vec<f64>>,
}

impl CutPoint {
    pub fn zeros(layer: Layer, dims: Dims) -> Self {
        CutPoint {
            z: [vec![0.0; dims.d1], vec![0.0; dims.d2], vec![0.0; dims.d3]],
            x2: match layer {
                Layer::I => Vec::new(),
                Layer::II => vec![vec![0.0; dims.d2]; dims.n],
            },
            x3: vec![vec![0.0; dims.d3]; dims.n],
        }
    }

    pub fn dot(&self, other: &CutPoint) -> f64 {
        let mut s: f64 = (0..3).map(|i| dot(&self.z[i], &other.z[i])).sum();
        s += self.x2.iter().zip(&other.x2).map(|(a, b)| dot(a, b)).sum::<f64>();
        s += self.x3.iter().zip(&other.x3).map(|(a, b)| dot(a, b)).sum::<f64>();
        s
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    /// Flattened coordinates in the order `x2 (by worker), x3 (by worker), z1, z2, z3`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for b in self.x2.iter().chain(&self.x3) {
            v.extend_from_slice(b);
        }
        for zi in &self.z {
            v.extend_from_slice(zi);
        }
        v
    }

    pub fn unflatten(layout: &CutPoint, flat: &[f64]) -> CutPoint {
        let mut out = layout.clone();
        let mut k = 0;
        for b in out.x2.iter_mut().chain(out.x3.iter_mut()) {
            for v in b.iter_mut() {
                *v = flat[k];
                k += 1;
            }
        }
        for zi in out.z.iter_mut() {
            for v in zi.iter_mut() {
                *v = flat[k];
                k += 1;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.z.iter().all(|v| all_finite(v)) && self.x2.iter().chain(&self.x3).all(|v| all_finite(v))
    }

    fn check_shape(&self, other: &CutPoint) -> Result<()> {
        let shape = |p: &CutPoint| {
            (
                p.z.iter().map(Vec::len).collect::<Vec<_>>(),
                p.x2.iter().map(Vec::len).collect::<Vec<_>>(),
                p.x3.iter().map(Vec::len).collect::<Vec<_>>(),
            )
        };
        let (a, b) = (shape(self), shape(other));
        if a != b {
            return Err(AftoError::Dimension {
                what: "cut point layout",
                expected: self.flatten().len(),
                got: other.flatten().len(),
            });
        }
        Ok(())
    }

    fn within(&self, bounds: &Bounds) -> bool {
        let a = bounds.0;
        (0..3).all(|i| norm_sq(&self.z[i]) <= a[i])
            && self.x2.iter().all(|v| norm_sq(v) <= a[1])
            && self.x3.iter().all(|v| norm_sq(v) <= a[2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cut {
    pub layer: Layer,
    pub id: u64,
    pub born_at: usize,
    /// Coefficients, stored in the same layout as the points they act on.
    pub coef: CutPoint,
    pub c: f64,
}

impl Cut {
    pub fn lhs(&self, point: &CutPoint) -> f64 {
        self.coef.dot(point)
    }

    /// Left-hand side with the local blocks held fixed and the consensus
    /// blocks given separately.
    pub fn lhs_with_z(&self, point: &CutPoint, z: [&[f64]; 3]) -> f64 {
        let mut s: f64 = (0..3).map(|i| dot(&self.coef.z[i], z[i])).sum();
        s += self.coef.x2.iter().zip(&point.x2).map(|(a, b)| dot(a, b)).sum::<f64>();
        s += self.coef.x3.iter().zip(&point.x3).map(|(a, b)| dot(a, b)).sum::<f64>();
        s
    }

    /// The same half-space with unit-norm coefficients. A zero cut is
    /// returned unchanged.
    pub fn normalized(&self) -> Cut {
        let norm = self.coef.norm_sq().sqrt();
        if !(norm > 0.0) {
            return self.clone();
        }
        let mut flat = self.coef.flatten();
        flat.iter_mut().for_each(|v| *v /= norm);
        Cut {
            coef: CutPoint::unflatten(&self.coef, &flat),
            c: self.c / norm,
            ..self.clone()
        }
    }
}

/// Residual `lhs - c`; non-positive means the point satisfies the cut.
pub fn cut_violation(cut: &Cut, point: &CutPoint) -> Result<f64> {
    cut.coef.check_shape(point)?;
    Ok(cut.lhs(point) - cut.c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polytope {
    pub layer: Layer,
    pub cuts: Vec<Cut>,
    next_id: u64,
}

impl Polytope {
    pub fn new(layer: Layer) -> Self {
        Polytope {
            layer,
            cuts: Vec::new(),
            next_id: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.cuts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cuts.is_empty()
    }

    /// Appends `cut`, assigning it a fresh id. Returns the id.
    pub fn add(&mut self, mut cut: Cut) -> Result<u64> {
        if cut.layer != self.layer {
            return Err(AftoError::LayerMismatch {
                expected: self.layer.name(),
                got: cut.layer.name(),
            });
        }
        cut.id = self.next_id;
        self.next_id += 1;
        self.cuts.push(cut);
        Ok(self.next_id - 1)
    }

    pub fn contains(&self, point: &CutPoint, tol: f64) -> bool {
        self.cuts.iter().all(|c| c.lhs(point) - c.c <= tol)
    }

    pub fn max_violation(&self, point: &CutPoint) -> f64 {
        self.cuts
            .iter()
            .map(|c| c.lhs(point) - c.c)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Keeps the cuts whose `keep` flag is set, in order.
    fn retain_mask(&mut self, keep: &[bool]) {
        let mut it = keep.iter();
        self.cuts.retain(|_| *it.next().unwrap());
    }

    pub fn to_json(&self) -> Result<String> {
        let snap = PolytopeSnapshot::from(self);
        Ok(serde_json::to_string_pretty(&snap)?)
    }
}

/// `P + cut` as a new polytope.
pub fn add_cut(poly: &Polytope, cut: Cut) -> Result<Polytope> {
    let mut out = poly.clone();
    out.add(cut)?;
    Ok(out)
}

/// Duals at or below this magnitude count as zero when pruning.
pub const DUAL_ZERO_TOL: f64 = 1e-10;

/// Outcome of [`drop_inactive`]: both polytopes and the duals of the
/// retained cuts, re-indexed to the new cut order.
#[derive(Debug, Clone)]
pub struct Pruned {
    pub poly_i: Polytope,
    pub poly_ii: Polytope,
    pub gamma: Vec<f64>,
    pub lambda: Vec<f64>,
}

/// Removes layer-I cuts whose inner dual `gamma_l^K` is zero and layer-II
/// cuts whose outer dual `lambda_l` is zero.
pub fn drop_inactive(
    poly_i: &Polytope,
    gamma_k: &[f64],
    poly_ii: &Polytope,
    lambdas: &[f64],
    tol: f64,
) -> Result<Pruned> {
    if gamma_k.len() != poly_i.len() {
        return Err(AftoError::Dimension {
            what: "layer-I duals",
            expected: poly_i.len(),
            got: gamma_k.len(),
        });
    }
    if lambdas.len() != poly_ii.len() {
        return Err(AftoError::Dimension {
            what: "layer-II duals",
            expected: poly_ii.len(),
            got: lambdas.len(),
        });
    }
    let keep_i: Vec<bool> = gamma_k.iter().map(|g| g.abs() > tol).collect();
    let keep_ii: Vec<bool> = lambdas.iter().map(|l| l.abs() > tol).collect();
    let mut pi = poly_i.clone();
    let mut pii = poly_ii.clone();
    pi.retain_mask(&keep_i);
    pii.retain_mask(&keep_ii);
    Ok(Pruned {
        poly_i: pi,
        poly_ii: pii,
        gamma: gamma_k
            .iter()
            .zip(&keep_i)
            .filter(|(_, k)| **k)
            .map(|(g, _)| *g)
            .collect(),
        lambda: lambdas
            .iter()
            .zip(&keep_ii)
            .filter(|(_, k)| **k)
            .map(|(l, _)| *l)
            .collect(),
    })
}

/// Right-hand-side inflation of a layer-I mu-cut anchored at `anchor`.
pub fn inflation_i(mu: f64, alphas: &Bounds, anchor: &CutPoint) -> f64 {
    if mu == 0.0 {
        return 0.0;
    }
    let [a1, a2, a3] = alphas.0;
    let n = anchor.x3.len() as f64;
    let anchor_sq: f64 =
        anchor.x3.iter().map(|v| norm_sq(v)).sum::<f64>() + anchor.z.iter().map(|v| norm_sq(v)).sum::<f64>();
    mu * ((n + 1.0) * a1 + a2 + a3 + anchor_sq)
}

/// Right-hand-side inflation of a layer-II mu-cut anchored at `anchor`.
pub fn inflation_ii(mu: f64, alphas: &Bounds, anchor: &CutPoint) -> f64 {
    if mu == 0.0 {
        return 0.0;
    }
    let [a1, a2, a3] = alphas.0;
    let n = anchor.x3.len() as f64;
    let anchor_sq: f64 = anchor.x2.iter().chain(&anchor.x3).map(|v| norm_sq(v)).sum::<f64>()
        + anchor.z.iter().map(|v| norm_sq(v)).sum::<f64>();
    mu * (a1 + (n + 1.0) * (a2 + a3) + anchor_sq)
}

/// Linearization cut `grad^T (w - v) + h(v) <= eps + inflation`, rearranged
/// into `grad^T w <= c`.
pub fn linearization_cut(
    layer: Layer,
    h_at_anchor: f64,
    grad: CutPoint,
    anchor: &CutPoint,
    eps: f64,
    inflation: f64,
    born_at: usize,
) -> Result<Cut> {
    if !grad.is_finite() || !h_at_anchor.is_finite() {
        return Err(AftoError::NonFinite {
            what: format!("layer-{} cut gradient", layer.name()),
            index: None,
        });
    }
    grad.check_shape(anchor)?;
    let c = eps + inflation - h_at_anchor + grad.dot(anchor);
    Ok(Cut {
        layer,
        id: 0,
        born_at,
        coef: grad,
        c,
    })
}

/// Layer-I mu-cut at `point = ({x3_j}, z1, z2', z3)` from a level-3 trace run
/// at `(z1, z2')`.
#[allow(clippy::too_many_arguments)]
pub fn generate_cut_i<P: TrilevelProblem + ?Sized>(
    problem: &P,
    trace: &UnrollTrace,
    point: &CutPoint,
    mu: f64,
    eps1: f64,
    alphas: &Bounds,
    mode: GradMode,
    born_at: usize,
) -> Result<Cut> {
    if trace.layer != Layer::I {
        return Err(AftoError::LayerMismatch {
            expected: Layer::I.name(),
            got: trace.layer.name(),
        });
    }
    let h = eval_h1(trace, &point.x3, &point.z[2])?;
    let grad = grad_h(problem, trace, point, mode)?;
    linearization_cut(Layer::I, h, grad, point, eps1, inflation_i(mu, alphas, point), born_at)
}

/// Layer-II mu-cut at `point = ({x2_j}, {x3_j}, z1, z2, z3)` from a level-2
/// trace run at `(z1, z3, {x3_j})`.
#[allow(clippy::too_many_arguments)]
pub fn generate_cut_ii<P: TrilevelProblem + ?Sized>(
    problem: &P,
    trace: &UnrollTrace,
    point: &CutPoint,
    mu: f64,
    eps2: f64,
    alphas: &Bounds,
    mode: GradMode,
    born_at: usize,
) -> Result<Cut> {
    if trace.layer != Layer::II {
        return Err(AftoError::LayerMismatch {
            expected: Layer::II.name(),
            got: trace.layer.name(),
        });
    }
    let h = eval_h2(trace, &point.x2, &point.z[1])?;
    let grad = grad_h(problem, trace, point, mode)?;
    linearization_cut(
        Layer::II,
        h,
        grad,
        point,
        eps2,
        inflation_ii(mu, alphas, point),
        born_at,
    )
}

/// Proposal distribution for [`validate_cut`].
pub trait PointSampler {
    fn propose(&mut self, rng: &mut ChaCha8Rng) -> CutPoint;
}

/// Uniform proposals inside the squared-norm balls of every block.
pub struct BallSampler {
    pub layout: CutPoint,
    pub bounds: Bounds,
}

impl BallSampler {
    pub fn new(layer: Layer, dims: Dims, bounds: Bounds) -> Self {
        BallSampler {
            layout: CutPoint::zeros(layer, dims),
            bounds,
        }
    }
}

/// Uniform sample from the ball `{u : ||u||^2 <= alpha}` in `d` dimensions.
pub fn uniform_in_ball(rng: &mut ChaCha8Rng, d: usize, alpha: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = norm_sq(&v).sqrt().max(1e-300);
    let r = alpha.sqrt() * rng.random::<f64>().powf(1.0 / d as f64);
    for x in v.iter_mut() {
        *x *= r / n;
    }
    v
}

impl PointSampler for BallSampler {
    fn propose(&mut self, rng: &mut ChaCha8Rng) -> CutPoint {
        let a = self.bounds.0;
        let mut p = self.layout.clone();
        for i in 0..3 {
            p.z[i] = uniform_in_ball(rng, p.z[i].len(), a[i]);
        }
        for v in p.x2.iter_mut() {
            *v = uniform_in_ball(rng, v.len(), a[1]);
        }
        for v in p.x3.iter_mut() {
            *v = uniform_in_ball(rng, v.len(), a[2]);
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Feasible points (`h <= eps`, inside the bounds) that were checked.
    pub checked: usize,
    pub violations: usize,
    /// Largest cut residual over the checked points.
    pub max_violation: f64,
    pub draws: usize,
    /// Set when the draw budget ran out before `n_samples` feasible points
    /// were found.
    pub inconclusive: bool,
}

/// Rejection-samples points of `{h <= eps}` inside the bounds and counts how
/// many violate `cut`. A valid cut for that region reports zero violations.
#[allow(clippy::too_many_arguments)]
pub fn validate_cut<H, S>(
    cut: &Cut,
    h: H,
    eps: f64,
    sampler: &mut S,
    bounds: &Bounds,
    n_samples: usize,
    max_draws: usize,
    seed: u64,
) -> ValidationReport
where
    H: Fn(&CutPoint) -> f64,
    S: PointSampler + ?Sized,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ValidationReport {
        checked: 0,
        violations: 0,
        max_violation: f64::NEG_INFINITY,
        draws: 0,
        inconclusive: false,
    };
    while report.checked < n_samples {
        if report.draws >= max_draws {
            report.inconclusive = true;
            break;
        }
        report.draws += 1;
        let p = sampler.propose(&mut rng);
        if !p.within(bounds) || !(h(&p) <= eps) {
            continue;
        }
        report.checked += 1;
        let r = cut.lhs(&p) - cut.c;
        report.max_violation = report.max_violation.max(r);
        if r > 0.0 {
            report.violations += 1;
        }
    }
    report
}

/// JSON export format for polytopes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolytopeSnapshot {
    pub layer: Layer,
    pub cuts: Vec<CutSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutSnapshot {
    pub id: u64,
    pub born_at: usize,
    /// `a_1, a_2, a_3`
    pub a: [Vec<f64>; 3],
    /// `b_{2,j}` per worker (empty for layer I).
    pub b2: Vec<Vec<f64>>,
    /// `b_{3,j}` per worker.
    pub b3: Vec<Vec<f64>>,
    pub c: f64,
}

impl From<&Polytope> for PolytopeSnapshot {
    fn from(p: &Polytope) -> Self {
        PolytopeSnapshot {
            layer: p.layer,
            cuts: p
                .cuts
                .iter()
                .map(|c| CutSnapshot {
                    id: c.id,
                    born_at: c.born_at,
                    a: c.coef.z.clone(),
                    b2: c.coef.x2.clone(),
                    b3: c.coef.x3.clone(),
                    c: c.c,
                })
                .collect(),
        }
    }
}
