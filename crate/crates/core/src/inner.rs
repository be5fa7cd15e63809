//! K-round unrolled augmented-Lagrangian solvers for the two lower levels.
//!
//! The level-3 unroll runs at frozen `(z1, z2')` and yields estimates
//! `(x̂_3, ẑ_3)`; the level-2 unroll runs at frozen `(z1, z3, {x_3,j})` under
//! the layer-I polytope and yields `(x̂_2, ẑ_2)`. The distance of a point to
//! those estimates is the constraint function `h_I` / `h_II`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cuts::{uniform_in_ball, CutPoint, Layer, PointSampler, Polytope};
use crate::error::{AftoError, Result};
use crate::linalg::{all_finite, axpy, default_fd_step, dist_sq, dot};
use crate::problem::{Block, Level, TrilevelProblem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InnerConfig {
    /// Communication rounds per unroll.
    pub rounds: usize,
    pub eta_x: f64,
    pub eta_z: f64,
    pub eta_phi: f64,
    pub kappa2: f64,
    pub kappa3: f64,
    pub rho2: f64,
    pub eps1: f64,
    pub eps2: f64,
    /// Start each unroll from the previous one's final snapshot.
    pub warm_start: bool,
    /// Without a warm snapshot, start refinement unrolls at the current outer
    /// blocks instead of zero. Needed when zero is a saddle of the lower
    /// level (tanh networks).
    pub start_from_outer: bool,
}

impl Default for InnerConfig {
    fn default() -> Self {
        InnerConfig {
            rounds: 5,
            eta_x: 0.1,
            eta_z: 0.1,
            eta_phi: 0.1,
            kappa2: 1.0,
            kappa3: 1.0,
            rho2: 1.0,
            eps1: 1e-2,
            eps2: 1e-2,
            warm_start: false,
            start_from_outer: false,
        }
    }
}

impl InnerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(AftoError::Config("inner rounds must be at least 1".into()));
        }
        let fields = [
            ("eta_x", self.eta_x),
            ("eta_z", self.eta_z),
            ("eta_phi", self.eta_phi),
            ("kappa2", self.kappa2),
            ("kappa3", self.kappa3),
            ("rho2", self.rho2),
            ("eps1", self.eps1),
            ("eps2", self.eps2),
        ];
        for (name, v) in fields {
            // zero steps are allowed (frozen unroll); everything else must be positive
            let ok = if name.starts_with("eta") {
                v >= 0.0 && v.is_finite()
            } else {
                v > 0.0 && v.is_finite()
            };
            if !ok {
                return Err(AftoError::Config(format!("inner {name} = {v} is out of range")));
            }
        }
        Ok(())
    }
}

/// Inner iterate after one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    /// Per-worker local copies (`x'_{3,j}` or `x'_{2,j}`).
    pub x: Vec<Vec<f64>>,
    /// Master copy (`z'_3` or `z'_2`).
    pub z: Vec<f64>,
    pub phi: Vec<Vec<f64>>,
    /// Layer-I cut duals (level-2 unrolls only).
    pub gamma: Vec<f64>,
    pub slack: Vec<f64>,
}

impl Snapshot {
    pub fn zeros(n: usize, dim: usize, n_cuts: usize) -> Self {
        Snapshot {
            x: vec![vec![0.0; dim]; n],
            z: vec![0.0; dim],
            phi: vec![vec![0.0; dim]; n],
            gamma: vec![0.0; n_cuts],
            slack: vec![0.0; n_cuts],
        }
    }

    /// Snapshot sitting at the outer blocks: `x'_j = phi_j = x_j`, `z' = z`.
    pub fn at(x: &[Vec<f64>], z: &[f64]) -> Self {
        Snapshot {
            x: x.to_vec(),
            z: z.to_vec(),
            phi: x.to_vec(),
            gamma: Vec::new(),
            slack: Vec::new(),
        }
    }

    fn is_finite(&self) -> bool {
        all_finite(&self.z)
            && all_finite(&self.gamma)
            && all_finite(&self.slack)
            && self.x.iter().chain(&self.phi).all(|v| all_finite(v))
    }

    fn shape_matches(&self, n: usize, dim: usize) -> bool {
        self.x.len() == n
            && self.phi.len() == n
            && self.z.len() == dim
            && self.x.iter().chain(&self.phi).all(|v| v.len() == dim)
    }

    /// Consensus residual `sum_j ||x_j - z||^2`.
    pub fn consensus_residual(&self) -> f64 {
        self.x.iter().map(|xj| dist_sq(xj, &self.z)).sum()
    }
}

/// Frozen outer variables an unroll was run at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TraceInputs {
    Level3 {
        z1: Vec<f64>,
        z2: Vec<f64>,
    },
    Level2 {
        z1: Vec<f64>,
        z3: Vec<f64>,
        x3: Vec<Vec<f64>>,
        cuts: Polytope,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnrollTrace {
    pub layer: Layer,
    pub inputs: TraceInputs,
    pub cfg: InnerConfig,
    /// `rounds + 1` snapshots, the first being the initialization.
    pub snapshots: Vec<Snapshot>,
}

impl UnrollTrace {
    pub fn initial(&self) -> &Snapshot {
        &self.snapshots[0]
    }

    pub fn last(&self) -> &Snapshot {
        self.snapshots.last().expect("trace has at least one snapshot")
    }

    /// Final layer-I cut duals `gamma^K`.
    pub fn gamma_final(&self) -> &[f64] {
        &self.last().gamma
    }
}

/// How the unroll is started.
#[derive(Debug, Clone, Default)]
pub enum InnerInit {
    #[default]
    Zeros,
    /// Start from this snapshot; falls back to zeros when the primal shapes
    /// no longer match. Cut multipliers and slacks are padded with zeros or
    /// truncated to the current polytope size.
    Warm(Snapshot),
}

impl InnerInit {
    fn resolve(&self, n: usize, dim: usize, n_cuts: usize) -> Snapshot {
        match self {
            InnerInit::Warm(s) if s.shape_matches(n, dim) => {
                let mut s = s.clone();
                s.gamma.resize(n_cuts, 0.0);
                s.slack.resize(n_cuts, 0.0);
                s
            }
            _ => Snapshot::zeros(n, dim, n_cuts),
        }
    }
}

fn check_len(what: &'static str, v: &[f64], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(AftoError::Dimension {
            what,
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

fn check_workers(what: &'static str, v: &[Vec<f64>], n: usize, dim: usize) -> Result<()> {
    if v.len() != n {
        return Err(AftoError::Dimension {
            what: "worker count",
            expected: n,
            got: v.len(),
        });
    }
    for vj in v {
        check_len(what, vj, dim)?;
    }
    Ok(())
}

/// Forward-mode tangent of an inner iterate.
#[derive(Debug, Clone)]
struct Tangent {
    x: Vec<Vec<f64>>,
    z: Vec<f64>,
    phi: Vec<Vec<f64>>,
    gamma: Vec<f64>,
    slack: Vec<f64>,
}

impl Tangent {
    fn zeros(s: &Snapshot) -> Self {
        Tangent {
            x: s.x.iter().map(|v| vec![0.0; v.len()]).collect(),
            z: vec![0.0; s.z.len()],
            phi: s.phi.iter().map(|v| vec![0.0; v.len()]).collect(),
            gamma: vec![0.0; s.gamma.len()],
            slack: vec![0.0; s.slack.len()],
        }
    }
}

fn hv<P: TrilevelProblem + ?Sized>(
    p: &P,
    level: Level,
    j: usize,
    along: Block,
    args: [&[f64]; 3],
    v: &[f64],
    wrt: Block,
) -> Result<Vec<f64>> {
    p.hess_vec(level, j, wrt, along, args[0], args[1], args[2], v)
        .ok_or(AftoError::NoSecondDerivatives)
}

/// Level-3 unroll with an optional tangent along `(dz1, dz2)`.
fn unroll3<P: TrilevelProblem + ?Sized>(
    problem: &P,
    z1: &[f64],
    z2: &[f64],
    init: Snapshot,
    cfg: &InnerConfig,
    seed_tangent: Option<(&[f64], &[f64])>,
) -> Result<(Vec<Snapshot>, Option<Tangent>)> {
    let n = problem.dims().n;
    let k3 = cfg.kappa3;
    let mut tan = seed_tangent.map(|_| Tangent::zeros(&init));
    let mut snaps = Vec::with_capacity(cfg.rounds + 1);
    snaps.push(init);
    for round in 0..cfg.rounds {
        let cur = snaps.last().unwrap();
        let mut next = cur.clone();
        let mut gz = vec![0.0; cur.z.len()];
        for j in 0..n {
            let mut gx = problem.grad(Level::Three, j, Block::X3, z1, z2, &cur.x[j]);
            for ((g, (&xj, &zk)), &ph) in gx.iter_mut().zip(cur.x[j].iter().zip(&cur.z)).zip(&cur.phi[j]) {
                *g += ph + k3 * (xj - zk);
            }
            for ((g, (&xj, &zk)), &ph) in gz.iter_mut().zip(cur.x[j].iter().zip(&cur.z)).zip(&cur.phi[j]) {
                *g -= ph + k3 * (xj - zk);
            }
            axpy(&mut next.x[j], -cfg.eta_x, &gx);
        }
        axpy(&mut next.z, -cfg.eta_z, &gz);
        for j in 0..n {
            for ((ph, &xj), &zk) in next.phi[j].iter_mut().zip(&next.x[j]).zip(&next.z) {
                *ph += cfg.eta_phi * (xj - zk);
            }
        }

        if let (Some(t), Some((dz1, dz2))) = (tan.as_mut(), seed_tangent) {
            let mut nt = t.clone();
            let mut dgz = vec![0.0; t.z.len()];
            for j in 0..n {
                let args = [z1, z2, &cur.x[j][..]];
                let mut dg = hv(problem, Level::Three, j, Block::X3, args, &t.x[j], Block::X3)?;
                let d1 = hv(problem, Level::Three, j, Block::X1, args, dz1, Block::X3)?;
                let d2 = hv(problem, Level::Three, j, Block::X2, args, dz2, Block::X3)?;
                for i in 0..dg.len() {
                    let cons = t.phi[j][i] + k3 * (t.x[j][i] - t.z[i]);
                    dg[i] += d1[i] + d2[i] + cons;
                    dgz[i] -= cons;
                }
                axpy(&mut nt.x[j], -cfg.eta_x, &dg);
            }
            axpy(&mut nt.z, -cfg.eta_z, &dgz);
            for j in 0..n {
                for i in 0..nt.z.len() {
                    nt.phi[j][i] += cfg.eta_phi * (nt.x[j][i] - nt.z[i]);
                }
            }
            *t = nt;
        }

        if !next.is_finite() {
            return Err(AftoError::UnrollDiverged {
                layer: "level-3",
                round: round + 1,
            });
        }
        snaps.push(next);
    }
    Ok((snaps, tan))
}

/// Runs `cfg.rounds` rounds of the level-3 primal-dual exchange at frozen
/// `(z1, z2')`.
pub fn solve_level3<P: TrilevelProblem + ?Sized>(
    problem: &P,
    z1: &[f64],
    z2: &[f64],
    init: &InnerInit,
    cfg: &InnerConfig,
) -> Result<UnrollTrace> {
    cfg.validate()?;
    let dims = problem.dims();
    check_len("z1", z1, dims.d1)?;
    check_len("z2", z2, dims.d2)?;
    let start = init.resolve(dims.n, dims.d3, 0);
    let (snapshots, _) = unroll3(problem, z1, z2, start, cfg, None)?;
    Ok(UnrollTrace {
        layer: Layer::I,
        inputs: TraceInputs::Level3 {
            z1: z1.to_vec(),
            z2: z2.to_vec(),
        },
        cfg: *cfg,
        snapshots,
    })
}

/// Layer-I cut left-hand side with `z2'` replaced by the inner iterate.
fn cut_lhs_i(poly: &Polytope, l: usize, z1: &[f64], z2: &[f64], z3: &[f64], x3: &[Vec<f64>]) -> f64 {
    let coef = &poly.cuts[l].coef;
    dot(&coef.z[0], z1)
        + dot(&coef.z[1], z2)
        + dot(&coef.z[2], z3)
        + coef.x3.iter().zip(x3).map(|(b, x)| dot(b, x)).sum::<f64>()
}

/// Tangent seed for the level-2 unroll inputs `(z1, z3, {x3_j})`.
struct Seed2<'a> {
    dz1: &'a [f64],
    dz3: &'a [f64],
    dx3: &'a [Vec<f64>],
}

#[allow(clippy::too_many_arguments)]
fn unroll2<P: TrilevelProblem + ?Sized>(
    problem: &P,
    z1: &[f64],
    z3: &[f64],
    x3: &[Vec<f64>],
    poly: &Polytope,
    init: Snapshot,
    cfg: &InnerConfig,
    seed: Option<Seed2<'_>>,
) -> Result<(Vec<Snapshot>, Option<Tangent>)> {
    let n = problem.dims().n;
    let m = poly.len();
    let (k2, rho) = (cfg.kappa2, cfg.rho2);
    let mut tan = seed.as_ref().map(|_| Tangent::zeros(&init));
    let mut snaps = Vec::with_capacity(cfg.rounds + 1);
    snaps.push(init);
    // Tangent of the frozen part of each cut's left-hand side.
    let dfixed: Vec<f64> = match &seed {
        Some(s) => (0..m)
            .map(|l| {
                let c = &poly.cuts[l].coef;
                dot(&c.z[0], s.dz1) + dot(&c.z[2], s.dz3) + c.x3.iter().zip(s.dx3).map(|(b, x)| dot(b, x)).sum::<f64>()
            })
            .collect(),
        None => Vec::new(),
    };

    for round in 0..cfg.rounds {
        let cur = snaps.last().unwrap();
        let mut next = cur.clone();
        let mut gz = vec![0.0; cur.z.len()];
        for j in 0..n {
            let mut gx = problem.grad(Level::Two, j, Block::X2, z1, &cur.x[j], &x3[j]);
            for i in 0..gx.len() {
                let cons = cur.phi[j][i] + k2 * (cur.x[j][i] - cur.z[i]);
                gx[i] += cons;
                gz[i] -= cons;
            }
            axpy(&mut next.x[j], -cfg.eta_x, &gx);
        }
        for l in 0..m {
            let r = cut_lhs_i(poly, l, z1, &cur.z, z3, x3) - poly.cuts[l].c + cur.slack[l];
            axpy(&mut gz, cur.gamma[l] + rho * r, &poly.cuts[l].coef.z[1]);
        }
        axpy(&mut next.z, -cfg.eta_z, &gz);

        let mut active_s = vec![false; m];
        let mut active_g = vec![false; m];
        for l in 0..m {
            let gap = cut_lhs_i(poly, l, z1, &next.z, z3, x3) - poly.cuts[l].c;
            let s = -gap - cur.gamma[l] / rho;
            active_s[l] = s > 0.0;
            next.slack[l] = s.max(0.0);
            let g = cur.gamma[l] + cfg.eta_phi * (gap + next.slack[l]);
            active_g[l] = g > 0.0;
            next.gamma[l] = g.max(0.0);
        }
        for j in 0..n {
            for i in 0..next.z.len() {
                next.phi[j][i] += cfg.eta_phi * (next.x[j][i] - next.z[i]);
            }
        }

        if let (Some(t), Some(s)) = (tan.as_mut(), seed.as_ref()) {
            let mut nt = t.clone();
            let mut dgz = vec![0.0; t.z.len()];
            for j in 0..n {
                let args = [z1, &cur.x[j][..], &x3[j][..]];
                let mut dg = hv(problem, Level::Two, j, Block::X2, args, &t.x[j], Block::X2)?;
                let d1 = hv(problem, Level::Two, j, Block::X1, args, s.dz1, Block::X2)?;
                let d3 = hv(problem, Level::Two, j, Block::X3, args, &s.dx3[j], Block::X2)?;
                for i in 0..dg.len() {
                    let cons = t.phi[j][i] + k2 * (t.x[j][i] - t.z[i]);
                    dg[i] += d1[i] + d3[i] + cons;
                    dgz[i] -= cons;
                }
                axpy(&mut nt.x[j], -cfg.eta_x, &dg);
            }
            for l in 0..m {
                let a2 = &poly.cuts[l].coef.z[1];
                let dr = dfixed[l] + dot(a2, &t.z) + t.slack[l];
                axpy(&mut dgz, t.gamma[l] + rho * dr, a2);
            }
            axpy(&mut nt.z, -cfg.eta_z, &dgz);
            for l in 0..m {
                let dgap = dfixed[l] + dot(&poly.cuts[l].coef.z[1], &nt.z);
                nt.slack[l] = if active_s[l] { -dgap - t.gamma[l] / rho } else { 0.0 };
                nt.gamma[l] = if active_g[l] {
                    t.gamma[l] + cfg.eta_phi * (dgap + nt.slack[l])
                } else {
                    0.0
                };
            }
            for j in 0..n {
                for i in 0..nt.z.len() {
                    nt.phi[j][i] += cfg.eta_phi * (nt.x[j][i] - nt.z[i]);
                }
            }
            *t = nt;
        }

        if !next.is_finite() {
            return Err(AftoError::UnrollDiverged {
                layer: "level-2",
                round: round + 1,
            });
        }
        snaps.push(next);
    }
    Ok((snaps, tan))
}

/// Runs `cfg.rounds` rounds of the level-2 primal-dual exchange at frozen
/// `(z1, z3, {x3_j})`, subject to the layer-I cuts in `poly_i`.
pub fn solve_level2<P: TrilevelProblem + ?Sized>(
    problem: &P,
    z1: &[f64],
    z3: &[f64],
    x3: &[Vec<f64>],
    poly_i: &Polytope,
    init: &InnerInit,
    cfg: &InnerConfig,
) -> Result<UnrollTrace> {
    cfg.validate()?;
    let dims = problem.dims();
    check_len("z1", z1, dims.d1)?;
    check_len("z3", z3, dims.d3)?;
    check_workers("x3", x3, dims.n, dims.d3)?;
    if poly_i.layer != Layer::I {
        return Err(AftoError::LayerMismatch {
            expected: Layer::I.name(),
            got: poly_i.layer.name(),
        });
    }
    let start = init.resolve(dims.n, dims.d2, poly_i.len());
    let (snapshots, _) = unroll2(problem, z1, z3, x3, poly_i, start, cfg, None)?;
    Ok(UnrollTrace {
        layer: Layer::II,
        inputs: TraceInputs::Level2 {
            z1: z1.to_vec(),
            z3: z3.to_vec(),
            x3: x3.to_vec(),
            cuts: poly_i.clone(),
        },
        cfg: *cfg,
        snapshots,
    })
}

fn deviation_sq(fin: &Snapshot, x: &[Vec<f64>], z: &[f64]) -> Result<f64> {
    check_workers("local block", x, fin.x.len(), fin.z.len())?;
    check_len("consensus block", z, fin.z.len())?;
    Ok(x.iter().zip(&fin.x).map(|(a, b)| dist_sq(a, b)).sum::<f64>() + dist_sq(z, &fin.z))
}

/// `h_I = sum_j ||x3_j - x̂3_j||^2 + ||z3 - ẑ3||^2` against the trace's final
/// snapshot.
pub fn eval_h1(trace: &UnrollTrace, x3: &[Vec<f64>], z3: &[f64]) -> Result<f64> {
    if trace.layer != Layer::I {
        return Err(AftoError::LayerMismatch {
            expected: Layer::I.name(),
            got: trace.layer.name(),
        });
    }
    deviation_sq(trace.last(), x3, z3)
}

/// `h_II = sum_j ||x2_j - x̂2_j||^2 + ||z2 - ẑ2||^2` against the trace's final
/// snapshot.
pub fn eval_h2(trace: &UnrollTrace, x2: &[Vec<f64>], z2: &[f64]) -> Result<f64> {
    if trace.layer != Layer::II {
        return Err(AftoError::LayerMismatch {
            expected: Layer::II.name(),
            got: trace.layer.name(),
        });
    }
    deviation_sq(trace.last(), x2, z2)
}

/// Re-runs the trace's unroll at the inputs carried by `point` (same
/// initialization and config) and returns the final snapshot.
pub fn rerun_at<P: TrilevelProblem + ?Sized>(problem: &P, trace: &UnrollTrace, point: &CutPoint) -> Result<Snapshot> {
    let init = trace.initial().clone();
    let snaps = match &trace.inputs {
        TraceInputs::Level3 { .. } => unroll3(problem, &point.z[0], &point.z[1], init, &trace.cfg, None)?.0,
        TraceInputs::Level2 { cuts, .. } => {
            unroll2(
                problem,
                &point.z[0],
                &point.z[2],
                &point.x3,
                cuts,
                init,
                &trace.cfg,
                None,
            )?
            .0
        }
    };
    Ok(snaps.into_iter().last().unwrap())
}

/// `h` of the trace's layer as a function of the whole cut-space point: the
/// unroll is re-run at the point's frozen inputs.
pub fn h_at<P: TrilevelProblem + ?Sized>(problem: &P, trace: &UnrollTrace, point: &CutPoint) -> Result<f64> {
    let fin = rerun_at(problem, trace, point)?;
    match trace.layer {
        Layer::I => deviation_sq(&fin, &point.x3, &point.z[2]),
        Layer::II => deviation_sq(&fin, &point.x2, &point.z[1]),
    }
}

/// The trace's input blocks, laid out as a cut-space point.
pub fn trace_anchor(trace: &UnrollTrace, free_x: &[Vec<f64>], free_z: &[f64]) -> CutPoint {
    match &trace.inputs {
        TraceInputs::Level3 { z1, z2 } => CutPoint {
            z: [z1.clone(), z2.clone(), free_z.to_vec()],
            x2: Vec::new(),
            x3: free_x.to_vec(),
        },
        TraceInputs::Level2 { z1, z3, x3, .. } => CutPoint {
            z: [z1.clone(), free_z.to_vec(), z3.clone()],
            x2: free_x.to_vec(),
            x3: x3.clone(),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradMode {
    #[default]
    FiniteDiff,
    AnalyticUnroll,
}

fn same(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x == y)
}

/// Gradient of `h` (the trace's layer) at `point` over every cut-space block.
///
/// The point's frozen-input blocks must be the ones the trace was run at.
/// The free blocks get `2 (v - v̂)` directly; the input blocks are
/// differentiated through the unroll either by re-running it at perturbed
/// inputs or by forward-mode tangents through the recorded snapshots.
pub fn grad_h<P: TrilevelProblem + ?Sized>(
    problem: &P,
    trace: &UnrollTrace,
    point: &CutPoint,
    mode: GradMode,
) -> Result<CutPoint> {
    let fin = trace.last();
    let (free_x, free_z) = match trace.layer {
        Layer::I => (&point.x3, &point.z[2]),
        Layer::II => (&point.x2, &point.z[1]),
    };
    deviation_sq(fin, free_x, free_z)?;
    let matches = match &trace.inputs {
        TraceInputs::Level3 { z1, z2 } => same(z1, &point.z[0]) && same(z2, &point.z[1]),
        TraceInputs::Level2 { z1, z3, x3, .. } => {
            same(z1, &point.z[0])
                && same(z3, &point.z[2])
                && x3.len() == point.x3.len()
                && x3.iter().zip(&point.x3).all(|(a, b)| same(a, b))
        }
    };
    if !matches {
        return Err(AftoError::Config(
            "grad_h point does not carry the inputs the trace was run at".into(),
        ));
    }

    let mut g = CutPoint {
        z: [
            vec![0.0; point.z[0].len()],
            vec![0.0; point.z[1].len()],
            vec![0.0; point.z[2].len()],
        ],
        x2: point.x2.iter().map(|v| vec![0.0; v.len()]).collect(),
        x3: point.x3.iter().map(|v| vec![0.0; v.len()]).collect(),
    };
    // free blocks
    let dx: Vec<Vec<f64>> = free_x
        .iter()
        .zip(&fin.x)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p - q).collect())
        .collect();
    let dz: Vec<f64> = free_z.iter().zip(&fin.z).map(|(p, q)| p - q).collect();
    match trace.layer {
        Layer::I => {
            for (gj, d) in g.x3.iter_mut().zip(&dx) {
                axpy(gj, 2.0, d);
            }
            axpy(&mut g.z[2], 2.0, &dz);
        }
        Layer::II => {
            for (gj, d) in g.x2.iter_mut().zip(&dx) {
                axpy(gj, 2.0, d);
            }
            axpy(&mut g.z[1], 2.0, &dz);
        }
    }

    // input blocks, one coordinate at a time
    let coords = input_coords(trace.layer, point);
    match mode {
        GradMode::FiniteDiff => {
            for c in coords {
                let base = c.get(point);
                let step = default_fd_step(c.block(point));
                let mut plus = point.clone();
                c.set(&mut plus, base + step);
                let mut minus = point.clone();
                c.set(&mut minus, base - step);
                let hp = h_at(problem, trace, &plus)?;
                let hm = h_at(problem, trace, &minus)?;
                let d = (hp - hm) / (2.0 * step);
                if !d.is_finite() {
                    return Err(AftoError::NonFinite {
                        what: format!("finite-difference h_{} gradient", trace.layer.name()),
                        index: None,
                    });
                }
                c.set(&mut g, d);
            }
        }
        GradMode::AnalyticUnroll => {
            if !problem.has_second_derivatives() {
                return Err(AftoError::NoSecondDerivatives);
            }
            let init = trace.initial().clone();
            for c in coords {
                let mut dir = CutPoint {
                    z: [
                        vec![0.0; point.z[0].len()],
                        vec![0.0; point.z[1].len()],
                        vec![0.0; point.z[2].len()],
                    ],
                    x2: Vec::new(),
                    x3: point.x3.iter().map(|v| vec![0.0; v.len()]).collect(),
                };
                c.set(&mut dir, 1.0);
                let tan = match &trace.inputs {
                    TraceInputs::Level3 { z1, z2 } => {
                        unroll3(problem, z1, z2, init.clone(), &trace.cfg, Some((&dir.z[0], &dir.z[1])))?.1
                    }
                    TraceInputs::Level2 { z1, z3, x3, cuts } => {
                        let seed = Seed2 {
                            dz1: &dir.z[0],
                            dz3: &dir.z[2],
                            dx3: &dir.x3,
                        };
                        unroll2(problem, z1, z3, x3, cuts, init.clone(), &trace.cfg, Some(seed))?.1
                    }
                }
                .expect("tangent requested");
                let d = -2.0 * (dx.iter().zip(&tan.x).map(|(a, b)| dot(a, b)).sum::<f64>() + dot(&dz, &tan.z));
                c.set(&mut g, d);
            }
        }
    }
    Ok(g)
}

/// A scalar coordinate of a cut-space point.
#[derive(Debug, Clone, Copy)]
enum Coord {
    Z(usize, usize),
    X3(usize, usize),
}

impl Coord {
    fn block<'a>(&self, p: &'a CutPoint) -> &'a [f64] {
        match *self {
            Coord::Z(b, _) => &p.z[b],
            Coord::X3(j, _) => &p.x3[j],
        }
    }
    fn get(&self, p: &CutPoint) -> f64 {
        match *self {
            Coord::Z(b, i) => p.z[b][i],
            Coord::X3(j, i) => p.x3[j][i],
        }
    }
    fn set(&self, p: &mut CutPoint, v: f64) {
        match *self {
            Coord::Z(b, i) => p.z[b][i] = v,
            Coord::X3(j, i) => p.x3[j][i] = v,
        }
    }
}

fn input_coords(layer: Layer, p: &CutPoint) -> Vec<Coord> {
    let mut out: Vec<Coord> = (0..p.z[0].len()).map(|i| Coord::Z(0, i)).collect();
    match layer {
        Layer::I => out.extend((0..p.z[1].len()).map(|i| Coord::Z(1, i))),
        Layer::II => {
            out.extend((0..p.z[2].len()).map(|i| Coord::Z(2, i)));
            for (j, xj) in p.x3.iter().enumerate() {
                out.extend((0..xj.len()).map(|i| Coord::X3(j, i)));
            }
        }
    }
    out
}

/// Level-3 augmented Lagrangian `L_{p,3}` at an inner iterate.
pub fn lagrangian3<P: TrilevelProblem + ?Sized>(problem: &P, z1: &[f64], z2: &[f64], s: &Snapshot, kappa3: f64) -> f64 {
    (0..problem.dims().n)
        .map(|j| {
            problem.eval(Level::Three, j, z1, z2, &s.x[j])
                + s.phi[j]
                    .iter()
                    .zip(s.x[j].iter().zip(&s.z))
                    .map(|(p, (x, z))| p * (x - z))
                    .sum::<f64>()
                + 0.5 * kappa3 * dist_sq(&s.x[j], &s.z)
        })
        .sum()
}

/// Gradients of `L_{p,3}` with respect to each `x'_{3,j}` and `z'_3`.
pub fn lagrangian3_grad<P: TrilevelProblem + ?Sized>(
    problem: &P,
    z1: &[f64],
    z2: &[f64],
    s: &Snapshot,
    kappa3: f64,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut gz = vec![0.0; s.z.len()];
    let gx = (0..problem.dims().n)
        .map(|j| {
            let mut g = problem.grad(Level::Three, j, Block::X3, z1, z2, &s.x[j]);
            for i in 0..g.len() {
                let cons = s.phi[j][i] + kappa3 * (s.x[j][i] - s.z[i]);
                g[i] += cons;
                gz[i] -= cons;
            }
            g
        })
        .collect();
    (gx, gz)
}

/// Level-2 augmented Lagrangian `L_{p,2}` at an inner iterate.
#[allow(clippy::too_many_arguments)]
pub fn lagrangian2<P: TrilevelProblem + ?Sized>(
    problem: &P,
    z1: &[f64],
    z3: &[f64],
    x3: &[Vec<f64>],
    poly_i: &Polytope,
    s: &Snapshot,
    cfg: &InnerConfig,
) -> f64 {
    let consensus: f64 = (0..problem.dims().n)
        .map(|j| {
            problem.eval(Level::Two, j, z1, &s.x[j], &x3[j])
                + s.phi[j]
                    .iter()
                    .zip(s.x[j].iter().zip(&s.z))
                    .map(|(p, (x, z))| p * (x - z))
                    .sum::<f64>()
                + 0.5 * cfg.kappa2 * dist_sq(&s.x[j], &s.z)
        })
        .sum();
    let cuts: f64 = (0..poly_i.len())
        .map(|l| {
            let r = cut_lhs_i(poly_i, l, z1, &s.z, z3, x3) - poly_i.cuts[l].c + s.slack[l];
            s.gamma[l] * r + 0.5 * cfg.rho2 * r * r
        })
        .sum();
    consensus + cuts
}

/// Gradients of `L_{p,2}` with respect to each `x'_{2,j}` and `z'_2`.
#[allow(clippy::too_many_arguments)]
pub fn lagrangian2_grad<P: TrilevelProblem + ?Sized>(
    problem: &P,
    z1: &[f64],
    z3: &[f64],
    x3: &[Vec<f64>],
    poly_i: &Polytope,
    s: &Snapshot,
    cfg: &InnerConfig,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut gz = vec![0.0; s.z.len()];
    let gx = (0..problem.dims().n)
        .map(|j| {
            let mut g = problem.grad(Level::Two, j, Block::X2, z1, &s.x[j], &x3[j]);
            for i in 0..g.len() {
                let cons = s.phi[j][i] + cfg.kappa2 * (s.x[j][i] - s.z[i]);
                g[i] += cons;
                gz[i] -= cons;
            }
            g
        })
        .collect();
    for l in 0..poly_i.len() {
        let r = cut_lhs_i(poly_i, l, z1, &s.z, z3, x3) - poly_i.cuts[l].c + s.slack[l];
        axpy(&mut gz, s.gamma[l] + cfg.rho2 * r, &poly_i.cuts[l].coef.z[1]);
    }
    (gx, gz)
}

/// Proposals concentrated on `{h <= eps}` for cut validation. The trace's
/// input blocks are drawn within `radius` of the anchor, the unroll is re-run
/// there, and the free blocks land within `sqrt(eps)` of its endpoint.
pub struct TraceSampler<'a, P: ?Sized> {
    pub problem: &'a P,
    pub trace: &'a UnrollTrace,
    pub anchor: CutPoint,
    pub radius: f64,
    pub eps: f64,
}

impl<P: TrilevelProblem + ?Sized> PointSampler for TraceSampler<'_, P> {
    fn propose(&mut self, rng: &mut ChaCha8Rng) -> CutPoint {
        let r2 = self.radius * self.radius;
        let mut p = self.anchor.clone();
        let shift = |v: &mut Vec<f64>, rng: &mut ChaCha8Rng, a: f64| {
            let u = uniform_in_ball(rng, v.len(), a);
            axpy(v, 1.0, &u);
        };
        shift(&mut p.z[0], rng, r2);
        match self.trace.layer {
            Layer::I => shift(&mut p.z[1], rng, r2),
            Layer::II => {
                shift(&mut p.z[2], rng, r2);
                for v in p.x3.iter_mut() {
                    shift(v, rng, r2);
                }
            }
        }
        let Ok(fin) = rerun_at(self.problem, self.trace, &p) else {
            return p;
        };
        let share = self.eps / (fin.x.len() + 1) as f64;
        let (xs, zi) = match self.trace.layer {
            Layer::I => (&mut p.x3, 2),
            Layer::II => (&mut p.x2, 1),
        };
        *xs = fin.x.clone();
        for v in xs.iter_mut() {
            shift(v, rng, share);
        }
        p.z[zi] = fin.z.clone();
        shift(&mut p.z[zi], rng, share);
        p
    }
}
