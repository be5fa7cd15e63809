//! Outer primal-dual problem over the layer-II polytope.
//!
//! ```text
//!   L_p  = sum_j f1_j(x1_j, x2_j, x3_j) + sum_j theta_j^T (x1_j - z1)
//!        + sum_l lambda_l (lhs_l - c_l)
//!   L^_p = L_p - sum_l c1_t/2 lambda_l^2 - sum_j c2_t/2 ||theta_j||^2
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cuts::{CutPoint, Polytope};
use crate::error::{AftoError, Result};
use crate::linalg::{all_finite, axpy, dist_sq, dot, norm_sq, project_ball_sq_in_place, uniform_box};
use crate::problem::{Block, Bounds, DualState, Level, PrimalState, TrilevelProblem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OuterConfig {
    /// Worker step sizes per block.
    pub eta_x: [f64; 3],
    /// Master step sizes per block.
    pub eta_z: [f64; 3],
    pub eta_lambda: f64,
    pub eta_theta: f64,
    /// `lambda_l` lives in `[0, sqrt(alpha4)]`.
    pub alpha4: f64,
    /// `||theta_j||_inf <= sqrt(alpha5) / d1`.
    pub alpha5: f64,
    pub c1_floor: f64,
    pub c2_floor: f64,
    /// Stop once the squared stationarity gap is at most this.
    pub eps: f64,
    /// Refinement period.
    pub t_pre: usize,
    /// No refinement at or after this iteration.
    pub t1: usize,
    pub max_iters: usize,
    /// Project every primal block onto its norm ball after each update.
    pub project_bounds: bool,
    /// Stop at the first iteration whose squared gap is at most `eps`. When
    /// off, the run continues to `max_iters` and only records that iteration.
    pub stop_on_eps: bool,
}

impl Default for OuterConfig {
    fn default() -> Self {
        OuterConfig {
            eta_x: [0.1; 3],
            eta_z: [0.1; 3],
            eta_lambda: 0.1,
            eta_theta: 0.1,
            alpha4: 100.0,
            alpha5: 100.0,
            c1_floor: 1e-3,
            c2_floor: 1e-3,
            eps: 1e-4,
            t_pre: 10,
            t1: 200,
            max_iters: 5000,
            project_bounds: true,
            stop_on_eps: true,
        }
    }
}

impl OuterConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("eta_x1", self.eta_x[0]),
            ("eta_x2", self.eta_x[1]),
            ("eta_x3", self.eta_x[2]),
            ("eta_z1", self.eta_z[0]),
            ("eta_z2", self.eta_z[1]),
            ("eta_z3", self.eta_z[2]),
            ("eta_lambda", self.eta_lambda),
            ("eta_theta", self.eta_theta),
            ("alpha4", self.alpha4),
            ("alpha5", self.alpha5),
            ("c1_floor", self.c1_floor),
            ("c2_floor", self.c2_floor),
            ("eps", self.eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(AftoError::Config(format!("outer {name} must be positive, got {v}")));
            }
        }
        if self.t_pre == 0 {
            return Err(AftoError::Config("refinement period must be at least 1".into()));
        }
        if self.max_iters == 0 {
            return Err(AftoError::Config("max_iters must be at least 1".into()));
        }
        Ok(())
    }

    /// Largest admissible regularization floors for `n_cuts` layer-II cuts
    /// and `n` workers: `sqrt(eps / X) / eta` with
    /// `X = 4 M alpha4 / eta_lambda^2 + 4 N alpha5 / eta_theta^2`.
    pub fn floor_caps(&self, n_cuts: usize, n: usize) -> (f64, f64) {
        let x = 4.0 * n_cuts as f64 * self.alpha4 / self.eta_lambda.powi(2)
            + 4.0 * n as f64 * self.alpha5 / self.eta_theta.powi(2);
        let r = (self.eps / x).sqrt();
        (r / self.eta_lambda, r / self.eta_theta)
    }

    /// Checks the floors against [`OuterConfig::floor_caps`].
    pub fn check_floors(&self, n_cuts: usize, n: usize) -> Result<()> {
        let (cap1, cap2) = self.floor_caps(n_cuts, n);
        if self.c1_floor >= cap1 {
            return Err(AftoError::Config(format!(
                "c1_floor = {} must be below {cap1:.3e}",
                self.c1_floor
            )));
        }
        if self.c2_floor >= cap2 {
            return Err(AftoError::Config(format!(
                "c2_floor = {} must be below {cap2:.3e}",
                self.c2_floor
            )));
        }
        Ok(())
    }

    /// Regularization weights `(c1_t, c2_t)` at master iteration `t`.
    pub fn regularization(&self, t: usize) -> (f64, f64) {
        let decay = ((t + 1) as f64).powf(0.25);
        (
            self.c1_floor.max(1.0 / (self.eta_lambda * decay)),
            self.c2_floor.max(1.0 / (self.eta_theta * decay)),
        )
    }

    pub fn lambda_cap(&self) -> f64 {
        self.alpha4.sqrt()
    }

    pub fn theta_cap(&self, d1: usize) -> f64 {
        self.alpha5.sqrt() / d1 as f64
    }
}

/// Projection onto `[0, sqrt(alpha4)]`.
pub fn project_lambda(v: f64, alpha4: f64) -> f64 {
    v.clamp(0.0, alpha4.sqrt())
}

/// Projection onto the box `||theta||_inf <= sqrt(alpha5) / d1`.
pub fn project_theta(v: &mut [f64], alpha5: f64, d1: usize) {
    let cap = alpha5.sqrt() / d1 as f64;
    for x in v.iter_mut() {
        *x = x.clamp(-cap, cap);
    }
}

/// Outer state in cut-space layout.
pub fn cut_point(state: &PrimalState) -> CutPoint {
    CutPoint {
        z: state.z.clone(),
        x2: state.x[1].clone(),
        x3: state.x[2].clone(),
    }
}

/// Residuals `lhs_l - c_l` of the layer-II cuts at the outer state.
pub fn cut_residuals(state: &PrimalState, poly_ii: &Polytope) -> Vec<f64> {
    let p = cut_point(state);
    poly_ii.cuts.iter().map(|c| c.lhs(&p) - c.c).collect()
}

fn check_duals(state: &PrimalState, duals: &DualState, poly_ii: &Polytope) -> Result<()> {
    if duals.lambda.len() != poly_ii.len() {
        return Err(AftoError::Dimension {
            what: "lambda",
            expected: poly_ii.len(),
            got: duals.lambda.len(),
        });
    }
    if duals.theta.len() != state.x[0].len() {
        return Err(AftoError::Dimension {
            what: "theta",
            expected: state.x[0].len(),
            got: duals.theta.len(),
        });
    }
    Ok(())
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(AftoError::NonFinite {
            what: what.to_string(),
            index: None,
        })
    }
}

/// `L_p` at the given state.
pub fn lagrangian<P: TrilevelProblem + ?Sized>(
    state: &PrimalState,
    duals: &DualState,
    poly_ii: &Polytope,
    problem: &P,
) -> Result<f64> {
    check_duals(state, duals, poly_ii)?;
    let n = problem.dims().n;
    let mut v = 0.0;
    for j in 0..n {
        v += problem.eval(Level::One, j, &state.x[0][j], &state.x[1][j], &state.x[2][j]);
        v += duals.theta[j]
            .iter()
            .zip(state.x[0][j].iter().zip(&state.z[0]))
            .map(|(t, (x, z))| t * (x - z))
            .sum::<f64>();
    }
    v += dot(&duals.lambda, &cut_residuals(state, poly_ii));
    finite(v, "outer Lagrangian")
}

/// `L^_p` at master iteration `t`.
pub fn regularized_lagrangian<P: TrilevelProblem + ?Sized>(
    state: &PrimalState,
    duals: &DualState,
    poly_ii: &Polytope,
    problem: &P,
    cfg: &OuterConfig,
    t: usize,
) -> Result<f64> {
    let (c1, c2) = cfg.regularization(t);
    let lp = lagrangian(state, duals, poly_ii, problem)?;
    let theta_sq: f64 = duals.theta.iter().map(|v| norm_sq(v)).sum();
    finite(
        lp - 0.5 * c1 * norm_sq(&duals.lambda) - 0.5 * c2 * theta_sq,
        "regularized Lagrangian",
    )
}

/// Gradient of `L_p` (or of `L^_p` when `reg = Some((c1, c2))`) in every block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterGradient {
    pub x: [Vec<Vec<f64>>; 3],
    pub z: [Vec<f64>; 3],
    pub lambda: Vec<f64>,
    pub theta: Vec<Vec<f64>>,
}

/// Local-block gradient of `L^_p` for worker `j` (identical for `L_p`).
pub fn local_gradient<P: TrilevelProblem + ?Sized>(
    problem: &P,
    j: usize,
    x: [&[f64]; 3],
    duals: &DualState,
    poly_ii: &Polytope,
) -> [Vec<f64>; 3] {
    let mut g = Block::ALL.map(|b| problem.grad(Level::One, j, b, x[0], x[1], x[2]));
    axpy(&mut g[0], 1.0, &duals.theta[j]);
    for (cut, &lam) in poly_ii.cuts.iter().zip(&duals.lambda) {
        if lam != 0.0 {
            axpy(&mut g[1], lam, &cut.coef.x2[j]);
            axpy(&mut g[2], lam, &cut.coef.x3[j]);
        }
    }
    g
}

pub fn gradient<P: TrilevelProblem + ?Sized>(
    problem: &P,
    state: &PrimalState,
    duals: &DualState,
    poly_ii: &Polytope,
    reg: Option<(f64, f64)>,
) -> Result<OuterGradient> {
    check_duals(state, duals, poly_ii)?;
    let n = problem.dims().n;
    let mut gx: [Vec<Vec<f64>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for j in 0..n {
        let g = local_gradient(
            problem,
            j,
            [&state.x[0][j], &state.x[1][j], &state.x[2][j]],
            duals,
            poly_ii,
        );
        for (i, gi) in g.into_iter().enumerate() {
            gx[i].push(gi);
        }
    }
    let gz = consensus_gradient(duals, poly_ii, state.z[0].len(), [state.z[1].len(), state.z[2].len()]);
    let (c1, c2) = reg.unwrap_or((0.0, 0.0));
    let lambda = cut_residuals(state, poly_ii)
        .into_iter()
        .zip(&duals.lambda)
        .map(|(r, l)| r - c1 * l)
        .collect();
    let theta = (0..n)
        .map(|j| {
            (0..state.z[0].len())
                .map(|i| state.x[0][j][i] - state.z[0][i] - c2 * duals.theta[j][i])
                .collect()
        })
        .collect();
    let g = OuterGradient {
        x: gx,
        z: gz,
        lambda,
        theta,
    };
    let ok = g.z.iter().all(|v| all_finite(v))
        && g.x.iter().flatten().all(|v| all_finite(v))
        && all_finite(&g.lambda)
        && g.theta.iter().all(|v| all_finite(v));
    if !ok {
        return Err(AftoError::NonFinite {
            what: "outer gradient".into(),
            index: None,
        });
    }
    Ok(g)
}

/// `grad_z L_p`, which does not depend on `z` or `x`.
fn consensus_gradient(duals: &DualState, poly_ii: &Polytope, d1: usize, d23: [usize; 2]) -> [Vec<f64>; 3] {
    let mut g = [vec![0.0; d1], vec![0.0; d23[0]], vec![0.0; d23[1]]];
    for th in &duals.theta {
        axpy(&mut g[0], -1.0, th);
    }
    for (cut, &lam) in poly_ii.cuts.iter().zip(&duals.lambda) {
        for (gi, ai) in g.iter_mut().zip(&cut.coef.z) {
            axpy(gi, lam, ai);
        }
    }
    g
}

/// One worker update on its stale view of the duals and the polytope:
/// `x_{i,j} <- x_{i,j} - eta_{x_i} grad_{x_{i,j}} L^_p`.
pub fn worker_step<P: TrilevelProblem + ?Sized>(
    problem: &P,
    j: usize,
    x: [&[f64]; 3],
    stale_duals: &DualState,
    stale_poly: &Polytope,
    cfg: &OuterConfig,
) -> Result<[Vec<f64>; 3]> {
    let g = local_gradient(problem, j, x, stale_duals, stale_poly);
    let bounds = problem.bounds();
    let mut out = [x[0].to_vec(), x[1].to_vec(), x[2].to_vec()];
    for i in 0..3 {
        if !all_finite(&g[i]) {
            return Err(AftoError::NonFinite {
                what: format!("worker {j} gradient of block x{}", i + 1),
                index: None,
            });
        }
        axpy(&mut out[i], -cfg.eta_x[i], &g[i]);
        if cfg.project_bounds {
            project_ball_sq_in_place(&mut out[i], bounds.0[i]);
        }
    }
    Ok(out)
}

/// Order of the dual ascent relative to the consensus update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateOrder {
    /// `lambda` sees the new `z` (the prescribed order).
    GaussSeidel,
    /// `lambda` sees the old `z`; kept for regression comparison only.
    Jacobi,
}

/// Master update at iteration `t`: `z1`, `z2`, `z3` in turn, then the
/// projected ascent on `lambda` and `theta`. `state.x` must already hold the
/// fresh local blocks of this epoch.
pub fn master_step<P: TrilevelProblem + ?Sized>(
    problem: &P,
    state: &mut PrimalState,
    duals: &mut DualState,
    poly_ii: &Polytope,
    cfg: &OuterConfig,
    t: usize,
) -> Result<()> {
    master_step_ordered(problem, state, duals, poly_ii, cfg, t, UpdateOrder::GaussSeidel)
}

#[allow(clippy::too_many_arguments)]
pub fn master_step_ordered<P: TrilevelProblem + ?Sized>(
    problem: &P,
    state: &mut PrimalState,
    duals: &mut DualState,
    poly_ii: &Polytope,
    cfg: &OuterConfig,
    t: usize,
    order: UpdateOrder,
) -> Result<()> {
    check_duals(state, duals, poly_ii)?;
    let bounds: Bounds = problem.bounds();
    let (c1, c2) = cfg.regularization(t);
    let old_residuals = cut_residuals(state, poly_ii);

    let d1 = state.z[0].len();
    let gz = consensus_gradient(duals, poly_ii, d1, [state.z[1].len(), state.z[2].len()]);
    for i in 0..3 {
        // grad_z L^_p does not involve z, so z2 and z3 see the new z1 trivially
        axpy(&mut state.z[i], -cfg.eta_z[i], &gz[i]);
        if cfg.project_bounds {
            project_ball_sq_in_place(&mut state.z[i], bounds.0[i]);
        }
    }
    if !state.z.iter().all(|v| all_finite(v)) {
        return Err(AftoError::NonFinite {
            what: "consensus update".into(),
            index: None,
        });
    }

    let residuals = match order {
        UpdateOrder::GaussSeidel => cut_residuals(state, poly_ii),
        UpdateOrder::Jacobi => old_residuals,
    };
    for (lam, r) in duals.lambda.iter_mut().zip(residuals) {
        *lam = project_lambda(*lam + cfg.eta_lambda * (r - c1 * *lam), cfg.alpha4);
    }
    for (th, x1) in duals.theta.iter_mut().zip(&state.x[0]) {
        for i in 0..d1 {
            th[i] += cfg.eta_theta * (x1[i] - state.z[0][i] - c2 * th[i]);
        }
        project_theta(th, cfg.alpha5, d1);
    }
    if !all_finite(&duals.lambda) || !duals.theta.iter().all(|v| all_finite(v)) {
        return Err(AftoError::NonFinite {
            what: "dual update".into(),
            index: None,
        });
    }
    Ok(())
}

/// Blocks of the stationarity gap: primal gradients of `L_p` and the
/// projected-gradient residuals of the duals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapVector {
    pub x: [Vec<Vec<f64>>; 3],
    pub z: [Vec<f64>; 3],
    pub lambda: Vec<f64>,
    pub theta: Vec<Vec<f64>>,
}

impl GapVector {
    pub fn norm_sq(&self) -> f64 {
        self.x.iter().flatten().map(|v| norm_sq(v)).sum::<f64>()
            + self.z.iter().map(|v| norm_sq(v)).sum::<f64>()
            + norm_sq(&self.lambda)
            + self.theta.iter().map(|v| norm_sq(v)).sum::<f64>()
    }
}

/// Stationarity gap of the unregularized Lagrangian. The dual blocks are
/// `(v - P(v + eta grad_v L_p)) / eta`.
pub fn stationarity_gap<P: TrilevelProblem + ?Sized>(
    state: &PrimalState,
    duals: &DualState,
    poly_ii: &Polytope,
    problem: &P,
    cfg: &OuterConfig,
) -> Result<GapVector> {
    let g = gradient(problem, state, duals, poly_ii, None)?;
    let d1 = state.z[0].len();
    let lambda = duals
        .lambda
        .iter()
        .zip(&g.lambda)
        .map(|(l, gl)| (l - project_lambda(l + cfg.eta_lambda * gl, cfg.alpha4)) / cfg.eta_lambda)
        .collect();
    let theta = duals
        .theta
        .iter()
        .zip(&g.theta)
        .map(|(th, gt)| {
            let mut moved: Vec<f64> = th.iter().zip(gt).map(|(a, b)| a + cfg.eta_theta * b).collect();
            project_theta(&mut moved, cfg.alpha5, d1);
            th.iter().zip(&moved).map(|(a, b)| (a - b) / cfg.eta_theta).collect()
        })
        .collect();
    Ok(GapVector {
        x: g.x,
        z: g.z,
        lambda,
        theta,
    })
}

/// Constants of the step-size prescription; the theory-only ones default to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StepConstants {
    /// Number of layer-II cuts `M`.
    pub m: f64,
    pub gamma: f64,
    pub k1: f64,
    pub tau: f64,
    pub n: f64,
}

impl Default for StepConstants {
    fn default() -> Self {
        StepConstants {
            m: 1.0,
            gamma: 1.0,
            k1: 1.0,
            tau: 1.0,
            n: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSizes {
    /// Common value of every `eta_x_i` and `eta_z_i`.
    pub eta_primal: f64,
    pub eta_lambda: f64,
    pub eta_theta: f64,
    /// Cap on `eta_theta`.
    pub theta_cap: f64,
    /// Cap on `eta_lambda` and the name of the binding term.
    pub lambda_cap: f64,
    pub lambda_binding: String,
}

impl StepSizes {
    pub fn apply(&self, cfg: &mut OuterConfig) {
        cfg.eta_x = [self.eta_primal; 3];
        cfg.eta_z = [self.eta_primal; 3];
        cfg.eta_lambda = self.eta_lambda;
        cfg.eta_theta = self.eta_theta;
    }
}

/// Primal step sizes from a Lipschitz estimate and the configured dual steps
/// and floors. The initial regularization weights in the dual caps are taken
/// at the floors.
pub fn theorem1_step_sizes(l_est: f64, cfg: &OuterConfig, k: &StepConstants) -> Result<StepSizes> {
    if !(l_est > 0.0 && l_est.is_finite()) {
        return Err(AftoError::StepSize(format!(
            "Lipschitz estimate must be positive, got {l_est}"
        )));
    }
    let l = l_est;
    let (el, et) = (cfg.eta_lambda, cfg.eta_theta);
    let (c1, c2) = (cfg.c1_floor, cfg.c2_floor);
    let theta_cap = 2.0 / (l + 2.0 * c2);
    if et > theta_cap {
        return Err(AftoError::StepSize(format!(
            "η_θ ≤ 2/(L+2c₂⁰) violated: {et} > {theta_cap}"
        )));
    }
    let cap_reg = 2.0 / (l + 2.0 * c1);
    let cap_stale = 1.0 / (30.0 * k.tau * k.k1 * k.n * l * l);
    let (lambda_cap, lambda_binding) = if cap_reg <= cap_stale {
        (cap_reg, "η_λ < 2/(L+2c₁⁰)")
    } else {
        (cap_stale, "η_λ < 1/(30τk₁NL²)")
    };
    if el >= lambda_cap {
        return Err(AftoError::StepSize(format!(
            "{lambda_binding} violated: {el} >= {lambda_cap}"
        )));
    }
    let denom = l
        + el * k.m * l * l
        + et * k.n * l * l
        + 8.0 * (k.m * k.gamma * l * l / (el * c1 * c1) + k.n * k.gamma * l * l / (et * c2 * c2));
    let eta = 2.0 / denom;
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(AftoError::StepSize("no positive primal step size".into()));
    }
    Ok(StepSizes {
        eta_primal: eta,
        eta_lambda: el,
        eta_theta: et,
        theta_cap,
        lambda_cap,
        lambda_binding: lambda_binding.to_string(),
    })
}

/// Largest gradient-difference ratio over random pairs in `[-scale, scale]`,
/// taken over every level and worker with all three blocks stacked.
pub fn estimate_lipschitz<P: TrilevelProblem + ?Sized>(problem: &P, pairs: usize, scale: f64, seed: u64) -> f64 {
    let dims = problem.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stacked_grad = |level: Level, j: usize, x: &[Vec<f64>; 3]| -> Vec<f64> {
        Block::ALL
            .iter()
            .flat_map(|&b| problem.grad(level, j, b, &x[0], &x[1], &x[2]))
            .collect()
    };
    let draw = |rng: &mut ChaCha8Rng| {
        [
            uniform_box(rng, dims.d1, scale),
            uniform_box(rng, dims.d2, scale),
            uniform_box(rng, dims.d3, scale),
        ]
    };
    let mut best: f64 = 0.0;
    for _ in 0..pairs {
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let dx: f64 = (0..3).map(|i| dist_sq(&a[i], &b[i])).sum::<f64>().sqrt();
        if dx == 0.0 {
            continue;
        }
        for level in Level::ALL {
            for j in 0..dims.n {
                let ga = stacked_grad(level, j, &a);
                let gb = stacked_grad(level, j, &b);
                let r = dist_sq(&ga, &gb).sqrt() / dx;
                if r.is_finite() {
                    best = best.max(r);
                }
            }
        }
    }
    best
}
