//! Synthetic quadratic trilevel problem with a nested closed-form oracle.
//!
//! ```text
//!   f3_j = 1/2 ||x3 - A3_j x1 - B3_j x2 - t3_j||^2_{Q3_j}
//!   f2_j = 1/2 ||x2 - A2_j x1 - t2_j||^2_{Q2_j}
//!   f1_j = 1/2 ||x1 - c1_j||^2_{P1_j} + 1/2 ||x2 - c2_j||^2_{P2_j} + 1/2 ||x3 - c3_j||^2_{P3_j}
//! ```
//!
//! The level-3 consensus argmin is affine in `(x1, x2)`, the level-2 one is
//! affine in `x1`, and substituting both into level 1 leaves a strongly convex
//! quadratic in `x1`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AftoError, Result};
use crate::problem::{Block, Bounds, Dims, DualState, Level, PrimalState, TrilevelProblem};

#[derive(Debug, Clone)]
pub struct Level3Term {
    pub q: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub t: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct Level2Term {
    pub q: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub t: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct Level1Term {
    pub p: [DMatrix<f64>; 3],
    pub center: [DVector<f64>; 3],
}

#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    dims: Dims,
    pub level1: Vec<Level1Term>,
    pub level2: Vec<Level2Term>,
    pub level3: Vec<Level3Term>,
    pub bounds: Bounds,
    pub mu: f64,
}

/// Nested argmin of the quadratic problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticOracle {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub x3: Vec<f64>,
    /// Seeds skipped because they produced a singular system.
    pub regenerations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadraticSpec {
    pub d1: usize,
    pub d2: usize,
    pub d3: usize,
    pub workers: usize,
    pub seed: u64,
    /// Eigenvalue ratio of the random SPD weights.
    pub conditioning: f64,
    /// Spread of the per-worker level-1 centers around the oracle.
    pub heterogeneity: f64,
    /// Scale of the cross-level coupling matrices.
    pub coupling: f64,
    /// Positive factor on every level-1 weight.
    pub level1_scale: f64,
    /// Scale of the oracle point itself.
    pub spread: f64,
}

impl Default for QuadraticSpec {
    fn default() -> Self {
        QuadraticSpec {
            d1: 2,
            d2: 2,
            d3: 2,
            workers: 2,
            seed: 0,
            conditioning: 2.0,
            heterogeneity: 0.5,
            coupling: 0.5,
            level1_scale: 1.0,
            spread: 1.0,
        }
    }
}

fn dv(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

/// Random symmetric positive-definite matrix with eigenvalues log-spaced in
/// `[1, cond]`.
fn random_spd(rng: &mut ChaCha8Rng, d: usize, cond: f64) -> DMatrix<f64> {
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    let q = g.qr().q();
    let eig = DVector::from_fn(d, |i, _| {
        if d == 1 {
            1.0
        } else {
            cond.powf(i as f64 / (d - 1) as f64)
        }
    });
    let m: DMatrix<f64> = &q * DMatrix::from_diagonal(&eig) * q.transpose();
    (&m + m.transpose()) * 0.5
}

fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * Distribution::<f64>::sample(&StandardNormal, rng))
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(d, |_, _| scale * Distribution::<f64>::sample(&StandardNormal, rng))
}

fn solve_spd(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.solve(rhs))
        .ok_or_else(|| AftoError::Config("singular system in the quadratic oracle".into()))
}

/// Affine lower-level responses `x2 = M21 x1 + m2`, `x3 = N31 x1 + N32 x2 + n3`.
struct Responses {
    m21: DMatrix<f64>,
    m2: DVector<f64>,
    n31: DMatrix<f64>,
    n32: DMatrix<f64>,
    n3: DVector<f64>,
}

impl QuadraticProblem {
    pub fn from_parts(
        dims: Dims,
        level1: Vec<Level1Term>,
        level2: Vec<Level2Term>,
        level3: Vec<Level3Term>,
    ) -> Result<Self> {
        dims.validate()?;
        for (what, len) in [
            ("level-1 terms", level1.len()),
            ("level-2 terms", level2.len()),
            ("level-3 terms", level3.len()),
        ] {
            if len != dims.n {
                return Err(AftoError::Dimension {
                    what,
                    expected: dims.n,
                    got: len,
                });
            }
        }
        Ok(QuadraticProblem {
            dims,
            level1,
            level2,
            level3,
            bounds: Bounds::default(),
            mu: 0.0,
        })
    }

    /// Identity weights, no coupling, every center at the origin.
    pub fn identity(dims: Dims) -> Result<Self> {
        let d = [dims.d1, dims.d2, dims.d3];
        let l1 = Level1Term {
            p: d.map(|k| DMatrix::identity(k, k)),
            center: d.map(DVector::zeros),
        };
        let l2 = Level2Term {
            q: DMatrix::identity(dims.d2, dims.d2),
            a: DMatrix::zeros(dims.d2, dims.d1),
            t: DVector::zeros(dims.d2),
        };
        let l3 = Level3Term {
            q: DMatrix::identity(dims.d3, dims.d3),
            a: DMatrix::zeros(dims.d3, dims.d1),
            b: DMatrix::zeros(dims.d3, dims.d2),
            t: DVector::zeros(dims.d3),
        };
        Self::from_parts(dims, vec![l1; dims.n], vec![l2; dims.n], vec![l3; dims.n])
    }

    pub fn with_bounds(mut self, bounds: Bounds) -> Self {
        self.bounds = bounds;
        self
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.mu = mu;
        self
    }

    fn responses(&self) -> Result<Responses> {
        let Dims { d1, d2, d3, .. } = self.dims;
        let mut s3 = DMatrix::zeros(d3, d3);
        let mut qa3 = DMatrix::zeros(d3, d1);
        let mut qb3 = DMatrix::zeros(d3, d2);
        let mut qt3 = DMatrix::zeros(d3, 1);
        for t in &self.level3 {
            s3 += &t.q;
            qa3 += &t.q * &t.a;
            qb3 += &t.q * &t.b;
            qt3 += &t.q * &t.t;
        }
        let mut s2 = DMatrix::zeros(d2, d2);
        let mut qa2 = DMatrix::zeros(d2, d1);
        let mut qt2 = DMatrix::zeros(d2, 1);
        for t in &self.level2 {
            s2 += &t.q;
            qa2 += &t.q * &t.a;
            qt2 += &t.q * &t.t;
        }
        Ok(Responses {
            m21: solve_spd(&s2, &qa2)?,
            m2: solve_spd(&s2, &qt2)?.column(0).into_owned(),
            n31: solve_spd(&s3, &qa3)?,
            n32: solve_spd(&s3, &qb3)?,
            n3: solve_spd(&s3, &qt3)?.column(0).into_owned(),
        })
    }

    /// Level-3 consensus argmin at `(x1, x2)`.
    pub fn level3_response(&self, x1: &[f64], x2: &[f64]) -> Result<Vec<f64>> {
        let r = self.responses()?;
        Ok((&r.n31 * dv(x1) + &r.n32 * dv(x2) + &r.n3).as_slice().to_vec())
    }

    /// Level-2 consensus argmin at `x1` (level 2 does not depend on `x3`).
    pub fn level2_response(&self, x1: &[f64]) -> Result<Vec<f64>> {
        let r = self.responses()?;
        Ok((&r.m21 * dv(x1) + &r.m2).as_slice().to_vec())
    }

    /// Nested closed-form argmin: level 3 into level 2 into level 1.
    pub fn oracle(&self) -> Result<QuadraticOracle> {
        let r = self.responses()?;
        let n3_total = &r.n31 + &r.n32 * &r.m21;
        let n3_off = &r.n32 * &r.m2 + &r.n3;
        let d1 = self.dims.d1;
        let mut h = DMatrix::zeros(d1, d1);
        let mut rhs = DVector::zeros(d1);
        for t in &self.level1 {
            h += &t.p[0];
            rhs += &t.p[0] * &t.center[0];
            h += r.m21.transpose() * &t.p[1] * &r.m21;
            rhs += r.m21.transpose() * &t.p[1] * (&t.center[1] - &r.m2);
            h += n3_total.transpose() * &t.p[2] * &n3_total;
            rhs += n3_total.transpose() * &t.p[2] * (&t.center[2] - &n3_off);
        }
        let x1 = solve_spd(&h, &DMatrix::from_column_slice(d1, 1, rhs.as_slice()))?
            .column(0)
            .into_owned();
        let x2 = &r.m21 * &x1 + &r.m2;
        let x3 = &r.n31 * &x1 + &r.n32 * &x2 + &r.n3;
        Ok(QuadraticOracle {
            x1: x1.as_slice().to_vec(),
            x2: x2.as_slice().to_vec(),
            x3: x3.as_slice().to_vec(),
            regenerations: 0,
        })
    }

    /// Primal state with every block at the oracle, plus the consensus
    /// multipliers that make it stationary (`theta_j = -grad_{x1} f1_j`).
    pub fn oracle_state(&self, oracle: &QuadraticOracle) -> (PrimalState, DualState) {
        let point = [oracle.x1.clone(), oracle.x2.clone(), oracle.x3.clone()];
        let state = PrimalState::at_consensus(self.dims, &point);
        let theta = (0..self.dims.n)
            .map(|j| {
                self.grad(Level::One, j, Block::X1, &oracle.x1, &oracle.x2, &oracle.x3)
                    .into_iter()
                    .map(|g| -g)
                    .collect()
            })
            .collect();
        (
            state,
            DualState {
                lambda: Vec::new(),
                theta,
            },
        )
    }

    /// Residual `r` and its block Jacobians for the level-2/3 terms.
    fn lower_residual(&self, level: Level, j: usize, x1: &[f64], x2: &[f64], x3: &[f64]) -> DVector<f64> {
        match level {
            Level::Three => {
                let t = &self.level3[j];
                dv(x3) - &t.a * dv(x1) - &t.b * dv(x2) - &t.t
            }
            Level::Two => {
                let t = &self.level2[j];
                dv(x2) - &t.a * dv(x1) - &t.t
            }
            Level::One => unreachable!(),
        }
    }

    /// Jacobian of the lower-level residual with respect to `block`, or
    /// `None` when the residual does not depend on it.
    fn lower_jac(&self, level: Level, j: usize, block: Block) -> Option<DMatrix<f64>> {
        match (level, block) {
            (Level::Three, Block::X3) => Some(DMatrix::identity(self.dims.d3, self.dims.d3)),
            (Level::Three, Block::X1) => Some(-&self.level3[j].a),
            (Level::Three, Block::X2) => Some(-&self.level3[j].b),
            (Level::Two, Block::X2) => Some(DMatrix::identity(self.dims.d2, self.dims.d2)),
            (Level::Two, Block::X1) => Some(-&self.level2[j].a),
            (Level::Two, Block::X3) => None,
            (Level::One, _) => unreachable!(),
        }
    }

    fn lower_q(&self, level: Level, j: usize) -> &DMatrix<f64> {
        match level {
            Level::Three => &self.level3[j].q,
            Level::Two => &self.level2[j].q,
            Level::One => unreachable!(),
        }
    }
}

impl TrilevelProblem for QuadraticProblem {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn eval(&self, level: Level, j: usize, x1: &[f64], x2: &[f64], x3: &[f64]) -> f64 {
        match level {
            Level::One => {
                let t = &self.level1[j];
                [x1, x2, x3]
                    .iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let r = dv(x) - &t.center[i];
                        0.5 * r.dot(&(&t.p[i] * &r))
                    })
                    .sum()
            }
            _ => {
                let r = self.lower_residual(level, j, x1, x2, x3);
                0.5 * r.dot(&(self.lower_q(level, j) * &r))
            }
        }
    }

    fn grad(&self, level: Level, j: usize, block: Block, x1: &[f64], x2: &[f64], x3: &[f64]) -> Vec<f64> {
        match level {
            Level::One => {
                let t = &self.level1[j];
                let i = block.index();
                let x = [x1, x2, x3][i];
                (&t.p[i] * (dv(x) - &t.center[i])).as_slice().to_vec()
            }
            _ => match self.lower_jac(level, j, block) {
                Some(jac) => {
                    let r = self.lower_residual(level, j, x1, x2, x3);
                    (jac.transpose() * (self.lower_q(level, j) * r)).as_slice().to_vec()
                }
                None => vec![0.0; self.dims.block(block)],
            },
        }
    }

    fn hess_vec(
        &self,
        level: Level,
        j: usize,
        wrt: Block,
        along: Block,
        _x1: &[f64],
        _x2: &[f64],
        _x3: &[f64],
        v: &[f64],
    ) -> Option<Vec<f64>> {
        let out = match level {
            Level::One => {
                if wrt == along {
                    (&self.level1[j].p[wrt.index()] * dv(v)).as_slice().to_vec()
                } else {
                    vec![0.0; self.dims.block(wrt)]
                }
            }
            _ => match (self.lower_jac(level, j, wrt), self.lower_jac(level, j, along)) {
                (Some(jw), Some(ja)) => (jw.transpose() * self.lower_q(level, j) * (ja * dv(v)))
                    .as_slice()
                    .to_vec(),
                _ => vec![0.0; self.dims.block(wrt)],
            },
        };
        Some(out)
    }

    fn has_second_derivatives(&self) -> bool {
        true
    }

    fn bounds(&self) -> Bounds {
        self.bounds
    }

    fn weak_convexity_mu(&self) -> f64 {
        self.mu
    }
}

const MAX_REGENERATIONS: usize = 16;

/// Random quadratic trilevel problem and its nested argmin.
///
/// The level-1 centers are placed so that a randomly drawn point is the
/// oracle: `c2_j`, `c3_j` are its lower-level responses and the `c1_j`
/// scatter around it with weighted mean zero offset.
pub fn build_quadratic_problem(spec: &QuadraticSpec) -> Result<(QuadraticProblem, QuadraticOracle)> {
    let dims = Dims::new(spec.d1, spec.d2, spec.d3, spec.workers)?;
    if !(spec.conditioning >= 1.0) || !(spec.level1_scale > 0.0) {
        return Err(AftoError::Config(
            "conditioning must be >= 1 and level1_scale positive".into(),
        ));
    }
    let mut seed = spec.seed;
    for regen in 0..MAX_REGENERATIONS {
        match try_build(dims, spec, seed) {
            Ok((p, mut o)) => {
                o.regenerations = regen;
                return Ok((p, o));
            }
            Err(AftoError::Config(msg)) if msg.contains("singular") => {
                seed = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
            }
            Err(e) => return Err(e),
        }
    }
    Err(AftoError::Config(format!(
        "quadratic builder produced singular systems for {MAX_REGENERATIONS} seeds"
    )))
}

fn try_build(dims: Dims, spec: &QuadraticSpec, seed: u64) -> Result<(QuadraticProblem, QuadraticOracle)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let Dims { d1, d2, d3, n } = dims;
    let cond = spec.conditioning;
    let level3: Vec<Level3Term> = (0..n)
        .map(|_| Level3Term {
            q: random_spd(&mut rng, d3, cond),
            a: random_mat(&mut rng, d3, d1, spec.coupling / (d1 as f64).sqrt()),
            b: random_mat(&mut rng, d3, d2, spec.coupling / (d2 as f64).sqrt()),
            t: random_vec(&mut rng, d3, spec.spread),
        })
        .collect();
    let level2: Vec<Level2Term> = (0..n)
        .map(|_| Level2Term {
            q: random_spd(&mut rng, d2, cond),
            a: random_mat(&mut rng, d2, d1, spec.coupling / (d1 as f64).sqrt()),
            t: random_vec(&mut rng, d2, spec.spread),
        })
        .collect();
    let p1: Vec<[DMatrix<f64>; 3]> = (0..n)
        .map(|_| {
            [
                random_spd(&mut rng, d1, cond) * spec.level1_scale,
                random_spd(&mut rng, d2, cond) * spec.level1_scale,
                random_spd(&mut rng, d3, cond) * spec.level1_scale,
            ]
        })
        .collect();
    let target_x1 = random_vec(&mut rng, d1, spec.spread);
    // offsets with sum_j P1_j delta_j = 0
    let mut deltas: Vec<DVector<f64>> = (0..n).map(|_| random_vec(&mut rng, d1, spec.heterogeneity)).collect();
    if n > 1 {
        let mut acc = DVector::zeros(d1);
        for j in 0..n - 1 {
            acc += &p1[j][0] * &deltas[j];
        }
        let last = solve_spd(&p1[n - 1][0], &DMatrix::from_column_slice(d1, 1, acc.as_slice()))?;
        deltas[n - 1] = -last.column(0).into_owned();
    } else {
        deltas[0].fill(0.0);
    }

    let level1 = p1
        .into_iter()
        .map(|p| Level1Term {
            p,
            center: [DVector::zeros(d1), DVector::zeros(d2), DVector::zeros(d3)],
        })
        .collect();
    let mut problem = QuadraticProblem::from_parts(dims, level1, level2, level3)?;
    let x2 = dv(&problem.level2_response(target_x1.as_slice())?);
    let x3 = dv(&problem.level3_response(target_x1.as_slice(), x2.as_slice())?);
    for (term, delta) in problem.level1.iter_mut().zip(deltas) {
        term.center = [&target_x1 + delta, x2.clone(), x3.clone()];
    }
    let oracle = problem.oracle()?;
    Ok((problem, oracle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{finite_diff_grad, rel_err, uniform_box as random_point};
    use rand::Rng;

    fn spec() -> QuadraticSpec {
        QuadraticSpec {
            d1: 2,
            d2: 3,
            d3: 2,
            workers: 3,
            seed: 11,
            conditioning: 5.0,
            ..QuadraticSpec::default()
        }
    }

    #[test]
    fn identity_oracle_is_origin() {
        let p = QuadraticProblem::identity(Dims::new(2, 3, 4, 2).unwrap()).unwrap();
        let o = p.oracle().unwrap();
        assert!(o.x1.iter().chain(&o.x2).chain(&o.x3).all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_nested_closed_form() {
        // f3 = 1/2 (x3 - 2 x1 - x2 - 1)^2, f2 = 1/2 (x2 - x1 + 1)^2,
        // f1 = 1/2 (x1 - 1)^2 + 1/2 x2^2 + 1/2 x3^2.
        // x2 = x1 - 1, x3 = 3 x1; level 1: (x1 - 1) + (x1 - 1) + 9 x1 = 0 -> x1 = 2/11
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        let c = |v: f64| DVector::from_element(1, v);
        let dims = Dims::new(1, 1, 1, 1).unwrap();
        let p = QuadraticProblem::from_parts(
            dims,
            vec![Level1Term {
                p: [m(1.0), m(1.0), m(1.0)],
                center: [c(1.0), c(0.0), c(0.0)],
            }],
            vec![Level2Term {
                q: m(1.0),
                a: m(1.0),
                t: c(-1.0),
            }],
            vec![Level3Term {
                q: m(1.0),
                a: m(2.0),
                b: m(1.0),
                t: c(1.0),
            }],
        )
        .unwrap();
        let o = p.oracle().unwrap();
        let x1 = 2.0 / 11.0;
        assert!((o.x1[0] - x1).abs() < 1e-14);
        assert!((o.x2[0] - (x1 - 1.0)).abs() < 1e-14);
        assert!((o.x3[0] - 3.0 * x1).abs() < 1e-14);
    }

    #[test]
    fn builder_recovers_planted_point_and_is_stationary() {
        let (p, o) = build_quadratic_problem(&spec()).unwrap();
        // level-3 consensus gradient vanishes at the oracle
        let mut g3 = vec![0.0; 2];
        let mut g2 = vec![0.0; 3];
        let mut g1 = vec![0.0; 2];
        for j in 0..3 {
            let g = p.grad(Level::Three, j, Block::X3, &o.x1, &o.x2, &o.x3);
            g3.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            let g = p.grad(Level::Two, j, Block::X2, &o.x1, &o.x2, &o.x3);
            g2.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            let g = p.grad(Level::One, j, Block::X1, &o.x1, &o.x2, &o.x3);
            g1.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        for v in g3.iter().chain(&g2).chain(&g1) {
            assert!(v.abs() < 1e-10, "{v}");
        }
    }

    #[test]
    fn oracle_invariant_under_level1_scaling() {
        let base = build_quadratic_problem(&spec()).unwrap().1;
        let scaled = build_quadratic_problem(&QuadraticSpec {
            level1_scale: 100.0,
            ..spec()
        })
        .unwrap()
        .1;
        for (a, b) in base.x1.iter().zip(&scaled.x1) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let (p, _) = build_quadratic_problem(&spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = [
                random_point(&mut rng, 2, 2.0),
                random_point(&mut rng, 3, 2.0),
                random_point(&mut rng, 2, 2.0),
            ];
            for level in Level::ALL {
                for block in Block::ALL {
                    let j = rng.random_range(0..3);
                    let g = p.grad(level, j, block, &x[0], &x[1], &x[2]);
                    let i = block.index();
                    let fd = finite_diff_grad(
                        |v| {
                            let mut a = [&x[0][..], &x[1][..], &x[2][..]];
                            a[i] = v;
                            p.eval(level, j, a[0], a[1], a[2])
                        },
                        &x[i],
                        1e-5 * (1.0 + crate::linalg::norm_inf(&x[i])),
                    )
                    .unwrap();
                    assert!(rel_err(&g, &fd, 1.0) < 1e-6, "{level:?} {block:?}");
                }
            }
        }
    }

    #[test]
    fn hessian_vector_products_match_gradient_differences() {
        let (p, _) = build_quadratic_problem(&spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = [2, 3, 2];
        let x = [
            random_point(&mut rng, 2, 1.0),
            random_point(&mut rng, 3, 1.0),
            random_point(&mut rng, 2, 1.0),
        ];
        for level in Level::ALL {
            for wrt in Block::ALL {
                for along in Block::ALL {
                    let v = random_point(&mut rng, d[along.index()], 1.0);
                    let hv = p.hess_vec(level, 1, wrt, along, &x[0], &x[1], &x[2], &v).unwrap();
                    let mut xp = x.clone();
                    for (a, b) in xp[along.index()].iter_mut().zip(&v) {
                        *a += b;
                    }
                    let g0 = p.grad(level, 1, wrt, &x[0], &x[1], &x[2]);
                    let g1 = p.grad(level, 1, wrt, &xp[0], &xp[1], &xp[2]);
                    // quadratic: the gradient difference is exactly the product
                    let diff: Vec<f64> = g1.iter().zip(&g0).map(|(a, b)| a - b).collect();
                    assert!(rel_err(&hv, &diff, 1.0) < 1e-10);
                }
            }
        }
    }
}
