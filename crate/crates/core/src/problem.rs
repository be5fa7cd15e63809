//! Domain types for distributed trilevel problems and their consensus
//! reformulation.
//!
//! A problem is described by three families of per-worker objectives
//! `f_{i,j}(x1, x2, x3)`. Each level is evaluated at a different mix of local
//! and consensus blocks:
//!
//! ```text
//!   level 1:  f_{1,j}(x_{1,j}, x_{2,j}, x_{3,j})
//!   level 2:  f_{2,j}(z_1,     x'_{2,j}, x_{3,j})
//!   level 3:  f_{3,j}(z_1,     z'_2,     x'_{3,j})
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{AftoError, Result};
use crate::linalg::{self, default_fd_step, finite_diff_grad};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d1: usize,
    pub d2: usize,
    pub d3: usize,
    /// Worker count.
    pub n: usize,
}

impl Dims {
    pub fn new(d1: usize, d2: usize, d3: usize, n: usize) -> Result<Self> {
        let dims = Dims { d1, d2, d3, n };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d1 == 0 || self.d2 == 0 || self.d3 == 0 || self.n == 0 {
            return Err(AftoError::Config(format!(
                "dimensions and worker count must be positive, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn block(&self, b: Block) -> usize {
        match b {
            Block::X1 => self.d1,
            Block::X2 => self.d2,
            Block::X3 => self.d3,
        }
    }

    pub fn total(&self) -> usize {
        self.d1 + self.d2 + self.d3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    One,
    Two,
    Three,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::One, Level::Two, Level::Three];

    pub fn index(self) -> usize {
        match self {
            Level::One => 0,
            Level::Two => 1,
            Level::Three => 2,
        }
    }
}

/// Variable block selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block {
    X1,
    X2,
    X3,
}

impl Block {
    pub const ALL: [Block; 3] = [Block::X1, Block::X2, Block::X3];

    pub fn index(self) -> usize {
        match self {
            Block::X1 => 0,
            Block::X2 => 1,
            Block::X3 => 2,
        }
    }

    pub fn from_index(i: usize) -> Block {
        Block::ALL[i]
    }
}

/// Squared-norm bounds `alpha_1..alpha_3` on the primal blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds(pub [f64; 3]);

impl Default for Bounds {
    fn default() -> Self {
        Bounds([1e6; 3])
    }
}

impl Bounds {
    pub fn get(&self, b: Block) -> f64 {
        self.0[b.index()]
    }
}

/// A distributed trilevel problem.
///
/// Implementations must be pure: the same arguments always give the same
/// values, so every method may be called concurrently.
pub trait TrilevelProblem: Send + Sync {
    fn dims(&self) -> Dims;

    fn eval(&self, level: Level, worker: usize, x1: &[f64], x2: &[f64], x3: &[f64]) -> f64;

    /// Gradient of `f_{level,worker}` with respect to `block`.
    ///
    /// Falls back to central differences with step `1e-5 (1 + ||v||_inf)`.
    fn grad(&self, level: Level, worker: usize, block: Block, x1: &[f64], x2: &[f64], x3: &[f64]) -> Vec<f64> {
        fd_block_grad(self, level, worker, block, x1, x2, x3)
    }

    /// Mixed second derivative applied to a vector:
    /// `d/d(along) [grad_wrt f] * v`. `None` when the problem does not expose
    /// second derivatives.
    #[allow(clippy::too_many_arguments)]
    fn hess_vec(
        &self,
        _level: Level,
        _worker: usize,
        _wrt: Block,
        _along: Block,
        _x1: &[f64],
        _x2: &[f64],
        _x3: &[f64],
        _v: &[f64],
    ) -> Option<Vec<f64>> {
        None
    }

    fn has_second_derivatives(&self) -> bool {
        false
    }

    fn bounds(&self) -> Bounds {
        Bounds::default()
    }

    /// Assumed weak-convexity modulus of the lower-level constraint functions.
    fn weak_convexity_mu(&self) -> f64 {
        0.0
    }
}

/// Finite-difference block gradient used as the default for
/// [`TrilevelProblem::grad`].
pub fn fd_block_grad<P: TrilevelProblem + ?Sized>(
    p: &P,
    level: Level,
    worker: usize,
    block: Block,
    x1: &[f64],
    x2: &[f64],
    x3: &[f64],
) -> Vec<f64> {
    let args = [x1, x2, x3];
    let base = args[block.index()];
    let h = default_fd_step(base);
    let f = |v: &[f64]| {
        let mut a = args;
        a[block.index()] = v;
        p.eval(level, worker, a[0], a[1], a[2])
    };
    finite_diff_grad(f, base, h).unwrap_or_else(|_| vec![f64::NAN; base.len()])
}

impl<P: TrilevelProblem + ?Sized> TrilevelProblem for &P {
    fn dims(&self) -> Dims {
        (**self).dims()
    }
    fn eval(&self, level: Level, worker: usize, x1: &[f64], x2: &[f64], x3: &[f64]) -> f64 {
        (**self).eval(level, worker, x1, x2, x3)
    }
    fn grad(&self, level: Level, worker: usize, block: Block, x1: &[f64], x2: &[f64], x3: &[f64]) -> Vec<f64> {
        (**self).grad(level, worker, block, x1, x2, x3)
    }
    fn hess_vec(
        &self,
        level: Level,
        worker: usize,
        wrt: Block,
        along: Block,
        x1: &[f64],
        x2: &[f64],
        x3: &[f64],
        v: &[f64],
    ) -> Option<Vec<f64>> {
        (**self).hess_vec(level, worker, wrt, along, x1, x2, x3, v)
    }
    fn has_second_derivatives(&self) -> bool {
        (**self).has_second_derivatives()
    }
    fn bounds(&self) -> Bounds {
        (**self).bounds()
    }
    fn weak_convexity_mu(&self) -> f64 {
        (**self).weak_convexity_mu()
    }
}

/// Equality constraint `x_{level,worker} = z_level` of the consensus form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConsensusLink {
    pub level: Level,
    pub worker: usize,
    pub dim: usize,
}

/// Read-only consensus view of a problem: per-worker local copies tied to
/// master-held consensus blocks.
pub struct ConsensusView<'a, P: ?Sized> {
    problem: &'a P,
    links: Vec<ConsensusLink>,
}

pub fn reformulate_consensus<P: TrilevelProblem + ?Sized>(problem: &P) -> ConsensusView<'_, P> {
    let dims = problem.dims();
    let links = Level::ALL
        .iter()
        .flat_map(|&level| {
            let dim = dims.block(Block::from_index(level.index()));
            (0..dims.n).map(move |worker| ConsensusLink { level, worker, dim })
        })
        .collect();
    ConsensusView { problem, links }
}

impl<'a, P: TrilevelProblem + ?Sized> ConsensusView<'a, P> {
    pub fn links(&self) -> &[ConsensusLink] {
        &self.links
    }

    pub fn links_for(&self, level: Level) -> impl Iterator<Item = &ConsensusLink> {
        self.links.iter().filter(move |l| l.level == level)
    }

    pub fn problem(&self) -> &'a P {
        self.problem
    }

    /// Level-1 local objective at worker-local blocks.
    pub fn local_f1(&self, state: &PrimalState, j: usize) -> f64 {
        self.problem
            .eval(Level::One, j, &state.x[0][j], &state.x[1][j], &state.x[2][j])
    }

    /// Level-2 local objective: `f_{2,j}(z1, x_{2,j}, x_{3,j})`.
    pub fn local_f2(&self, state: &PrimalState, j: usize) -> f64 {
        self.problem
            .eval(Level::Two, j, &state.z[0], &state.x[1][j], &state.x[2][j])
    }

    /// Level-3 local objective: `f_{3,j}(z1, z2, x_{3,j})`.
    pub fn local_f3(&self, state: &PrimalState, j: usize) -> f64 {
        self.problem
            .eval(Level::Three, j, &state.z[0], &state.z[1], &state.x[2][j])
    }

    /// Sum over workers of each level's local objective.
    pub fn level_values(&self, state: &PrimalState) -> [f64; 3] {
        let n = self.problem.dims().n;
        let mut out = [0.0; 3];
        for j in 0..n {
            out[0] += self.local_f1(state, j);
            out[1] += self.local_f2(state, j);
            out[2] += self.local_f3(state, j);
        }
        out
    }
}

/// Local blocks `x[i][j]` and consensus blocks `z[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimalState {
    pub x: [Vec<Vec<f64>>; 3],
    pub z: [Vec<f64>; 3],
}

impl PrimalState {
    pub fn zeros(dims: Dims) -> Self {
        let d = [dims.d1, dims.d2, dims.d3];
        PrimalState {
            x: d.map(|di| vec![vec![0.0; di]; dims.n]),
            z: d.map(|di| vec![0.0; di]),
        }
    }

    /// Every local copy and the consensus block of each level set to the
    /// given point.
    pub fn at_consensus(dims: Dims, point: &[Vec<f64>; 3]) -> Self {
        PrimalState {
            x: [0, 1, 2].map(|i| vec![point[i].clone(); dims.n]),
            z: point.clone(),
        }
    }

    pub fn check_dims(&self, dims: Dims) -> Result<()> {
        let d = [dims.d1, dims.d2, dims.d3];
        for i in 0..3 {
            linalg::check_len("consensus block", &self.z[i], d[i])?;
            if self.x[i].len() != dims.n {
                return Err(AftoError::Dimension {
                    what: "worker count",
                    expected: dims.n,
                    got: self.x[i].len(),
                });
            }
            for xj in &self.x[i] {
                linalg::check_len("local block", xj, d[i])?;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.z.iter().all(|v| linalg::all_finite(v))
            && self.x.iter().all(|blk| blk.iter().all(|v| linalg::all_finite(v)))
    }

    /// Applies the squared-ball bounds to every block.
    pub fn project(&mut self, bounds: &Bounds) {
        for i in 0..3 {
            linalg::project_ball_sq_in_place(&mut self.z[i], bounds.0[i]);
            for xj in self.x[i].iter_mut() {
                linalg::project_ball_sq_in_place(xj, bounds.0[i]);
            }
        }
    }
}

/// Outer dual variables: one multiplier per layer-II cut and one consensus
/// multiplier per worker. Inner duals live in the unroll traces.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DualState {
    pub lambda: Vec<f64>,
    pub theta: Vec<Vec<f64>>,
}

impl DualState {
    pub fn zeros(dims: Dims, n_cuts: usize) -> Self {
        DualState {
            lambda: vec![0.0; n_cuts],
            theta: vec![vec![0.0; dims.d1]; dims.n],
        }
    }
}
