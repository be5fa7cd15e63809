//! Distributed robust hyperparameter optimization.
//!
//! Level 1 picks a log regularization weight to minimize validation error,
//! level 2 perturbs each worker's training inputs to maximize the training
//! loss (minus a quadratic penalty), and level 3 fits an MLP on the perturbed
//! inputs with a smoothed l1 penalty. Blocks: `x1` = log-weight, `x2` = input
//! perturbation (one entry per training cell, padded to the largest shard),
//! `x3` = MLP weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{RegressionDataset, Shard};
use crate::error::{AftoError, Result};
use crate::inner::{solve_level3, InnerConfig, InnerInit, Snapshot};
use crate::problem::{Block, Bounds, Dims, Level, PrimalState, TrilevelProblem};

/// Fully connected network with tanh hidden layers and a linear scalar
/// output. Parameters are stored layer by layer, weights row-major then bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
}

impl Mlp {
    pub fn new(inputs: usize, hidden: &[usize]) -> Result<Self> {
        if inputs == 0 || hidden.contains(&0) {
            return Err(AftoError::Config("MLP layer widths must be positive".into()));
        }
        let mut sizes = vec![inputs];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Ok(Mlp { sizes })
    }

    pub fn inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn n_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    pub fn predict(&self, w: &[f64], x: &[f64]) -> f64 {
        let mut a = x.to_vec();
        let mut off = 0;
        let last = self.sizes.len() - 2;
        for (l, pair) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (pair[0], pair[1]);
            let (wm, b) = (
                &w[off..off + n_in * n_out],
                &w[off + n_in * n_out..off + n_out * (n_in + 1)],
            );
            a = (0..n_out)
                .map(|o| {
                    let s = b[o]
                        + wm[o * n_in..(o + 1) * n_in]
                            .iter()
                            .zip(&a)
                            .map(|(p, v)| p * v)
                            .sum::<f64>();
                    if l == last {
                        s
                    } else {
                        s.tanh()
                    }
                })
                .collect();
            off += n_out * (n_in + 1);
        }
        a[0]
    }

    /// Output plus `scale * d out/d params` added into `dw` and
    /// `scale * d out/d input` added into `dx`.
    fn backprop(&self, w: &[f64], x: &[f64], scale: f64, dw: Option<&mut [f64]>, dx: Option<&mut [f64]>) -> f64 {
        let mut acts = vec![x.to_vec()];
        let mut off = 0;
        let last = self.sizes.len() - 2;
        let mut offsets = Vec::with_capacity(self.sizes.len() - 1);
        for (l, pair) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (pair[0], pair[1]);
            offsets.push(off);
            let prev = acts.last().expect("input layer present");
            let next: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &w[off + o * n_in..off + (o + 1) * n_in];
                    let s = w[off + n_in * n_out + o] + row.iter().zip(prev).map(|(p, v)| p * v).sum::<f64>();
                    if l == last {
                        s
                    } else {
                        s.tanh()
                    }
                })
                .collect();
            acts.push(next);
            off += n_out * (n_in + 1);
        }
        let out = acts.last().expect("output layer present")[0];

        let mut dw = dw;
        let mut delta = vec![scale];
        for l in (0..self.sizes.len() - 1).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            if l != last {
                for (d, a) in delta.iter_mut().zip(&acts[l + 1]) {
                    *d *= 1.0 - a * a;
                }
            }
            if let Some(g) = dw.as_deref_mut() {
                for o in 0..n_out {
                    for i in 0..n_in {
                        g[off + o * n_in + i] += delta[o] * acts[l][i];
                    }
                    g[off + n_in * n_out + o] += delta[o];
                }
            }
            let mut back = vec![0.0; n_in];
            for o in 0..n_out {
                for (i, bk) in back.iter_mut().enumerate() {
                    *bk += delta[o] * w[off + o * n_in + i];
                }
            }
            delta = back;
        }
        if let Some(g) = dx {
            for (gi, d) in g.iter_mut().zip(&delta) {
                *gi += d;
            }
        }
        out
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.n_params());
        for pair in self.sizes.windows(2) {
            let (n_in, n_out) = (pair[0], pair[1]);
            let lim = (6.0 / (n_in + n_out) as f64).sqrt();
            w.extend((0..n_in * n_out).map(|_| rng.random_range(-lim..lim)));
            w.extend(std::iter::repeat_n(0.0, n_out));
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustHpoSpec {
    /// Hidden layer widths.
    pub mlp_layers: Vec<usize>,
    /// Penalty on the adversarial perturbation.
    pub c: f64,
    /// `delta` of the smoothed l1 norm `sum sqrt(w^2 + delta^2) - delta`.
    pub smoothing: f64,
    /// Train the model against perturbed inputs; when off the perturbation
    /// block is ignored and its best response is zero.
    pub adversarial: bool,
    pub bounds: [f64; 3],
    pub mu: f64,
}

impl Default for RobustHpoSpec {
    fn default() -> Self {
        RobustHpoSpec {
            mlp_layers: vec![16],
            c: 1.0,
            smoothing: 1e-3,
            adversarial: true,
            bounds: [100.0, 100.0, 1e4],
            mu: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RobustHpoProblem {
    mlp: Mlp,
    shards: Vec<Shard>,
    spec: RobustHpoSpec,
    dims: Dims,
}

pub fn smoothed_l1(w: &[f64], delta: f64) -> f64 {
    w.iter().map(|v| (v * v + delta * delta).sqrt() - delta).sum()
}

fn smoothed_l1_grad(w: &[f64], delta: f64) -> Vec<f64> {
    w.iter().map(|v| v / (v * v + delta * delta).sqrt()).collect()
}

/// Splits `data` across `n` workers and builds the three-level objective.
pub fn build_robust_hpo_problem(data: &RegressionDataset, spec: &RobustHpoSpec, n: usize) -> Result<RobustHpoProblem> {
    if !(spec.c > 0.0) || !(spec.smoothing > 0.0) {
        return Err(AftoError::Config("robust HPO needs c > 0 and smoothing > 0".into()));
    }
    let shards = data.shards(n)?;
    if shards.iter().any(|s| s.y_train.is_empty() || s.y_val.is_empty()) {
        return Err(AftoError::Data(
            "every worker needs training and validation rows".into(),
        ));
    }
    let mlp = Mlp::new(data.features(), &spec.mlp_layers)?;
    let rows = shards.iter().map(|s| s.y_train.len()).max().unwrap_or(0);
    let dims = Dims::new(1, rows * data.features(), mlp.n_params(), n)?;
    Ok(RobustHpoProblem {
        mlp,
        shards,
        spec: spec.clone(),
        dims,
    })
}

impl RobustHpoProblem {
    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn spec(&self) -> &RobustHpoSpec {
        &self.spec
    }

    /// Consensus starting point: log-weight `log_weight`, no perturbation and
    /// seeded initial weights.
    pub fn initial_state(&self, log_weight: f64, seed: u64) -> PrimalState {
        let w = self.mlp.init(&mut ChaCha8Rng::seed_from_u64(seed));
        PrimalState::at_consensus(self.dims, &[vec![log_weight], vec![0.0; self.dims.d2], w])
    }

    /// Model weights the lowest level settles on under the log-weight `z1`
    /// and perturbation `z2` of `state`: a level-3 unroll started from the
    /// state's weight blocks, returning its consensus copy.
    pub fn lower_level_weights(&self, state: &PrimalState, cfg: &InnerConfig) -> Result<Vec<f64>> {
        let start = InnerInit::Warm(Snapshot::at(&state.x[2], &state.z[2]));
        let trace = solve_level3(self, &state.z[0], &state.z[1], &start, cfg)?;
        Ok(trace.last().z.clone())
    }

    fn perturbed(&self, j: usize, p: &[f64], i: usize) -> Vec<f64> {
        let x = &self.shards[j].x_train[i];
        if !self.spec.adversarial {
            return x.clone();
        }
        let k = x.len();
        x.iter().zip(&p[i * k..(i + 1) * k]).map(|(a, b)| a + b).collect()
    }

    /// Mean squared training error on worker `j`'s perturbed inputs.
    pub fn train_loss(&self, j: usize, p: &[f64], w: &[f64]) -> f64 {
        let s = &self.shards[j];
        let m = s.y_train.len() as f64;
        (0..s.y_train.len())
            .map(|i| (s.y_train[i] - self.mlp.predict(w, &self.perturbed(j, p, i))).powi(2))
            .sum::<f64>()
            / m
    }

    /// Training-loss gradients with respect to the perturbation and weights.
    fn train_loss_grads(&self, j: usize, p: &[f64], w: &[f64], want_p: bool, want_w: bool) -> (Vec<f64>, Vec<f64>) {
        let s = &self.shards[j];
        let m = s.y_train.len() as f64;
        let k = self.mlp.inputs();
        let mut gp = vec![0.0; if want_p { self.dims.d2 } else { 0 }];
        let mut gw = vec![0.0; if want_w { w.len() } else { 0 }];
        for i in 0..s.y_train.len() {
            let xi = self.perturbed(j, p, i);
            let r = s.y_train[i] - self.mlp.predict(w, &xi);
            let scale = -2.0 * r / m;
            let dx = if want_p && self.spec.adversarial {
                Some(&mut gp[i * k..(i + 1) * k])
            } else {
                None
            };
            let dw = if want_w { Some(gw.as_mut_slice()) } else { None };
            self.mlp.backprop(w, &xi, scale, dw, dx);
        }
        (gp, gw)
    }

    pub fn val_loss(&self, j: usize, w: &[f64]) -> f64 {
        let s = &self.shards[j];
        s.x_val
            .iter()
            .zip(&s.y_val)
            .map(|(x, y)| (y - self.mlp.predict(w, x)).powi(2))
            .sum::<f64>()
            / s.y_val.len() as f64
    }
}

impl TrilevelProblem for RobustHpoProblem {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn eval(&self, level: Level, j: usize, x1: &[f64], x2: &[f64], x3: &[f64]) -> f64 {
        match level {
            Level::One => self.val_loss(j, x3),
            Level::Two => {
                let pen = self.spec.c * x2.iter().map(|v| v * v).sum::<f64>();
                if self.spec.adversarial {
                    pen - self.train_loss(j, x2, x3)
                } else {
                    pen
                }
            }
            Level::Three => self.train_loss(j, x2, x3) + x1[0].exp() * smoothed_l1(x3, self.spec.smoothing),
        }
    }

    fn grad(&self, level: Level, j: usize, block: Block, x1: &[f64], x2: &[f64], x3: &[f64]) -> Vec<f64> {
        let zeros = || vec![0.0; self.dims.block(block)];
        match (level, block) {
            (Level::One, Block::X3) => {
                let s = &self.shards[j];
                let m = s.y_val.len() as f64;
                let mut g = vec![0.0; x3.len()];
                for (x, y) in s.x_val.iter().zip(&s.y_val) {
                    let r = y - self.mlp.predict(x3, x);
                    self.mlp.backprop(x3, x, -2.0 * r / m, Some(&mut g), None);
                }
                g
            }
            (Level::One, _) => zeros(),
            (Level::Two, Block::X1) => zeros(),
            (Level::Two, Block::X2) => {
                let (gp, _) = self.train_loss_grads(j, x2, x3, true, false);
                x2.iter()
                    .zip(gp.iter().chain(std::iter::repeat(&0.0)))
                    .map(|(p, g)| 2.0 * self.spec.c * p - g)
                    .collect()
            }
            (Level::Two, Block::X3) => {
                if !self.spec.adversarial {
                    return zeros();
                }
                let (_, gw) = self.train_loss_grads(j, x2, x3, false, true);
                gw.into_iter().map(|g| -g).collect()
            }
            (Level::Three, Block::X1) => vec![x1[0].exp() * smoothed_l1(x3, self.spec.smoothing)],
            (Level::Three, Block::X2) => {
                if !self.spec.adversarial {
                    return zeros();
                }
                self.train_loss_grads(j, x2, x3, true, false).0
            }
            (Level::Three, Block::X3) => {
                let (_, gw) = self.train_loss_grads(j, x2, x3, false, true);
                let scale = x1[0].exp();
                gw.iter()
                    .zip(smoothed_l1_grad(x3, self.spec.smoothing))
                    .map(|(g, r)| g + scale * r)
                    .collect()
            }
        }
    }

    fn bounds(&self) -> Bounds {
        Bounds(self.spec.bounds)
    }

    fn weak_convexity_mu(&self) -> f64 {
        self.spec.mu
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub mse_clean: f64,
    pub mse_noisy: f64,
}

/// Test MSE of weights `w` on the clean test split and on its seeded noisy
/// variant.
pub fn evaluate_model(mlp: &Mlp, w: &[f64], data: &RegressionDataset, noise_seed: u64) -> Result<ModelScores> {
    if w.len() != mlp.n_params() {
        return Err(AftoError::Dimension {
            what: "model weights",
            expected: mlp.n_params(),
            got: w.len(),
        });
    }
    let mse = |(x, y): (Vec<Vec<f64>>, Vec<f64>)| -> f64 {
        if y.is_empty() {
            return 0.0;
        }
        x.iter()
            .zip(&y)
            .map(|(r, t)| (t - mlp.predict(w, r)).powi(2))
            .sum::<f64>()
            / y.len() as f64
    };
    Ok(ModelScores {
        mse_clean: mse(data.test_clean()),
        mse_noisy: mse(data.test_noisy(noise_seed)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cuts::{Layer, Polytope};
    use crate::data::{synthetic_linear, SyntheticSpec};
    use crate::inner::solve_level2;
    use crate::linalg::{finite_diff_grad, rel_err, uniform_box};

    fn dataset(sigma: f64) -> RegressionDataset {
        let (r, y) = synthetic_linear(&SyntheticSpec {
            rows: 40,
            features: 2,
            ..SyntheticSpec::default()
        });
        RegressionDataset::from_rows(r, y, [0.5, 0.25, 0.25], 1, sigma).unwrap()
    }

    fn problem(spec: RobustHpoSpec) -> RobustHpoProblem {
        build_robust_hpo_problem(&dataset(0.1), &spec, 2).unwrap()
    }

    fn small_spec() -> RobustHpoSpec {
        RobustHpoSpec {
            mlp_layers: vec![3],
            ..RobustHpoSpec::default()
        }
    }

    #[test]
    fn shapes() {
        let p = problem(small_spec());
        let d = p.dims();
        assert_eq!((d.d1, d.d2, d.d3, d.n), (1, 10 * 2, 3 * 3 + 4, 2));
    }

    #[test]
    fn gradients_match_differences() {
        let p = problem(small_spec());
        let d = p.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let x1 = uniform_box(&mut rng, 1, 1.0);
            let x2 = uniform_box(&mut rng, d.d2, 0.3);
            let x3 = uniform_box(&mut rng, d.d3, 1.0);
            for level in [Level::One, Level::Two, Level::Three] {
                for block in [Block::X1, Block::X2, Block::X3] {
                    for j in 0..d.n {
                        let g = p.grad(level, j, block, &x1, &x2, &x3);
                        let fd = match block {
                            Block::X1 => finite_diff_grad(|v| p.eval(level, j, v, &x2, &x3), &x1, 1e-6),
                            Block::X2 => finite_diff_grad(|v| p.eval(level, j, &x1, v, &x3), &x2, 1e-6),
                            Block::X3 => finite_diff_grad(|v| p.eval(level, j, &x1, &x2, v), &x3, 1e-6),
                        }
                        .unwrap();
                        assert!(rel_err(&g, &fd, 1e-6) <= 1e-5, "{level:?} {block:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn vanishing_weight_drops_regularizer() {
        let p = problem(small_spec());
        let w = p.initial_state(0.0, 1).x[2][0].clone();
        let g = p.grad(Level::Three, 0, Block::X1, &[-20.0], &vec![0.0; p.dims().d2], &w);
        assert!(g[0].abs() <= 1e-8);
    }

    #[test]
    fn heavy_penalty_kills_perturbation() {
        let p = problem(RobustHpoSpec { c: 1e6, ..small_spec() });
        let s = p.initial_state(0.0, 2);
        let cfg = InnerConfig {
            rounds: 20,
            eta_x: 1e-7,
            eta_z: 0.1,
            eta_phi: 0.1,
            ..InnerConfig::default()
        };
        let tr = solve_level2(
            &p,
            &s.z[0],
            &s.z[2],
            &s.x[2],
            &Polytope::new(Layer::I),
            &InnerInit::Zeros,
            &cfg,
        )
        .unwrap();
        for x in &tr.last().x {
            assert!(x.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-3);
        }
    }

    #[test]
    fn frozen_perturbation_is_ignored() {
        let p = problem(RobustHpoSpec {
            adversarial: false,
            ..small_spec()
        });
        let d = p.dims();
        let w = p.initial_state(0.0, 3).x[2][0].clone();
        let a = p.eval(Level::Three, 1, &[0.0], &vec![0.0; d.d2], &w);
        let b = p.eval(Level::Three, 1, &[0.0], &vec![0.7; d.d2], &w);
        assert_eq!(a, b);
    }

    #[test]
    fn interpolator_scores_zero() {
        let (r, _) = synthetic_linear(&SyntheticSpec {
            rows: 20,
            features: 2,
            ..SyntheticSpec::default()
        });
        let y: Vec<f64> = r.iter().map(|v| 0.3 * v[0] - 0.2 * v[1] + 0.1).collect();
        let data = RegressionDataset::from_rows(r, y.clone(), [0.5, 0.25, 0.25], 0, 0.0).unwrap();
        // linear model on standardized inputs: undo the scaling in the weights
        let mlp = Mlp::new(2, &[]).unwrap();
        let (m, s) = (&data.feature_mean, &data.feature_std);
        let w = vec![0.3 * s[0], -0.2 * s[1], 0.1 + 0.3 * m[0] - 0.2 * m[1]];
        let sc = evaluate_model(&mlp, &w, &data, 0).unwrap();
        assert!(sc.mse_clean <= 1e-10);
        assert_eq!(sc.mse_clean, sc.mse_noisy);
    }

    #[test]
    fn evaluation_is_pure() {
        let p = problem(small_spec());
        let s = p.initial_state(-1.0, 5);
        let a = p.eval(Level::Two, 0, &s.x[0][0], &s.x[1][0], &s.x[2][0]);
        let b = p.eval(Level::Two, 0, &s.x[0][0], &s.x[1][0], &s.x[2][0]);
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
