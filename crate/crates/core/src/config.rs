//! Declarative run configuration (TOML).
//!
//! ```toml
//! [problem]
//! kind = "quadratic"
//! d1 = 2
//! workers = 4
//!
//! [outer]
//! max_iters = 2000
//!
//! [schedule]
//! s = 3
//! tau = 10
//! delay = { kind = "straggler", ids = [3], factor = 5.0, compute = 1.0, link = 0.0 }
//! ```
//!
//! Every table is optional and falls back to the library defaults. Unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, synthetic_linear, RegressionDataset, SyntheticSpec};
use crate::error::{AftoError, Result};
use crate::harness::{CutConfig, ScheduleConfig};
use crate::inner::InnerConfig;
use crate::outer::OuterConfig;
use crate::problem::{PrimalState, TrilevelProblem};
use crate::problems::{
    build_quadratic_problem, build_robust_hpo_problem, QuadraticOracle, QuadraticProblem, QuadraticSpec,
    RobustHpoProblem, RobustHpoSpec,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub inner: InnerConfig,
    pub outer: OuterConfig,
    pub schedule: ScheduleConfig,
    pub cuts: CutConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            problem: ProblemConfig::Quadratic(QuadraticSpec::default()),
            inner: InnerConfig::default(),
            outer: OuterConfig::default(),
            schedule: ScheduleConfig::default(),
            cuts: CutConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemConfig {
    Quadratic(QuadraticSpec),
    RobustHpo(HpoConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HpoConfig {
    /// CSV file, last column the target. When absent the synthetic
    /// generator below is used.
    pub dataset: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub split: [f64; 3],
    pub split_seed: u64,
    pub noise_sigma: f64,
    pub workers: usize,
    pub model: RobustHpoSpec,
    /// Starting regularization log-weight.
    pub init_log_weight: f64,
    /// Seed of the initial network weights.
    pub init_seed: u64,
    /// Level-3 unroll that turns the final outer iterate into the reported
    /// model.
    pub fit: InnerConfig,
}

impl Default for HpoConfig {
    fn default() -> Self {
        HpoConfig {
            dataset: None,
            synthetic: SyntheticSpec::default(),
            split: [0.6, 0.2, 0.2],
            split_seed: 0,
            noise_sigma: 0.1,
            workers: 4,
            model: RobustHpoSpec::default(),
            init_log_weight: -3.0,
            init_seed: 0,
            fit: InnerConfig {
                rounds: 300,
                eta_x: 0.1,
                eta_z: 0.1,
                eta_phi: 0.1,
                ..InnerConfig::default()
            },
        }
    }
}

impl HpoConfig {
    /// Relative paths resolve against `base` (the config file's directory).
    pub fn load_data(&self, base: Option<&Path>) -> Result<RegressionDataset> {
        match &self.dataset {
            Some(path) => {
                let path = match base {
                    Some(b) if path.is_relative() => b.join(path),
                    _ => path.clone(),
                };
                load_dataset(path, self.split, self.split_seed, self.noise_sigma)
            }
            None => {
                let (rows, y) = synthetic_linear(&self.synthetic);
                RegressionDataset::from_rows(rows, y, self.split, self.split_seed, self.noise_sigma)
            }
        }
    }
}

/// A problem built from its config, with whatever the caller needs besides
/// the objective.
pub enum BuiltProblem {
    Quadratic {
        problem: QuadraticProblem,
        oracle: QuadraticOracle,
    },
    RobustHpo {
        problem: RobustHpoProblem,
        data: RegressionDataset,
        init: PrimalState,
    },
}

impl BuiltProblem {
    pub fn as_dyn(&self) -> &dyn TrilevelProblem {
        match self {
            BuiltProblem::Quadratic { problem, .. } => problem,
            BuiltProblem::RobustHpo { problem, .. } => problem,
        }
    }

    pub fn initial_state(&self) -> Option<PrimalState> {
        match self {
            BuiltProblem::Quadratic { .. } => None,
            BuiltProblem::RobustHpo { init, .. } => Some(init.clone()),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| AftoError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| AftoError::Config(e.to_string()))
    }

    /// Re-seeds the problem generator, the data split, the initial weights
    /// and the delay model.
    pub fn reseed(&mut self, seed: u64) {
        self.schedule.seed = seed;
        match &mut self.problem {
            ProblemConfig::Quadratic(q) => q.seed = seed,
            ProblemConfig::RobustHpo(h) => {
                h.synthetic.seed = seed;
                h.split_seed = seed;
                h.init_seed = seed;
            }
        }
    }

    pub fn workers(&self) -> usize {
        match &self.problem {
            ProblemConfig::Quadratic(q) => q.workers,
            ProblemConfig::RobustHpo(h) => h.workers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.inner.validate()?;
        self.outer.validate()?;
        self.schedule.validate(self.workers())?;
        Ok(())
    }

    pub fn build(&self, base: Option<&Path>) -> Result<BuiltProblem> {
        self.validate()?;
        match &self.problem {
            ProblemConfig::Quadratic(spec) => {
                let (problem, oracle) = build_quadratic_problem(spec)?;
                Ok(BuiltProblem::Quadratic { problem, oracle })
            }
            ProblemConfig::RobustHpo(h) => {
                let data = h.load_data(base)?;
                let problem = build_robust_hpo_problem(&data, &h.model, h.workers)?;
                let init = problem.initial_state(h.init_log_weight, h.init_seed);
                Ok(BuiltProblem::RobustHpo { problem, data, init })
            }
        }
    }
}
