//! Problem builders.

pub mod quadratic;

pub use quadratic::{build_quadratic_problem, QuadraticOracle, QuadraticProblem, QuadraticSpec};
pub mod robust_hpo;

pub use robust_hpo::{build_robust_hpo_problem, evaluate_model, Mlp, ModelScores, RobustHpoProblem, RobustHpoSpec};
