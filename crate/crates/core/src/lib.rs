//! Asynchronous federated trilevel optimization.
//!
//! Trilevel problems are relaxed into two nested polytopes of mu-cuts and
//! solved by an asynchronous master/worker primal-dual loop with bounded
//! staleness, driven by a deterministic discrete-event simulator.

pub mod config;
pub mod cuts;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod inner;
pub mod linalg;
pub mod mu;
pub mod outer;
pub mod problem;
pub mod problems;

pub use config::{BuiltProblem, HpoConfig, ProblemConfig, RunConfig};
pub use cuts::{Cut, CutPoint, Layer, Polytope};
pub use error::{AftoError, Result};
pub use harness::{paired_bench, run, CutConfig, DelayModel, RunLog, RunOutcome, ScheduleConfig};
pub use inner::InnerConfig;
pub use outer::OuterConfig;
pub use problem::{Dims, DualState, PrimalState, TrilevelProblem};
