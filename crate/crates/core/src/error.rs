use thiserror::Error;

/// Errors raised by the solver, the cut engine and the problem builders.
#[derive(Debug, Error)]
pub enum AftoError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {what}{}", .index.map(|i| format!(" at index {i}")).unwrap_or_default())]
    NonFinite { what: String, index: Option<usize> },
    #[error("non-finite value during round {round} of the {layer} unroll")]
    UnrollDiverged { layer: &'static str, round: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("layer mismatch: polytope holds layer {expected} cuts, got a layer {got} cut")]
    LayerMismatch { expected: &'static str, got: &'static str },
    #[error("analytic unroll gradients need second derivatives, which this problem does not provide")]
    NoSecondDerivatives,
    #[error("every sampled pair was coincident; cannot estimate the weak-convexity modulus")]
    DegenerateSamples,
    #[error("step-size bound violated: {0}")]
    StepSize(String),
    #[error("dataset error: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AftoError>;
