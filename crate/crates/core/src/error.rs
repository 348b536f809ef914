use thiserror::Error;

/// Failures raised by the numerical pipelines.
///
/// Variants carry enough context for the CLI to name the failing operation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("configuration point is within the node floor (|psi|^2 = {density:e})")]
    NodeProximity { density: f64 },

    #[error("{masked} of {total} fine points aborted near nodes (more than 5%)")]
    MeshTooCoarse { masked: usize, total: usize },

    #[error("coarse-grained cell sets do not match: {0}")]
    DomainMismatch(String),

    #[error("least-squares fit did not converge from any start: {0}")]
    FitDiverged(String),

    #[error("grid wave reached the domain boundary (edge/peak amplitude {ratio:e} > {limit:e})")]
    DomainOverflow { ratio: f64, limit: f64 },

    #[error("pointer branches overlap (min centre separation {separation:.4} <= {required:.4})")]
    BranchOverlap { separation: f64, required: f64 },

    #[error("trajectory integration stopped early ({0})")]
    TrajectoryAborted(String),

    #[error("trajectory families coincide within tracking error; states cannot be told apart")]
    Inconclusive,

    #[error("non-Hermitian expectation is zero; the nonequilibrium timescale diverges")]
    DivergentTimescale,

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
