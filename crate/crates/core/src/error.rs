//! Error type shared across the solver.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    /// A finite-difference or interpolation stencil referenced a node outside
    /// the grid on a face whose boundary rule cannot supply a value.
    #[error("missing neighbor at node {node}, axis {axis}: no boundary rule supplies a value there")]
    MissingNeighbor { node: usize, axis: usize },

    #[error("time-step restriction violated: {detail}")]
    CflViolation { detail: String },

    #[error(
        "policy iteration did not converge in {max_iters} iterations (last delta {last_delta:.3e})"
    )]
    NonConvergence {
        max_iters: usize,
        last_delta: f64,
        deltas: Vec<f64>,
    },

    #[error("slanting matrix row {row} lost diagonal dominance (margin {margin:.3e})")]
    DominanceViolation { row: usize, margin: f64 },

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("driver evaluated outside its admissible range: {0}")]
    DriverDomain(String),

    #[error("rank-deficient regression: {0}")]
    RankDeficient(String),

    #[error("empty node set: Hausdorff distance is undefined")]
    EmptyNodeSet,

    #[error("integral did not converge: {0}")]
    DivergentIntegral(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SolverError>;
