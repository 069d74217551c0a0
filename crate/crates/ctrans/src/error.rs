//! Error type shared by every module of the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong while building flows, deciding
/// controllability, solving point problems, or assembling transport plans.
#[derive(Debug, Error)]
pub enum Error {
    /// A time query fell outside the system horizon `[0, T]`.
    #[error("time {t} outside horizon [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },

    /// A derivative order was requested that the curve form cannot certify.
    #[error("derivative order {order} not supported by a {form} curve")]
    UnsupportedDerivative { order: usize, form: &'static str },

    /// An operation that needs a square matrix received a rectangular one.
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    /// Matrix or vector dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Two objects that must share a time grid or horizon do not.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// The integrated flow failed its internal consistency check.
    #[error(
        "flow consistency residual {residual:.3e} exceeds tolerance {tol:.3e} \
         at grid index {index}; increase the grid resolution"
    )]
    FlowAccuracy {
        residual: f64,
        tol: f64,
        index: usize,
    },

    /// A matrix that must be invertible is numerically singular.
    #[error("numerically singular matrix: {0}")]
    Singular(String),

    /// The system is not controllable, so the requested quantity is undefined.
    #[error("system not controllable: {0}")]
    NotControllable(String),

    /// The commuting-family precondition failed.
    #[error("commutation residual {0:.3e} exceeds 1e-10: M(t1)M(t2) != M(t2)M(t1)")]
    NonCommuting(f64),

    /// An iterative solver ran out of iterations.
    #[error("solver did not converge after {iterations} iterations (best residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    /// A point-cost solve inside a cost-matrix build failed.
    #[error("cost solve failed for source {i}, target {j}: {source}")]
    CostEntry {
        i: usize,
        j: usize,
        #[source]
        source: Box<Error>,
    },

    /// A discrete measure violated its invariants.
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    /// Source and target measures do not carry equal total mass.
    #[error("unbalanced transport problem: {0}")]
    Unbalanced(String),

    /// The transportation simplex hit its anti-cycling pivot cap.
    #[error("transportation simplex exceeded {0} pivots; cycling guard tripped")]
    CyclingGuard(usize),

    /// A continuity-equation test function violated its boundary conditions.
    #[error("invalid test function: {0}")]
    InvalidTestFunction(String),

    /// Any other invalid argument.
    #[error("invalid input: {0}")]
    InvalidInput(String),
}
