use thiserror::Error;

/// Errors produced anywhere in the solver pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("axis {axis} partition needs at least 2 strictly increasing breakpoints")]
    EmptyPartition { axis: usize },

    #[error("collar on axis {axis} needs {needed} cells per side, limit is {limit}")]
    CollarOverflow {
        axis: usize,
        needed: usize,
        limit: usize,
    },

    #[error("node {node} has no neighbors inside its influence region")]
    NoNeighbors { node: usize },

    #[error("node {node} is not an interior node")]
    NotInterior { node: usize },

    #[error("point {point:?} lies outside the grid")]
    OutOfDomain { point: Vec<f64> },

    #[error("row {row} has a zero diagonal")]
    SingularRow { row: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("iterative solver broke down after {iterations} iterations: {reason}")]
    Breakdown { iterations: usize, reason: String },

    #[error("iterative solver did not converge in {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("quadrature did not stabilize at {points} points per axis (change {change:e})")]
    QuadratureNotConverged { points: usize, change: f64 },

    #[error("convergence rate needs positive inputs, got {0}")]
    NonPositive(f64),

    #[error("operation requires a constant coefficient field")]
    NonConstantCoefficient,

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping any context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
