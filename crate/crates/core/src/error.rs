use thiserror::Error;

/// Errors raised while building or validating a problem instance.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("index ({row}, {col}) out of range for order {order}")]
    IndexOutOfRange { row: usize, col: usize, order: usize },
    #[error("constraint {index} is not symmetric at ({row}, {col})")]
    Asymmetric { index: usize, row: usize, col: usize },
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("objective callback failed: {0}")]
    Callback(String),
}

/// Failures of the inner linear algebra and geometry primitives.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("PCG reached the iteration cap ({iters}) without converging")]
    MaxIterReached { iters: usize },
    #[error("Newton retraction did not reach tolerance after {corrections} corrections (residual {residual:.3e})")]
    RetractionDiverged { corrections: usize, residual: f64 },
    #[error("Cholesky factorization failed: matrix is not positive definite")]
    CholeskyFailed,
    #[error("eigensolver did not converge (residual {residual:.3e})")]
    EigSolverStagnated { residual: f64 },
    #[error("line search failed after {backtracks} backtracks")]
    LineSearchFailed { backtracks: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Errors surfaced by a full solve.
#[derive(Debug, Error)]
pub enum SolveError {
    #[error("could not find a feasible starting point (residual {residual:.3e})")]
    Infeasible { residual: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("self-loop on vertex {vertex} (line {line})")]
    SelfLoop { vertex: usize, line: usize },
    #[error("duplicate edge ({i}, {j}) (line {line})")]
    DuplicateEdge { i: usize, j: usize, line: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}
