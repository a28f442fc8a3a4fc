//! Error types shared across the solver library.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("graph must have at least one node")]
    NoNodes,
    #[error("arc {idx} ({from}->{to}) has an endpoint outside 0..{node_count}")]
    ArcOutOfRange {
        idx: usize,
        from: usize,
        to: usize,
        node_count: usize,
    },
    #[error("arc {idx} is a self-loop at node {node}")]
    SelfLoop { idx: usize, node: usize },
    #[error("arc {idx} duplicates ({from}->{to})")]
    DuplicateArc { idx: usize, from: usize, to: usize },
    #[error("arc {idx} has negative or non-finite cost {value}")]
    BadCost { idx: usize, value: f64 },
    #[error("arc {idx} has nonpositive capacity {value}")]
    BadCapacity { idx: usize, value: f64 },
    #[error("node {node} outside 0..{node_count}")]
    NodeOutOfRange { node: usize, node_count: usize },
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        expected: usize,
        got: usize,
        what: &'static str,
    },
    #[error("{kind} graph needs n >= {min}, got {n}")]
    TooSmall { kind: String, n: usize, min: usize },
    #[error("bipartite graph needs even n, got {n}")]
    OddBipartite { n: usize },
    #[error("unknown graph kind {0:?}")]
    UnknownKind(String),
}

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("negative entry {value} at node {node} in {which}")]
    NegativeMass {
        which: &'static str,
        node: usize,
        value: f64,
    },
    #[error("supply-demand imbalance: sum(rho0) = {sum0}, sum(rhoInf) = {sum_inf}")]
    Unbalanced { sum0: f64, sum_inf: f64 },
    #[error("net supply does not sum to zero (sum = {sum})")]
    NetNotZero { sum: f64 },
    #[error("dimension mismatch: rho0 has {len0} entries, rhoInf has {len_inf}")]
    LengthMismatch { len0: usize, len_inf: usize },
    #[error("non-finite mass entry at node {node}")]
    NonFinite { node: usize },
}

#[derive(Debug, Error)]
pub enum QpError {
    #[error("Q is not symmetric (rows {i},{j} differ by {delta})")]
    NotSymmetric { i: usize, j: usize, delta: f64 },
    #[error("box is empty at coordinate {idx}: lower {lower} > upper {upper}")]
    EmptyBox { idx: usize, lower: f64, upper: f64 },
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        expected: usize,
        got: usize,
        what: &'static str,
    },
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error(
        "coordinate descent hit the sweep cap {sweeps} with KKT residual {kkt_residual:.3e} > {tol:.3e}"
    )]
    IterationCap {
        sweeps: usize,
        kkt_residual: f64,
        tol: f64,
        best: crate::qp::QpSolution,
    },
    #[error("neighbor plan missing for node {node}")]
    MissingNeighbor { node: usize },
    #[error("unexpected plan supplied for non-neighbor node {node}")]
    UnexpectedNeighbor { node: usize },
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("problem validation failed: {0}")]
    Validation(String),
    #[error("agent {node}: subproblem failed: {source}")]
    Subproblem {
        node: usize,
        #[source]
        source: QpError,
    },
    #[error("protocol error at agent {node}: {message}")]
    Protocol { node: usize, message: String },
    #[error("departure of node {node} rejected: {message}")]
    Departure { node: usize, message: String },
    #[error("event schedule invalid: {0}")]
    BadSchedule(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Error)]
pub enum DriverError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json parse error at line {line}, column {column}: {message}")]
    Json {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid problem file: {0}")]
    Schema(String),
    #[error("parse error at line {line}: {message}")]
    Csv { line: usize, message: String },
}

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("marginals must be positive with equal sums: {0}")]
    BadMarginals(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("gamma must be positive for entropic regularization, got {0}")]
    BadGamma(f64),
    #[error(
        "reference solve did not converge: residual {residual:.3e} after {iterations} iterations"
    )]
    ReferenceNotConverged { residual: f64, iterations: usize },
    #[error("reference solve disagrees with grid-search cross-check by {delta:.3e}")]
    OracleMismatch { delta: f64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}
