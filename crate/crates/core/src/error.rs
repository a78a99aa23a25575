use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("edge ({0}, {1}) references a node outside 0..{2}")]
    NodeOutOfRange(usize, usize, usize),
    #[error("self loop at node {0}")]
    SelfLoop(usize),
    #[error("edge ({0}, {1}) has non-positive or non-finite weight {2}")]
    NonpositiveWeight(usize, usize, f64),
    #[error("edge ({0}, {1}) listed in both orientations with weights {2} and {3}")]
    AsymmetricWeight(usize, usize, f64, f64),
    #[error("edge ({0}, {1}) listed twice")]
    DuplicateEdge(usize, usize),
    #[error("graph is disconnected ({0} components)")]
    DisconnectedGraph(usize),
    #[error("graph Laplacian is singular")]
    SingularLaplacian,
    #[error("density vanishes at node {0}; this theta needs a strictly positive density")]
    BoundaryDensity(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("phase point chart {got} does not match Hamiltonian chart {expected}")]
    ChartMismatch {
        expected: &'static str,
        got: &'static str,
    },
    #[error("non-finite value: {0}")]
    NonfiniteValue(String),
    #[error("integration blew up at t = {t}: {reason}")]
    BlowUp { t: f64, reason: String },
    #[error("mass defect {defect:e} at t = {t} exceeds 1e-9")]
    MassDefect { t: f64, defect: f64 },
    #[error("implicit step did not converge in 50 fixed point iterations at t = {0}")]
    NonconvergentImplicitStep(f64),
    #[error("f_{0} g_{0} = {1} is not positive; cannot invert the Madelung transform")]
    NonpositiveFg(usize, f64),
    #[error("invalid generator at t = {t}: {violations} violation(s), first: {first}")]
    InvalidGenerator {
        t: f64,
        violations: usize,
        first: String,
    },
    #[error("sampled diagonal rate {rate} exceeds uniformization bound {bound} at t = {t}")]
    RateBoundExceeded { t: f64, rate: f64, bound: f64 },
    #[error("generator is not smooth; supply an explicit rate bound")]
    RateBoundRequired,
    #[error("marginal {0} is invalid: {1}")]
    InvalidMarginal(&'static str, String),
    #[error("reference kernel has no support from node {from} to node {to}")]
    ZeroKernel { from: usize, to: usize },
    #[error("bridge iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },
    #[error("negative one-step probability {value} at node {node}, step {step}; increase N")]
    NegativeStepProbability { node: usize, step: usize, value: f64 },
    #[error("path enumeration would visit {0} paths, above the 1e7 limit")]
    PathExplosion(f64),
    #[error("density is not strictly positive at t = {t} (node {node}, value {value})")]
    NonPositiveDensity { t: f64, node: usize, value: f64 },
    #[error("periodic density has no Hamiltonian cycle support")]
    NoCycleSupport,
    #[error("no scale K up to 2^30 keeps the periodic rates valid")]
    PeriodicScaleNotFound,
    #[error("density is not stationary for the reference generator (residual {0:e})")]
    NotStationary(f64),
    #[error("operation requires a differentiable Hamiltonian; {0} is not")]
    NonsmoothSpec(&'static str),
    #[error("state lies within {margin:e} of an upwind branch boundary on edge ({i}, {j})")]
    KinkProximity { i: usize, j: usize, margin: f64 },
    #[error("bridged rate from {0} to {1} is positive where the reference rate vanishes")]
    SupportMismatch(usize, usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
