use thiserror::Error;

use crate::approximator::Network;
use crate::closedloop::SimulationResult;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("degenerate spectrum: no eigenvalue with negative real part")]
    DegenerateSpectrum,

    #[error("condition C1 violated: H0 has an eigenvalue with |Re| = {min_abs_re:e} (tolerance {tol:e})")]
    ConditionC1Violated { min_abs_re: f64, tol: f64 },

    #[error("Hamiltonian matrix not hyperbolic: {stable} stable eigenvalues for n = {n}, min |Re| = {min_abs_re:e}")]
    NotHyperbolic {
        n: usize,
        stable: usize,
        min_abs_re: f64,
    },

    #[error("stable subspace is not a graph over x (basis block condition {condition:e})")]
    SubspaceNotGraph { condition: f64 },

    #[error("no stabilizing solution: min eigenvalue of P is {min_eig:e}")]
    NoStabilizingSolution { min_eig: f64 },

    #[error("resonant spectrum: Lyapunov operator is singular")]
    ResonantSpectrum,

    #[error("inconsistent certificate: {what} off by {err:e}")]
    InconsistentCertificate { what: &'static str, err: f64 },

    #[error("BVP iteration did not converge after {iterations} iterations (last update {update:e})")]
    BvpDiverged { iterations: usize, update: f64 },

    #[error("BVP iterate blew up at iteration {iteration} (norm {norm:e} > cap {cap:e})")]
    BvpBlowup {
        iteration: usize,
        norm: f64,
        cap: f64,
    },

    #[error("integrator step size underflow at t = {t}")]
    StiffExtension { t: f64 },

    #[error("backward extension left the domain box at t = {t}")]
    LeftDomain { t: f64 },

    #[error("method unavailable: {0}")]
    MethodUnavailable(&'static str),

    #[error("trajectory generation failed: {accepted} of {attempted} accepted; {diagnostics}")]
    GenerationFailed {
        accepted: usize,
        attempted: usize,
        diagnostics: String,
    },

    #[error("adaptive refinement failed: all {attempted} spawned trajectories rejected")]
    RefineFailed { attempted: usize },

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged {
        epoch: usize,
        last_finite: Box<Network>,
    },

    #[error("instability detected at t = {t}: |x| = {norm:e}")]
    InstabilityDetected {
        t: f64,
        norm: f64,
        partial: Box<SimulationResult>,
    },

    #[error("decay violation: fitted rate {rate} is not negative")]
    DecayViolation { rate: f64 },

    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },

    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdentifier { name: String, offset: usize },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("{file}: {message}")]
    Format { file: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
