use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = OweError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum OweError {
    #[error("{quantity} out of domain: {detail}")]
    Domain { quantity: &'static str, detail: String },

    #[error("transmitter and receiver share the same position")]
    CoincidentPositions,

    #[error("integration cell {cell_m} m must be smaller than the integration extent {extent_m} m")]
    IntegrationGrid { cell_m: f64, extent_m: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("feedback system unstable: spectral radius {spectral_radius:.6} not below {limit:.6}")]
    Unstable { spectral_radius: f64, limit: f64 },

    #[error("common gain {requested:.6e} unstable; largest feasible equal gain is {max_feasible:.6e}")]
    GainInfeasible { requested: f64, max_feasible: f64 },

    #[error("power iteration did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("initial gains infeasible: spectral radius {spectral_radius:.6} not below {limit:.6}")]
    InfeasibleStart { spectral_radius: f64, limit: f64 },

    #[error("links {0} and {1} belong to the same BSS")]
    SameBss(usize, usize),

    #[error("channel matrix has no nonzero entry")]
    ZeroChannel,

    #[error("EAs unreachable from the AP EA: {unreachable:?}")]
    Disconnected { unreachable: Vec<usize> },

    #[error("probe state unstable while EA {emitter} emits: spectral radius {spectral_radius:.6}")]
    ProbeUnstable { emitter: usize, spectral_radius: f64 },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("scenario: {0}")]
    Scenario(String),

    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl OweError {
    pub(crate) fn domain(quantity: &'static str, detail: impl Into<String>) -> Self {
        OweError::Domain { quantity, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OweError::Io { path: path.into(), source }
    }
}
