use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The integrated state left the divergence guard.
    #[error("orbit diverged at t = {time} (sup-norm {norm:.3e} > {limit})")]
    OrbitDivergence { time: f64, norm: f64, limit: f64 },

    #[error("orbit {orbit} diverged at t = {time}")]
    DatasetDivergence { orbit: usize, time: f64 },

    #[error("unsupported spectrum: {0}")]
    UnsupportedSpectrum(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("inconsistent data: {0}")]
    Consistency(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Coefficients outside the open feasible set of the barrier.
    #[error("coefficients are infeasible: {0}")]
    Infeasible(String),

    #[error("degenerate map: mean |det| of the learned Jacobian is zero")]
    DegenerateMap,

    #[error("spectrum identification failed: {0}")]
    SpectrumIdentification(String),

    #[error("tuning failed: {0}")]
    Tuning(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
