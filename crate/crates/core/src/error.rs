use thiserror::Error;

/// Errors raised by grid construction, operator assembly and the solvers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("stability parameter s = {0} must lie in (0, 1)")]
    InvalidStability(f64),

    #[error("Riesz potentials need a transient process (d = 1 requires s < 1/2), got d = {dim}, s = {s}")]
    Recurrent { dim: usize, s: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{solver} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NotConverged {
        solver: &'static str,
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error("initial data has a mushy region: {0}")]
    MushyRegion(String),

    #[error("inadmissible problem data: {0}")]
    InvalidData(String),

    #[error("solver produced a negative temperature ({value:.3e}) beyond tolerance at slice {slice}")]
    NegativeTemperature { slice: usize, value: f64 },

    #[error("too few surviving samples in the fit window: {0} (need at least 100)")]
    InsufficientSurvivors(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
