use thiserror::Error;

pub type Result<T> = std::result::Result<T, IbError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IbError {
    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("linear solver did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    SolverDiverged { iterations: usize, residual: f64 },

    #[error("RBF interpolation matrix is ill-conditioned (min/max eigenvalue ratio {ratio:.3e}); increase epsilon")]
    IllConditioned { ratio: f64 },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("numerical blow-up at step {step} (t = {time:.6}): {reason}")]
    BlowUp { step: u64, time: f64, reason: String },

    #[error("wrong membrane backend: {0}")]
    WrongBackend(String),

    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("i/o error: {0}")]
    Io(String),
}

impl IbError {
    /// Attaches step/time context to errors raised deep inside a step.
    pub fn at_step(self, step: u64, time: f64) -> IbError {
        match self {
            IbError::DegenerateGeometry(msg) => {
                IbError::DegenerateGeometry(format!("{msg} (step {step}, t = {time:.6})"))
            }
            other => other,
        }
    }
}

impl From<std::io::Error> for IbError {
    fn from(e: std::io::Error) -> Self {
        IbError::Io(e.to_string())
    }
}
