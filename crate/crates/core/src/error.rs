use thiserror::Error;

/// Errors produced by grid construction, evaluation, training, and solving.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid patch scheme: {0}")]
    InvalidScheme(String),

    #[error("input {value} outside domain [{lo}, {hi}] in dimension {dim}")]
    OutOfDomain { dim: usize, value: f64, lo: f64, hi: f64 },

    #[error("batch entry {index}: {source}")]
    BatchEntry {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("second derivatives require poly_order >= 2 (got P={0})")]
    SecondDerivativeUnavailable(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid model configuration: {0}")]
    InvalidModel(String),

    #[error("non-finite {what} encountered{context}")]
    NonFinite { what: String, context: String },

    #[error("invalid bounds: {0}")]
    InvalidBounds(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("{path}:{line}: {msg}")]
    CsvParse { path: String, line: usize, msg: String },

    #[error("unknown synthetic function '{0}'")]
    UnknownFunction(String),

    #[error("invalid training config: {0}")]
    InvalidConfig(String),

    #[error("training diverged at epoch {epoch}: {msg}")]
    Diverged { epoch: usize, msg: String },

    #[error("quadrature order {got} below required {required}")]
    QuadratureOrder { got: usize, required: usize },

    #[error("matrix not positive definite at row {0}")]
    NotPositiveDefinite(usize),

    #[error("linear system is singular at pivot {0}")]
    SingularSystem(usize),

    #[error("CFL violation: k*dt/dx^2 = {0} > 0.5")]
    CflViolation(f64),

    #[error("strong IC/BC imposition infeasible: {0}")]
    InfeasibleImposition(String),

    #[error("calibration failed: {0}")]
    CalibrationFailed(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
