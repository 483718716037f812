use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{file}: line {line}: {message}")]
    Parse {
        file: String,
        line: u64,
        message: String,
    },

    #[error("network: {0}")]
    Network(String),

    #[error("panel: {0}")]
    Panel(String),

    #[error("treatment: {0}")]
    Treatment(String),

    #[error("absorption did not converge after {iterations} iterations (last max group mean {last:.3e}, tol {tol:.1e})")]
    NonConvergence {
        iterations: usize,
        last: f64,
        tol: f64,
        /// Max residual group mean after each sweep (the most recent entries).
        trace: Vec<f64>,
    },

    #[error("hdfe: {0}")]
    Hdfe(String),

    #[error("design matrix is rank deficient; collinear columns: {}", columns.join(", "))]
    Collinear { columns: Vec<String> },

    #[error("model is under-identified: {instruments} excluded instruments for {endogenous} endogenous regressors")]
    Underidentified {
        instruments: usize,
        endogenous: usize,
    },

    #[error("estimator: {0}")]
    Estimator(String),

    #[error("dgp: {0}")]
    Dgp(String),

    #[error("config: {0}")]
    Config(String),

    #[error("report: {0}")]
    Report(String),

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Pipeline stage that raised the error.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Io(_) | Error::Json(_) => "io",
            Error::Parse { .. } => "input",
            Error::Network(_) => "netcore",
            Error::Panel(_) => "panel",
            Error::Treatment(_) => "treatment",
            Error::NonConvergence { .. } | Error::Hdfe(_) => "hdfe",
            Error::Collinear { .. } | Error::Underidentified { .. } | Error::Estimator(_) => {
                "estimator"
            }
            Error::Dgp(_) => "dgp",
            Error::Config(_) => "config",
            Error::Report(_) => "report",
        }
    }

    pub fn hint(&self) -> &'static str {
        match self {
            Error::Io(_) => "check that input paths exist and the output directory is writable",
            Error::Json(_) => "the file is not a result written by `estimate`",
            Error::Parse { .. } => "fix the offending CSV line; headers must match the documented columns",
            Error::Network(_) => "relax --max-gap or --min-value, or check the edge file's year coverage",
            Error::Panel(_) => "make sure attributes and import statuses cover every firm-year in the window",
            Error::Treatment(_) => "the specification needs treatments that could not be built; check splits and lags",
            Error::NonConvergence { .. } => "raise --max-iter or loosen --tol",
            Error::Hdfe(_) => "check the fixed-effect factor names",
            Error::Collinear { .. } => "drop the named columns or change the fixed-effect set",
            Error::Underidentified { .. } => "add instruments (e.g. the t-3 pair) or drop endogenous regressors",
            Error::Estimator(_) => "inspect the estimation sample; it may be too small",
            Error::Dgp(_) => "adjust the simulator configuration (degrees, grid size, probabilities)",
            Error::Config(_) => "fix the run configuration or command-line flags",
            Error::Report(_) => "make coefficient labels and column titles unique",
        }
    }
}
