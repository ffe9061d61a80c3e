use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("quadrature did not reach tolerance {tol:e} (estimated error {estimated:e})")]
    QuadratureFailure { estimated: f64, tol: f64 },

    #[error("log-likelihood is not finite")]
    NonFiniteLikelihood,

    #[error("covariate `{0}` has zero standard deviation")]
    DegenerateColumn(String),

    #[error("design matrix is singular")]
    SingularDesign,

    #[error("linear solve failed for the {0} block")]
    BlockSolveFailure(&'static str),

    #[error("no ascent direction after {0} step halvings")]
    NoAscentDirection(usize),

    #[error("telescope step {step}: {source}")]
    Telescope {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("information matrix is singular on the active set")]
    SingularInformation,

    #[error("variable `{variable}` is not active in the {component} component")]
    VariableNotActive { variable: String, component: String },

    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("non-numeric value {value:?} at row {row}, column `{column}`")]
    NonNumericCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("missing value at row {row}, column `{column}`")]
    MissingValue { row: usize, column: String },

    #[error("{failed} of {total} bootstrap resamples failed")]
    BootstrapFailed { failed: usize, total: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::QuadratureFailure { .. } => "QuadratureFailure",
            Error::NonFiniteLikelihood => "NonFiniteLikelihood",
            Error::DegenerateColumn(_) => "DegenerateColumn",
            Error::SingularDesign => "SingularDesign",
            Error::BlockSolveFailure(_) => "BlockSolveFailure",
            Error::NoAscentDirection(_) => "NoAscentDirection",
            Error::Telescope { source, .. } => source.kind(),
            Error::SingularInformation => "SingularInformation",
            Error::VariableNotActive { .. } => "VariableNotActive",
            Error::UnknownCovariate(_) => "UnknownCovariate",
            Error::MissingColumn(_) => "MissingColumn",
            Error::NonNumericCell { .. } => "NonNumericCell",
            Error::MissingValue { .. } => "MissingValue",
            Error::BootstrapFailed { .. } => "BootstrapFailed",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Io(_) => "Io",
            Error::Csv(_) => "Csv",
            Error::Json(_) => "Json",
        }
    }
}
