use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// The requested prediction needs a non-centered network (bias variance
    /// or an activation with non-zero Gaussian mean).
    #[error("centered network: {0}")]
    CenteredNetwork(String),

    /// Regimes where the object of interest is trivially zero or undefined:
    /// a batch of two under batch normalization, two outputs under layer
    /// normalization, and so on.
    #[error("degenerate regime: {0}")]
    DegenerateRegime(String),

    #[error("zero variance in normalization at layer {layer}, index {index}")]
    DegenerateNormalization { layer: usize, index: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Json(_) => 2,
            Error::CenteredNetwork(_)
            | Error::DegenerateRegime(_)
            | Error::DegenerateNormalization { .. }
            | Error::Precondition(_) => 3,
            Error::Domain(_) | Error::Numerical(_) => 4,
            Error::Io(_) | Error::Csv(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Domain(_) => "domain",
            Error::CenteredNetwork(_) => "centered_network",
            Error::DegenerateRegime(_) => "degenerate_regime",
            Error::DegenerateNormalization { .. } => "degenerate_normalization",
            Error::Precondition(_) => "precondition",
            Error::Numerical(_) => "numerical",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
