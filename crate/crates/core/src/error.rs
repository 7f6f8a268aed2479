use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An optimizer step failed; `stage` is "iteration" or "generation".
    #[error("{stage} {index}: {source}")]
    Iteration {
        stage: &'static str,
        index: usize,
        source: Box<Error>,
    },

    #[error("invalid bounds: {0}")]
    InvalidBounds(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid dimension {0}: parameter space must have at least one dimension")]
    InvalidDimension(usize),

    /// Water depth at the marine boundary became non-positive.
    #[error(
        "degenerate configuration at t = {time} s: boundary water depth {depth} m is not positive"
    )]
    DegenerateConfiguration { time: f64, depth: f64 },

    #[error("series are not aligned: {0}")]
    Alignment(String),

    #[error("degenerate metric: {0}")]
    DegenerateMetric(String),

    #[error("design row {row}: {source}")]
    DesignRow { row: usize, source: Box<Error> },

    #[error("ill-posed design: {0}")]
    IllPosedDesign(String),

    #[error("correlation matrix is not positive definite even with nugget {nugget:e}")]
    Conditioning { nugget: f64 },

    #[error("degenerate column for station {0}: constant values")]
    DegenerateColumn(u32),

    #[error("non-finite function value at {0}")]
    Evaluation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    /// A pipeline stage was requested before its prerequisites completed,
    /// or a registered artifact is missing.
    #[error("stage error: {0}")]
    Stage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("scenario file: {0}")]
    Scenario(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn at_row(self, row: usize) -> Self {
        Error::DesignRow {
            row,
            source: Box::new(self),
        }
    }
}
