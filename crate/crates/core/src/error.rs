use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised across the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input data. `row` is the 1-based CSV line (the header is line 1).
    #[error("invalid data at {}: {message}", location(*row, column.as_deref()))]
    Data {
        row: Option<u64>,
        column: Option<String>,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matching infeasible: {reason} (unmatched treated: {})", unmatched.join(", "))]
    Infeasible {
        reason: String,
        unmatched: Vec<String>,
    },

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("bootstrap failed: {failed} of {replicates} replicates errored ({breakdown})")]
    Bootstrap {
        failed: usize,
        replicates: usize,
        breakdown: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn location(row: Option<u64>, column: Option<&str>) -> String {
    match (row, column) {
        (Some(r), Some(c)) => format!("row {r}, column `{c}`"),
        (Some(r), None) => format!("row {r}"),
        (None, Some(c)) => format!("column `{c}`"),
        (None, None) => "input".to_string(),
    }
}

impl Error {
    pub(crate) fn data(row: Option<u64>, column: Option<&str>, message: impl Into<String>) -> Self {
        Error::Data {
            row,
            column: column.map(str::to_string),
            message: message.into(),
        }
    }

    /// Stable short tag used in machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Data { .. } => "data",
            Error::Schema(_) => "schema",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Infeasible { .. } => "infeasible",
            Error::Estimation(_) => "estimation",
            Error::Bootstrap { .. } => "bootstrap",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// True for errors caused by invalid user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Data { .. } | Error::Schema(_) | Error::InvalidArgument(_)
        )
    }
}
