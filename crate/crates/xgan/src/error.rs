use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, XganError>;

#[derive(Debug, thiserror::Error)]
pub enum XganError {
    /// Invalid configuration (bad widths, incompatible sizes, missing inputs).
    /// Maps to exit code 2 in the CLI.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dim(String),

    #[error("data error: {0}")]
    Data(String),

    /// Non-finite loss or other numeric failure; training aborts on these.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl XganError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> XganError {
        XganError::Io {
            path: path.into(),
            source,
        }
    }

    /// CLI exit code: 2 for usage/configuration problems, 1 for runtime ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            XganError::Config(_) | XganError::Schema(_) => 2,
            _ => 1,
        }
    }
}
