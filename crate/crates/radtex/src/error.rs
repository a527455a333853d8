use std::path::PathBuf;

/// Errors from file handling, configuration and the experiment harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] radtex_core::Error),
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Core(radtex_core::Error::Config(msg.into()))
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Core(radtex_core::Error::Config(_)) | Self::Json(_) => "config",
            Self::Core(radtex_core::Error::Format(_)) | Self::Csv(_) => "format",
            Self::Core(_) => "compute",
            Self::Io { .. } => "io",
        }
    }

    /// Process exit status: 3 for invalid configuration, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.kind() == "config" {
            3
        } else {
            1
        }
    }
}

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io { path: path.into(), source })
    }
}
