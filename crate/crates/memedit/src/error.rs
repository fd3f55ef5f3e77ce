use std::path::PathBuf;

/// Errors reading or writing artifact files.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Malformed { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {source}")]
    Invalid { path: PathBuf, source: memedit_core::Error },
    #[error("{path}: digest mismatch (header {expected}, content {actual})")]
    DigestMismatch { path: PathBuf, expected: String, actual: String },
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

impl FormatError {
    pub(crate) fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
        move |source| FormatError::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn malformed(path: &std::path::Path, line: usize, msg: impl Into<String>) -> FormatError {
        FormatError::Malformed { path: path.to_path_buf(), line, msg: msg.into() }
    }

    pub(crate) fn invalid(path: &std::path::Path) -> impl FnOnce(memedit_core::Error) -> FormatError + '_ {
        move |source| FormatError::Invalid { path: path.to_path_buf(), source }
    }
}

pub type Result<T, E = FormatError> = std::result::Result<T, E>;
