use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// The CLI maps `Domain`, `Dimension`, `Config` and `Format` to exit status 2
/// (validation) and everything else to exit status 1 (runtime).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("training diverged at step {step}: {detail}")]
    Training { step: usize, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("version error: {0}")]
    Version(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// True for errors caused by bad input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dimension(_) | Error::Domain(_) | Error::Config(_) | Error::Format(_) | Error::Version(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
