use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] sdum_autograd::Error),
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("{}: {detail}", path.display())]
    Io { path: PathBuf, detail: String },
    #[error("{}: format version {found}, expected {expected}", path.display())]
    Version { path: PathBuf, found: u32, expected: u32 },
    #[error("parameter `{key}`: {detail}")]
    Param { key: String, detail: String },
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}; last good checkpoint: {}", last_good.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    NonFinite { step: usize, last_good: Option<PathBuf> },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Io { path: path.into(), detail: err.to_string() }
    }
}

macro_rules! invalid {
    ($($arg:tt)*) => { $crate::Error::Validation(format!($($arg)*)) };
}
pub(crate) use invalid;
