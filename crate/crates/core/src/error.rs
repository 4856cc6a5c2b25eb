use std::path::PathBuf;

use fpt_numerics::NumericsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FptError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("freeze contract violated: {0}")]
    FreezeContract(String),
    #[error("stale cache: built for config hash {found:016x}, current run expects {expected:016x}")]
    StaleCache { expected: u64, found: u64 },
    #[error("cache lookup failed: {0}")]
    CacheLookup(String),
    #[error("cache at {0} is incomplete; rebuild it with --force")]
    PartialCache(PathBuf),
    #[error("cache already exists at {0} (use --force to rebuild)")]
    CacheExists(PathBuf),
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("loss became non-finite at epoch {epoch}, step {step} (loss = {loss})")]
    NanLoss { epoch: usize, step: usize, loss: f32 },
    #[error("AUC is undefined: {0}")]
    UndefinedAuc(String),
    #[error("domain error: {0}")]
    Domain(String),
}

pub type Result<T> = std::result::Result<T, FptError>;

impl FptError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
