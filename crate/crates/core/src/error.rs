use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("token {token} out of range for vocabulary of size {vocab_size}")]
    Vocabulary { token: usize, vocab_size: usize },

    #[error("{path}: bad magic, expected {expected:?}")]
    BadMagic { path: PathBuf, expected: String },

    #[error("{path}: unsupported format version {found} (expected {expected})")]
    UnsupportedVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: config hash {found:#018x} does not match expected {expected:#018x}")]
    ConfigHash {
        path: PathBuf,
        found: u64,
        expected: u64,
    },

    #[error("{path}: file truncated")]
    Truncated { path: PathBuf },

    #[error("{path}: checksum mismatch, file is corrupt")]
    Checksum { path: PathBuf },

    #[error("{path}: malformed record: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("training diverged at step {step} (last finite step: {last_finite:?})")]
    NonFinite {
        step: usize,
        last_finite: Option<usize>,
    },

    #[error("missing artifact {path}; run `otpel {producer}` first")]
    MissingArtifact { path: PathBuf, producer: &'static str },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable short code for each failure class, used for CLI exit reporting.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "E_SHAPE",
            Error::Config(_) => "E_CONFIG",
            Error::Contract(_) => "E_CONTRACT",
            Error::Vocabulary { .. } => "E_VOCAB",
            Error::BadMagic { .. } => "E_MAGIC",
            Error::UnsupportedVersion { .. } => "E_VERSION",
            Error::ConfigHash { .. } => "E_CONFIG_HASH",
            Error::Truncated { .. } => "E_TRUNCATED",
            Error::Checksum { .. } => "E_CHECKSUM",
            Error::Malformed { .. } => "E_MALFORMED",
            Error::NonFinite { .. } => "E_DIVERGED",
            Error::MissingArtifact { .. } => "E_MISSING",
            Error::Io { .. } => "E_IO",
            Error::Csv(_) => "E_CSV",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
