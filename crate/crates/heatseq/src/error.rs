use thiserror::Error;

/// Error taxonomy shared across the crate. The CLI maps these onto exit
/// codes: `Config` -> 1, `Format` -> 2, `Numerical` -> 3.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or arguments (bad ranges, incompatible sizes).
    #[error("configuration error: {0}")]
    Config(String),

    /// Runtime shape / domain violations (mismatched arrays, beta <= 0, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// On-disk format problems: bad magic, version, truncation, field mismatch.
    #[error("format error: {0}")]
    Format(String),

    /// Numerical failure: CFL violation, non-finite loss, diverging run.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code the CLI should report for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) => 1,
            Error::Format(_) | Error::Io(_) => 2,
            Error::Numerical(_) => 3,
        }
    }
}
