//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by configuration, protocol, and numeric routines.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller violated a documented API contract (dimension mismatch etc.).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input too small for the requested statistic.
    #[error("precondition not met: {0}")]
    Precondition(String),

    /// Problem size exceeds an intentional cap.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Requested target lies outside the attainable range.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// Quantity diverges for the given input.
    #[error("divergent: {0}")]
    Divergence(String),

    /// Numerical failure (singular matrix etc.) with diagnostics.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    TomlParse(#[from] toml::de::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable machine-readable kind tag used in CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Precondition(_) => "precondition",
            Error::Capacity(_) => "capacity",
            Error::Infeasible(_) => "infeasible",
            Error::Divergence(_) => "divergence",
            Error::Numerical(_) => "numerical",
            Error::Io(_) => "io",
            Error::TomlParse(_) => "config",
            Error::Json(_) => "io",
            Error::Csv(_) => "io",
        }
    }
}
