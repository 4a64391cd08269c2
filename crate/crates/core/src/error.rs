use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

/// Dense linear-algebra failures.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("{what}: matrix is not positive definite even after diagonal jitter up to 1e-6")]
    NotPositiveDefinite { what: String },
    #[error("{what}: expected {expected} but got {got}")]
    Dimension {
        what: String,
        expected: String,
        got: String,
    },
}

/// Invalid arguments to a sampling or density primitive.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// A single failed configuration predicate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Every violation found while validating or parsing a configuration.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ConfigErrors(pub Vec<Violation>);

impl ConfigErrors {
    pub fn single(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self(vec![Violation {
            field: field.into(),
            message: message.into(),
        }])
    }

    pub fn mentions(&self, field: &str) -> bool {
        self.0.iter().any(|v| v.field == field)
    }
}

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration ({} problem(s))", self.0.len())?;
        for v in &self.0 {
            write!(f, "\n  - {v}")?;
        }
        Ok(())
    }
}

/// Problems with input data files or in-memory datasets.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("no data rows")]
    Empty,
    #[error("line {line}, column '{column}': {message}")]
    Cell {
        line: usize,
        column: String,
        message: String,
    },
    #[error("missing column '{0}'")]
    MissingColumn(String),
    #[error("{0}")]
    Invalid(String),
}

/// Hard failure inside a running chain.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("chain {chain}, iteration {iteration}: {source}")]
pub struct SamplerError {
    pub chain: usize,
    pub iteration: usize,
    #[source]
    pub source: DistError,
}

/// Top-level error type for the orchestration layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigErrors),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Diagnostics(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Validation problems map to exit code 2, sampler failures to 3.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Data(_) | Error::Diagnostics(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
