//! Crate-wide error type.

use crate::solve::NewtonStep;

/// Structured report produced when a data-generating process fails
/// validation. Each issue is a standalone human-readable finding.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<String>,
}

impl ValidationReport {
    pub fn push(&mut self, issue: impl Into<String>) {
        self.issues.push(issue.into());
    }

    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.issues.join("; "))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("panel: {0}")]
    Panel(String),

    #[error("invalid dgp: {0}")]
    InvalidDgp(ValidationReport),

    #[error("config: {0}")]
    Config(String),

    /// Singular or ill-conditioned linear systems, failed matrix factorizations.
    #[error("numeric: {0}")]
    Numeric(String),

    /// Root finding gave up; the trace carries the residual curve.
    #[error("no root found: {message}")]
    NoRoot {
        message: String,
        trace: Vec<NewtonStep>,
    },

    /// A reference density or fitted probability hit zero where it must be positive.
    #[error("positivity: {0}")]
    Positivity(String),

    /// The instrument does not move the treatment anywhere.
    #[error("iv relevance: {0}")]
    Relevance(String),

    #[error("enumeration: {0}")]
    Enumeration(String),

    #[error("estimation: {0}")]
    Estimation(String),
}
