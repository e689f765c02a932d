use std::path::PathBuf;

use thiserror::Error;

use crate::losses::Term;

pub type Result<T> = std::result::Result<T, CdaError>;

#[derive(Debug, Error)]
pub enum CdaError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("domain {domain} has no known-class samples for {context}")]
    EmptyPopulation {
        domain: crate::domain::DomainId,
        context: &'static str,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate training set: {0}")]
    DegenerateTraining(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("non-finite value in {term} ({what})")]
    NonFinite { term: Term, what: &'static str },

    #[error("protocol infeasible: {0}")]
    Infeasible(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error on {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("pipeline failed at outer iteration {iteration}: {source}")]
    Pipeline {
        iteration: usize,
        history: Vec<crate::pipeline::IterationRecord>,
        #[source]
        source: Box<CdaError>,
    },
}

impl CdaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CdaError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        CdaError::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
