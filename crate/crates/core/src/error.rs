use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {op} got {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("cohort generation failed: {0}")]
    Generation(String),

    #[error("stratification failed: {0}")]
    Stratification(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("undefined metric: {0}")]
    Metric(String),

    #[error("stage `{stage}` failed in round {round}: {source}")]
    Stage {
        stage: &'static str,
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Dimension { op, left, right }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn at_stage(self, stage: &'static str, round: usize) -> Self {
        Error::Stage {
            stage,
            round,
            source: Box::new(self),
        }
    }

    /// Process exit code for the command line: 2 config, 3 data, 4 training.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 2,
            Error::Training { .. } => 4,
            Error::Stage { source, .. } => source.exit_code(),
            Error::Dimension { .. }
            | Error::Contract(_)
            | Error::Generation(_)
            | Error::Stratification(_)
            | Error::Format { .. }
            | Error::Metric(_)
            | Error::Io(_) => 3,
        }
    }
}
