use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown scheme `{0}`")]
    UnknownScheme(String),

    #[error("{0} has no Butcher tableau pair")]
    NoTableau(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is singular to working precision at column {column}")]
    SingularPivot { column: usize },

    #[error("operator has no dense form; a direct solve needs a materialized matrix")]
    NotMaterialized,

    #[error("GMRES did not converge in {iterations} iterations (best relative residual {best_residual:.3e})")]
    KrylovNoConvergence {
        iterations: usize,
        best_residual: f64,
    },

    #[error("Newton iteration diverged after {} iterations (residual history {:?})", residual_history.len().saturating_sub(1), residual_history)]
    NewtonDivergence { residual_history: Vec<f64> },

    #[error("non-finite or unbounded state at stage {stage}")]
    BlowUp { stage: usize },

    #[error("prediction grew to {ratio:.3e} times the data scale (limit {limit})")]
    UnstablePrediction { ratio: f64, limit: f64 },

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("epoch {epoch}, batch {batch}: {source}")]
    InTraining {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("missing stage record for step {0}")]
    MissingStageRecord(usize),

    #[error("non-finite gradient entry at index {0}")]
    NonFiniteGradient(usize),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("file is truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Coarse failure classes, used by the CLI to pick exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FailureClass {
    Config,
    SolverDivergence,
    BlowUp,
    Io,
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }

    /// Strips step/epoch annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } | Error::InTraining { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn class(&self) -> FailureClass {
        match self.root() {
            Error::SingularPivot { .. }
            | Error::KrylovNoConvergence { .. }
            | Error::NewtonDivergence { .. } => FailureClass::SolverDivergence,
            Error::BlowUp { .. } | Error::UnstablePrediction { .. } | Error::NonFiniteGradient(_) => FailureClass::BlowUp,
            Error::Io(_) | Error::Format(_) | Error::Truncated { .. } => FailureClass::Io,
            _ => FailureClass::Config,
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
