use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} = {value} out of range [{min}, {max}]")]
    Range {
        what: &'static str,
        value: i64,
        min: i64,
        max: i64,
    },

    #[error("non-finite value in {context} (segment `{segment}`)")]
    Numeric { context: String, segment: String },

    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("unknown parameter segment `{0}`")]
    UnknownSegment(String),

    #[error("unknown example id {0}")]
    UnknownId(u64),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("non-finite update at unlearning step {step} (largest change in segment `{segment}`)")]
    UnlearnDiverged { step: usize, segment: String },

    #[error("non-finite gradient in Fisher draw {draw}")]
    FisherDraw { draw: u64 },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("dependency missing: expected {0}")]
    DependencyMissing(PathBuf),

    #[error("provenance conflict: {0}")]
    ProvenanceConflict(String),

    #[error("query {0} has no recorded eps_seed")]
    MissingEpsSeed(u64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable tag, used by the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Range { .. } => "range",
            Error::Numeric { .. } => "numeric",
            Error::Validation(_) => "validation",
            Error::LayoutMismatch(_) => "layout_mismatch",
            Error::UnknownSegment(_) => "unknown_segment",
            Error::UnknownId(_) => "unknown_id",
            Error::EmptyDataset => "empty_dataset",
            Error::Divergence { .. } => "divergence",
            Error::UnlearnDiverged { .. } => "unlearn_diverged",
            Error::FisherDraw { .. } => "fisher_draw",
            Error::Format { .. } => "format",
            Error::DependencyMissing(_) => "dependency missing",
            Error::ProvenanceConflict(_) => "provenance conflict",
            Error::MissingEpsSeed(_) => "missing_eps_seed",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub(crate) fn check_range(what: &'static str, value: usize, min: usize, max: usize) -> Result<()> {
    if value < min || value > max {
        return Err(Error::Range {
            what,
            value: value as i64,
            min: min as i64,
            max: max as i64,
        });
    }
    Ok(())
}
