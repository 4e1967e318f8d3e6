use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {context}")]
    RejectNonFinite { context: String },

    #[error("missing shard {}", path.display())]
    MissingShard { path: PathBuf },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("unsupported format_version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("pairing mismatch on field `{field}`")]
    Pairing { field: &'static str },

    #[error("scenario text is empty")]
    EmptyScenario,

    #[error("index error: {0}")]
    Index(String),

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("too few layers: need at least 2, got {0}")]
    TooFewLayers(usize),

    #[error("too few token positions: need at least 2, got {0}")]
    TooFewPositions(usize),

    #[error("difference matrix is degenerate (zero variance)")]
    DegenerateDifference,

    #[error("power iteration did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("orientation is ambiguous (margin {margin:e})")]
    AmbiguousOrientation { margin: f64 },

    #[error("tokenization error: {0}")]
    Tokenization(String),

    #[error("prompt of {len} tokens exceeds context length {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("training diverged at step {step} (loss {loss})")]
    TrainingDiverged { step: usize, loss: f32 },

    #[error("provenance mismatch: {0}")]
    Provenance(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint {checkpoint}, layer {layer}: {source}")]
    Cell {
        checkpoint: usize,
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for this error: 2 validation, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::MissingShard { .. } => 4,
            Error::RejectNonFinite { .. }
            | Error::DegenerateDifference
            | Error::Convergence { .. }
            | Error::AmbiguousOrientation { .. }
            | Error::TrainingDiverged { .. } => 3,
            Error::Cell { source, .. } => source.exit_code(),
            _ => 2,
        }
    }

    /// Stable variant name for machine-readable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self.root() {
            Error::RejectNonFinite { .. } => "RejectNonFinite",
            Error::MissingShard { .. } => "MissingShard",
            Error::Shape(_) => "ShapeError",
            Error::Version { .. } => "VersionError",
            Error::Pairing { .. } => "PairingError",
            Error::EmptyScenario => "EmptyScenario",
            Error::Index(_) => "IndexError",
            Error::TooFewSamples { .. } => "TooFewSamples",
            Error::TooFewLayers(_) => "TooFewLayers",
            Error::TooFewPositions(_) => "TooFewPositions",
            Error::DegenerateDifference => "DegenerateDifference",
            Error::Convergence { .. } => "ConvergenceError",
            Error::AmbiguousOrientation { .. } => "AmbiguousOrientation",
            Error::Tokenization(_) => "TokenizationError",
            Error::ContextOverflow { .. } => "ContextOverflow",
            Error::TrainingDiverged { .. } => "TrainingDiverged",
            Error::Provenance(_) => "ProvenanceError",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Json(_) => "JsonError",
            Error::Io(_) => "IoError",
            Error::Cell { .. } => unreachable!("root strips cells"),
        }
    }

    pub(crate) fn at_cell(self, checkpoint: usize, layer: usize) -> Error {
        Error::Cell {
            checkpoint,
            layer,
            source: Box::new(self),
        }
    }

    /// Strips any `Cell` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Cell { source, .. } => source.root(),
            other => other,
        }
    }
}
