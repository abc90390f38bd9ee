use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors surfaced by the library. The `Display` strings of the kebab-case
/// variants are stable and used as machine-readable codes by the CLI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty-shape")]
    EmptyShape,
    #[error("degenerate-shape: {points} interior points, need {required}")]
    DegenerateShape { points: usize, required: usize },
    #[error("not-a-fan")]
    NotAFan,
    #[error("not-a-disc")]
    NotADisc,
    #[error("out-of-extent: ({x:.3}, {y:.3}) lies outside the grid")]
    OutOfExtent { x: f64, y: f64 },
    #[error("null-feature")]
    NullFeature,
    #[error("cold-prototype: class {0}")]
    ColdPrototype(usize),
    #[error("non-finite input")]
    NonFinite,
    #[error("shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {value}")]
    InvalidValue { key: String, value: String },
    #[error("negative matching threshold {0}")]
    NegativeThreshold(f64),
    #[error("non-finite loss at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("missing prerequisite {path}: {hint}")]
    MissingPrerequisite { path: PathBuf, hint: String },
    #[error("bad file format: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by a bad configuration rather than by the run itself.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::UnknownKey(_)
                | Error::InvalidValue { .. }
                | Error::NegativeThreshold(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
