use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-binary mask value {value} at {position}")]
    NonBinary { value: f64, position: String },

    #[error("malformed RLE: counts sum to {sum}, expected {expected}")]
    MalformedRle { sum: u64, expected: u64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no annotations.json under {0}")]
    NoAnnotations(PathBuf),

    #[error("clip {clip}: invalid field `{field}`: {reason}")]
    Annotation {
        clip: String,
        field: String,
        reason: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{n_gt} ground-truth tracks but only {n_queries} queries; raise the query count N")]
    TooFewQueries { n_gt: usize, n_queries: usize },

    #[error("synthetic generation failed: {0}")]
    Synth(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("predictions: {0}")]
    Predictions(String),

    #[error("training diverged at iteration {iteration}: loss is not finite")]
    Diverged { iteration: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonBinary { .. } => "non_binary",
            Error::MalformedRle { .. } => "malformed_rle",
            Error::Shape(_) => "shape",
            Error::NoAnnotations(_) => "no_annotations",
            Error::Annotation { .. } => "annotation",
            Error::Config(_) => "config",
            Error::NonFinite(_) => "non_finite",
            Error::TooFewQueries { .. } => "too_few_queries",
            Error::Synth(_) => "synth",
            Error::Checkpoint(_) => "checkpoint",
            Error::Predictions(_) => "predictions",
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json { .. } => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn annotation(
        clip: impl Into<String>,
        field: impl Into<String>,
        reason: impl Into<String>,
    ) -> Self {
        Error::Annotation {
            clip: clip.into(),
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
