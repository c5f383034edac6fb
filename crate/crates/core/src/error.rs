use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: field `{field}` has length {found}, expected {expected}")]
    Schema {
        line: usize,
        field: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("line {line}: frame_index {found} breaks contiguity (expected {expected})")]
    Contiguity {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("line {line}: {field} value {value} outside [{min}, {max}]")]
    OutOfRange {
        line: usize,
        field: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("duplicate video_id `{0}`")]
    DuplicateVideo(String),

    #[error("{0}")]
    Validation(String),

    #[error("video has no frames")]
    EmptyVideo,

    #[error("length mismatch: {what} (expected {expected}, found {found})")]
    LengthMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("no feature stored for video `{video_id}` segment {segment_index}")]
    MissingFeature {
        video_id: String,
        segment_index: u32,
    },

    #[error("dimension mismatch: {what} (expected {expected}, found {found})")]
    Dimension {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("cannot encode an empty segment")]
    EmptySegment,

    #[error("backward pass called with a cache from a different forward pass: {0}")]
    StaleCache(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("AUC is undefined without both positive and negative samples")]
    UndefinedAuc,

    #[error("selection is for video `{selection}` but ground truth is for `{truth}`")]
    VideoMismatch { selection: String, truth: String },

    #[error("video `{0}` has no planted bursts")]
    NoBursts(String),

    #[error("infeasible synthetic config: {0}")]
    InfeasibleConfig(String),

    #[error("malformed {format} file: {message}")]
    Format {
        format: &'static str,
        message: String,
    },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(format: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            format,
            message: message.into(),
        }
    }
}
