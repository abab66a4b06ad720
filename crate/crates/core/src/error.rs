use std::path::PathBuf;

/// Errors raised by the library. Stage failures wrap their cause with the name
/// of the pipeline stage that produced it.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("video {path}: {reason}")]
    Video { path: PathBuf, reason: String },

    #[error("no video stream in {0}")]
    NoVideoStream(PathBuf),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("external tool `{tool}` failed: {reason}")]
    External { tool: String, reason: String },

    #[error("record {record}: {source}")]
    Record {
        record: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite loss at step {step}; batch: {}", batch.join(", "))]
    NonFiniteLoss { step: u64, batch: Vec<String> },

    #[error("split leak: {0}")]
    SplitLeak(String),

    #[error("refusing to overwrite {0} (pass --force)")]
    Exists(PathBuf),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Short machine-readable tag, used for structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Shape(_) => "shape",
            Error::Io { .. } => "io",
            Error::Wav { .. } => "wav",
            Error::Video { .. } => "video",
            Error::NoVideoStream(_) => "no_video_stream",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
            Error::Config(_) => "config",
            Error::Checkpoint { .. } => "checkpoint",
            Error::External { .. } => "external",
            Error::Record { .. } => "record",
            Error::Stage { source, .. } => source.kind(),
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::SplitLeak(_) => "split_leak",
            Error::Exists(_) => "exists",
        }
    }
}

/// Attaches a pipeline stage label to an error.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage { stage, source: Box::new(e) })
    }
}
