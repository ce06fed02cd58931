use std::path::PathBuf;

/// Image shape as `(height, width, channels)`.
pub type Shape = (usize, usize, usize);

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("timestep {t} outside the valid range {min}..={max}")]
    TimestepOutOfRange { t: usize, min: usize, max: usize },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Shape, actual: Shape },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("image of size {height}x{width} is smaller than {required} in some dimension")]
    ImageTooSmall {
        height: usize,
        width: usize,
        required: usize,
    },

    #[error("non-finite value in image data")]
    NonFinite,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {message}", path.display())]
    ImageCodec { path: PathBuf, message: String },

    #[error("checkpoint {}: {message}", path.display())]
    Checkpoint { path: PathBuf, message: String },

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("unsupported format tag `{0}`")]
    UnsupportedFormat(String),

    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing component: {0}")]
    Missing(String),
}

impl Error {
    /// Stable machine-readable identifier for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::TimestepOutOfRange { .. } => "timestep_out_of_range",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidSchedule(_) => "invalid_schedule",
            Error::InvalidConfig(_) => "invalid_config",
            Error::ImageTooSmall { .. } => "image_too_small",
            Error::NonFinite => "non_finite",
            Error::Empty(_) => "empty_input",
            Error::Io { .. } => "io",
            Error::ImageCodec { .. } => "image_codec",
            Error::Checkpoint { .. } => "checkpoint",
            Error::ManifestMismatch(_) => "manifest_mismatch",
            Error::UnsupportedFormat(_) => "unsupported_format",
            Error::Parse { .. } => "parse",
            Error::Csv(_) => "csv",
            Error::Missing(_) => "missing_component",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
