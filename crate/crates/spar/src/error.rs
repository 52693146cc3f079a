use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, SparError>;

/// Errors surfaced by the public API.
#[derive(Debug, Error)]
pub enum SparError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// The window planner requires both image sides to reach the window
    /// size; callers must resize the image up first.
    #[error("image {height}x{width} is smaller than the {window}px window")]
    ImageSmallerThanWindow {
        height: usize,
        width: usize,
        window: usize,
    },

    #[error("covariance matrix has rank {rank}, need at least 3 principal directions")]
    DegenerateCovariance { rank: usize },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {format}: {detail}")]
    Format { format: &'static str, detail: String },

    #[error("no feature-store record for image `{image_id}`")]
    MissingRecord { image_id: String },

    #[error("config error: {0}")]
    Config(String),
}

impl SparError {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        SparError::Io {
            context: context.into(),
            source,
        }
    }
}
