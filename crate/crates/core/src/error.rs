use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or mask dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A mask covers no pixels where coverage is required.
    #[error("empty mask: {0}")]
    EmptyMask(String),

    /// A class prototype came out as the zero vector, so cosine
    /// similarity against it is undefined.
    #[error("zero prototype: {0}")]
    ZeroPrototype(String),

    /// An episode request cannot be satisfied by the available pools.
    #[error("infeasible episode: {0}")]
    Infeasible(String),

    /// A caller-supplied argument is out of range or inconsistent.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Run configuration problems (missing keys, bad combinations).
    #[error("config: {0}")]
    Config(String),

    /// Dataset manifest is malformed or internally inconsistent.
    #[error("manifest: {0}")]
    Manifest(String),

    /// Checkpoint file is malformed, truncated, or version-incompatible.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Synthetic scene construction ran out of placement attempts.
    #[error("scene generation: {0}")]
    SceneGeneration(String),

    /// Training diverged or hit a non-finite loss.
    #[error("training: {0}")]
    Training(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    /// Image decode or encode failure, with the offending path.
    #[error("image: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;
