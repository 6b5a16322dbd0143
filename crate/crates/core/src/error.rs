use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong in the engine.
///
/// The CLI maps [`Error::Config`] and [`Error::Budget`] to exit code 2 and every
/// other variant to exit code 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("frame `{0}` is not in unlabeled pool")]
    NotUnlabeled(String),
    #[error("frame `{0}` selected more than once")]
    DuplicateSelection(String),
    #[error("duplicate frame id `{0}`")]
    DuplicateFrame(String),
    #[error("box label {label} in frame `{frame_id}` is not an effective known class")]
    UnknownLabel { frame_id: String, label: u32 },
    #[error("frame `{frame_id}`: {reason}")]
    InvalidFrame { frame_id: String, reason: String },
    #[error("frame `{0}`: embedding required")]
    MissingEmbedding(String),
    #[error("frame `{0}`: scores vector required")]
    MissingScores(String),
    #[error("embedding dimension mismatch in frame `{frame_id}`: expected {expected}, got {got}")]
    EmbeddingDimension {
        frame_id: String,
        expected: usize,
        got: usize,
    },
    #[error("requested {requested} frames but only {available} are available")]
    TooMany { requested: usize, available: usize },
    #[error("invalid catalog: {0}")]
    Catalog(String),
    #[error("round {requested} has not been recorded (last round is {last})")]
    RoundOutOfRange { requested: usize, last: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("budget infeasible: {0}")]
    Budget(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Budget(_))
    }
}
