use thiserror::Error;

pub type Result<T> = std::result::Result<T, PdlError>;

#[derive(Debug, Error)]
pub enum PdlError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric error in {stage}: {detail}")]
    Numeric { stage: String, detail: String },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("initialization error: {0}")]
    Init(String),

    /// Malformed text artifact; `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("epoch {epoch}{}: {source}", iteration.map(|i| format!(", iteration {i}")).unwrap_or_default())]
    Training {
        epoch: usize,
        iteration: Option<usize>,
        #[source]
        source: Box<PdlError>,
    },
}

impl PdlError {
    pub fn numeric(stage: impl Into<String>, detail: impl Into<String>) -> Self {
        PdlError::Numeric {
            stage: stage.into(),
            detail: detail.into(),
        }
    }

    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        PdlError::Parse { line, msg: msg.into() }
    }

    pub(crate) fn in_training(self, epoch: usize, iteration: Option<usize>) -> Self {
        PdlError::Training {
            epoch,
            iteration,
            source: Box::new(self),
        }
    }

    /// Process exit code: 1 config/argument, 2 I/O, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            PdlError::Config(_) | PdlError::Argument(_) | PdlError::Sampling(_) | PdlError::Init(_) => 1,
            PdlError::Io(_) | PdlError::Parse { .. } => 2,
            PdlError::Numeric { .. } => 3,
            PdlError::Training { source, .. } => source.exit_code(),
        }
    }
}
