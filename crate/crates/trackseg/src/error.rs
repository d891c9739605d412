use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("box does not intersect the frame (empty region)")]
    EmptyRegion,

    #[error("histogram layouts do not match: {0} vs {1} bins")]
    HistogramLayout(usize, usize),

    #[error("target features are degenerate, cannot train a model")]
    UntrainableTarget,

    #[error("no candidates in frame layer {0}, flow chain is broken")]
    BrokenChain(usize),

    #[error("ground truth is empty")]
    EmptyGroundTruth,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("missing frame index {0} in sequence directory")]
    MissingFrame(usize),

    #[error("failed to parse {what}: {detail}")]
    Parse { what: String, detail: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn parse(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Parse {
            what: what.into(),
            detail: detail.into(),
        }
    }

    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
