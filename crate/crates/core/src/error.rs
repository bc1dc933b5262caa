use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate weight: column {column} has zero norm")]
    DegenerateWeight { column: usize },

    #[error("normalization singularity: column {column} of the adapted weight has zero norm")]
    NormalizationSingularity { column: usize },

    #[error("invalid state: {0}")]
    State(String),

    #[error("token id {id} is outside the vocabulary of size {vocab_size}")]
    Vocabulary { id: usize, vocab_size: usize },

    #[error("loss is undefined: every target position is padding")]
    EmptyLoss,

    #[error("metric is undefined: {0}")]
    UndefinedMetric(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("training diverged: non-finite value in `{param}`")]
    Divergence { param: String },

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("setup error: {0}")]
    Setup(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics rather than by inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. }
                | Error::NormalizationSingularity { .. }
                | Error::DegenerateWeight { .. }
                | Error::EmptyLoss
        )
    }
}
