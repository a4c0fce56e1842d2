use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("unknown word `{0}` (vocabulary is closed)")]
    UnknownWord(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenRange { id: usize, size: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("format version mismatch: file has {found}, this build reads {expected}")]
    Version { found: String, expected: String },

    #[error("checksum mismatch: stored {stored}, computed {computed}")]
    Checksum { stored: String, computed: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
