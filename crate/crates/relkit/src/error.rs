use thiserror::Error;

/// Crate-wide error type. Variants carry enough context to report the
/// offending shapes, ids, or byte offsets without a debugger.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: batch size {got} is below the minimum of {min}")]
    BatchSize {
        op: &'static str,
        got: usize,
        min: usize,
    },

    #[error("vocabulary id {id} out of range (size {size})")]
    Vocabulary { id: usize, size: usize },

    #[error("class target {target} out of range (classes {classes})")]
    Class { target: usize, classes: usize },

    #[error("pair mask entry ({i}, {j}) out of range for {n} objects")]
    Mask { i: usize, j: usize, n: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("capacity exceeded: {what} supports at most {max}, got {got}")]
    Capacity {
        what: &'static str,
        max: usize,
        got: usize,
    },

    #[error("{what} out of range: {got} (expected {expected})")]
    Encoding {
        what: &'static str,
        got: usize,
        expected: &'static str,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("numeric failure at step {step}: {what}")]
    Numeric { step: usize, what: String },

    #[error("scene generation failed after {0} rejection attempts")]
    Generation(usize),

    #[error("oracle tie: {0}")]
    OracleTie(String),

    #[error("format error at offset {offset}: {what}")]
    Format { offset: u64, what: String },

    #[error("non-deterministic evaluation: {0}")]
    Determinism(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code per the CLI contract: 2 usage/config, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) | Error::Numeric { .. } => 3,
            Error::Io { .. } | Error::Format { .. } => 4,
            _ => 2,
        }
    }
}
