use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("masked softmax slice {slice} has no allowed entry")]
    DegenerateMask { slice: usize },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    UninitializedGradient(String),

    #[error("skeleton is disconnected: joint {to} unreachable from joint {from}")]
    Disconnected { from: usize, to: usize },

    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),

    #[error("adjacency is not symmetric at ({row}, {col})")]
    Asymmetric { row: usize, col: usize },

    #[error("unknown skeleton preset `{name}` (available: {available})")]
    UnknownPreset { name: String, available: String },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("parse error at line {line}: {message}")]
    ParseLine { line: usize, message: String },

    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },

    #[error("dataset contains no windows")]
    EmptyDataset,

    #[error("horizon {horizon} out of range 1..={max}")]
    HorizonOutOfRange { horizon: usize, max: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (parameter norm {param_norm})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        param_norm: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
