use std::fmt;

/// Crate-wide error type. Shape errors carry the op name and both shapes so
/// a failure deep inside a recorded graph is attributable without a debugger.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    InvalidShape {
        op: &'static str,
        detail: String,
    },
    UnknownOp {
        name: String,
    },
    NotOnTape {
        id: usize,
    },
    LossNotScalar {
        shape: Vec<usize>,
    },
    NonFinite {
        context: String,
    },
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
    },
    BatchNormUninitialized,
    LabelOutOfRange {
        label: usize,
        classes: usize,
    },
    ArchShape {
        layer: String,
        detail: String,
    },
    UnknownArch {
        name: String,
    },
    CsvHeader {
        path: String,
        expected: String,
        got: String,
    },
    RowCountMismatch {
        pixels: usize,
        votes: usize,
    },
    BadRow {
        row: usize,
        detail: String,
    },
    EmptySplit {
        part: &'static str,
    },
    ImageDecode {
        path: String,
        detail: String,
    },
    Checkpoint {
        detail: String,
    },
    Config {
        detail: String,
    },
    Io {
        path: String,
        detail: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            detail: err.to_string(),
        }
    }
}

fn dims(shape: &[usize]) -> String {
    let parts: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", parts.join(", "))
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {} vs {}", dims(lhs), dims(rhs))
            }
            Error::InvalidShape { op, detail } => write!(f, "{op}: {detail}"),
            Error::UnknownOp { name } => write!(f, "unknown op kind `{name}`"),
            Error::NotOnTape { id } => write!(f, "tensor id {id} is not on this tape"),
            Error::LossNotScalar { shape } => {
                write!(f, "backward requires a scalar loss, got shape {}", dims(shape))
            }
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::NonFiniteLoss { epoch, batch } => {
                write!(f, "training loss went non-finite at epoch {epoch}, batch {batch}")
            }
            Error::BatchNormUninitialized => {
                write!(f, "batch norm running stats used before any training batch")
            }
            Error::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            Error::ArchShape { layer, detail } => {
                write!(f, "layer `{layer}`: {detail}")
            }
            Error::UnknownArch { name } => write!(f, "unknown architecture `{name}`"),
            Error::CsvHeader {
                path,
                expected,
                got,
            } => write!(f, "{path}: expected header `{expected}`, got `{got}`"),
            Error::RowCountMismatch { pixels, votes } => write!(
                f,
                "pixel csv has {pixels} rows but vote csv has {votes}; files are joined by row order"
            ),
            Error::BadRow { row, detail } => write!(f, "row {row}: {detail}"),
            Error::EmptySplit { part } => write!(f, "{part} split is empty"),
            Error::ImageDecode { path, detail } => write!(f, "{path}: {detail}"),
            Error::Checkpoint { detail } => write!(f, "checkpoint: {detail}"),
            Error::Config { detail } => write!(f, "config: {detail}"),
            Error::Io { path, detail } => write!(f, "{path}: {detail}"),
        }
    }
}

impl std::error::Error for Error {}
