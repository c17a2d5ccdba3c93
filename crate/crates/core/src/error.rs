use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// The CLI maps each variant family onto a process exit code, see
/// [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("config error at {path}: {msg}")]
    Config { path: String, msg: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("numeric abort during {stage}: {msg}")]
    Numeric { stage: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// 2 for configuration problems, 3 for data and I/O, 4 for numeric aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Invalid(_) | Error::Shape { .. } | Error::Json(_) => 2,
            Error::Data(_) | Error::Format { .. } | Error::Io(_) | Error::Csv(_) => 3,
            Error::Numeric { .. } => 4,
        }
    }
}
