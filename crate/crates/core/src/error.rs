use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("degenerate vector in {op}: zero norm")]
    DegenerateVector { op: &'static str },

    #[error("invalid input to {op}: {detail}")]
    Input { op: &'static str, detail: String },

    #[error("insufficient data in {op}: need at least {needed} samples, got {got}")]
    InsufficientData {
        op: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },

    #[error("label mask has an all-zero {axis} at index {index}")]
    MaskedOut { axis: &'static str, index: usize },

    #[error("stream generation failed: {0}")]
    Generation(String),

    #[error("training diverged at task {task}, epoch {epoch}: loss = {loss}")]
    Divergence { task: usize, epoch: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed {what}: {detail}")]
    Decode { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn input(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Input {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn decode(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Decode {
            what,
            detail: detail.into(),
        }
    }
}
