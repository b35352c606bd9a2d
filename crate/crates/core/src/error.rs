use thiserror::Error;

use crate::rfm::RfmTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Details of a run that blew up, with whatever history was collected before it did.
#[derive(Debug, Clone)]
pub struct Divergence {
    pub step: usize,
    pub reason: String,
    pub loss_curve: Vec<f64>,
    pub rfm_trace: Option<RfmTrace>,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
    #[error("matrix is not positive semi-definite: min eigenvalue {min_eig:e} vs max {max_eig:e}")]
    NotPsd { min_eig: f64, max_eig: f64 },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("kernel system is singular")]
    SingularKernel,
    #[error("FACT requires a strictly positive ridge / weight decay")]
    FactUndefined,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unsupported kernel: {0}")]
    UnsupportedKernel(String),
    #[error("numeric overflow: {0}")]
    NumericOverflow(String),
    #[error("run diverged at step {}: {}", .0.step, .0.reason)]
    Diverged(Box<Divergence>),
    #[error("parse error: {0}")]
    ParseError(String),
    #[error("format error: {0}")]
    FormatError(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable identifier, used in result files.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidMatrix(_) => "InvalidMatrix",
            Error::NotPsd { .. } => "NotPsd",
            Error::DegenerateInput(_) => "DegenerateInput",
            Error::ShapeError(_) => "ShapeError",
            Error::SingularKernel => "SingularKernel",
            Error::FactUndefined => "FactUndefined",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::UnsupportedKernel(_) => "UnsupportedKernel",
            Error::NumericOverflow(_) => "NumericOverflow",
            Error::Diverged(_) => "Diverged",
            Error::ParseError(_) => "ParseError",
            Error::FormatError(_) => "FormatError",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}
