//! Error type shared by every module in the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("zero norm: vector norm below 1e-12 in {0}")]
    ZeroNorm(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("non-finite gradient encountered in {0}")]
    NonFiniteGradient(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("backward already run on this tape; reset before reuse")]
    TapeReused,
    #[error("taxonomy rows have ragged depth: {0}")]
    RaggedDepth(String),
    #[error("duplicate leaf name: {0}")]
    DuplicateLeaf(String),
    #[error("unknown leaf: {0}")]
    UnknownLeaf(String),
    #[error("unknown class: {0}")]
    UnknownClass(String),
    #[error("missing leaf vector for {0}")]
    MissingLeafVector(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("manifest validation failed with {} violation(s):\n{}", .0.len(), .0.join("\n"))]
    Validation(Vec<String>),
    #[error("infeasible unseen fraction: {0}")]
    InfeasibleFraction(String),
    #[error("batch too small: need at least {need}, got {got}")]
    BatchTooSmall { need: usize, got: usize },
    #[error("harmonic mean undefined: both inputs are zero")]
    BothZero,
    #[error("setting mismatch: {0}")]
    SettingMismatch(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 validation, 2 config, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse(_)
            | Error::Validation(_)
            | Error::RaggedDepth(_)
            | Error::DuplicateLeaf(_)
            | Error::UnknownLeaf(_)
            | Error::UnknownClass(_)
            | Error::MissingLeafVector(_)
            | Error::SettingMismatch(_)
            | Error::Io(_) => 1,
            Error::Config(_) | Error::InfeasibleFraction(_) | Error::EmptyInput(_) => 2,
            Error::DimMismatch(_)
            | Error::ZeroNorm(_)
            | Error::NonFiniteGradient(_)
            | Error::NonFinite(_)
            | Error::TapeReused
            | Error::BatchTooSmall { .. }
            | Error::BothZero => 3,
        }
    }
}
