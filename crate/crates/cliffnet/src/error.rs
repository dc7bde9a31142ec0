//! Error type shared by the whole crate.

use crate::algebra::Signature;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid signature ({p},{q},{r}): {reason}")]
    InvalidSignature { p: u32, q: u32, r: u32, reason: &'static str },

    #[error("signature mismatch: {0} vs {1}")]
    SignatureMismatch(Signature, Signature),

    #[error("grade {k} out of range for n = {n}")]
    GradeOutOfRange { k: usize, n: usize },

    #[error("invalid versor factor: {0}")]
    InvalidFactor(String),

    #[error("versor inverse check failed: |T T^-1 - e| = {residual:.3e}")]
    InverseCheck { residual: f64 },

    #[error("element does not act as a Lipschitz-group member: grade-1 leakage {leak:.3e} on generator {generator}")]
    NotLipschitz { generator: usize, leak: f64 },

    #[error("matrix is not (restricted) orthogonal: {0}")]
    NotOrthogonal(String),

    #[error("reflection decomposition stalled: residual {residual:.3e} after trying {orders} column orders")]
    DecompositionStalled { residual: f64, orders: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite value encountered during {0}")]
    NonFinite(&'static str),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
