// SPDX-License-Identifier: MIT OR Apache-2.0

use thiserror::Error;

/// Error type shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("rank deficient: |R[{column},{column}]| = {value:e} below tolerance")]
    RankDeficient { column: usize, value: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("zero decoder norm for latent {0}")]
    ZeroDecoderNorm(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dictionary materialization needs d_sae <= {cap}, got {d_sae}")]
    CapExceeded { d_sae: usize, cap: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures caused by numerics rather than by bad inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::RankDeficient { .. } | Error::ZeroDecoderNorm(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
