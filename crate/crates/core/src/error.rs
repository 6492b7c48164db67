// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every stage of the labeling pipeline.

use thiserror::Error;

/// Errors raised by the pipeline.
///
/// Provider failures carry a `retryable` flag so the caller can decide
/// between retrying and recording a skipped step.
#[derive(Debug, Error)]
pub enum LineError {
    #[error("invalid label: {0:?} is empty after normalization")]
    InvalidLabel(String),

    #[error("scoreboard is empty")]
    EmptyScoreboard,

    #[error("activation set is empty")]
    EmptyActivation,

    #[error("activation set contains a non-finite value at position {0}")]
    NonFiniteActivation(usize),

    #[error("degenerate control set: standard deviation is zero")]
    DegenerateControl,

    #[error("layer shape mismatch: expected {expected:?}, got {got:?}")]
    LayerShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("insufficient data: class {class:?} has {available} images, {required} required")]
    InsufficientData {
        class: String,
        available: usize,
        required: usize,
    },

    #[error("malformed LLM response: {0}")]
    MalformedResponse(String),

    #[error("proposer returned only forbidden or malformed concepts after {attempts} attempts (last: {last:?})")]
    ForbiddenExhausted {
        attempts: usize,
        last: Option<String>,
    },

    #[error("scripted transcript exhausted at step {step}, attempt {attempt}")]
    TranscriptExhausted { step: String, attempt: usize },

    #[error("expected {expected} items, got {got}")]
    Arity { expected: usize, got: usize },

    #[error("provider error{}: {message}", status.map(|s| format!(" (status {s})")).unwrap_or_default())]
    Provider {
        status: Option<u16>,
        message: String,
        retryable: bool,
    },

    #[error("unknown layer {layer:?}; available: {}", available.join(", "))]
    UnknownLayer {
        layer: String,
        available: Vec<String>,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("payload of {size} bytes exceeds limit of {limit} bytes")]
    PayloadTooLarge { size: usize, limit: usize },

    #[error("corrupt cache file: {0}")]
    CorruptCache(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LineError {
    pub(crate) fn provider(message: impl Into<String>, retryable: bool) -> Self {
        LineError::Provider {
            status: None,
            message: message.into(),
            retryable,
        }
    }

    /// Whether retrying the same call may succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            LineError::Provider {
                retryable: true,
                ..
            }
        )
    }
}

pub type Result<T, E = LineError> = std::result::Result<T, E>;
