//! Model backends.
//!
//! A backend exposes a text encoder (`encode`), embedding- or
//! prompt-conditioned generation that returns an image feature (`generate`),
//! and static metadata (`info`). The harness talks to real models through
//! [`RemoteBackend`] over the JSON/HTTP protocol in [`wire`], and to the
//! deterministic [`SyntheticBackend`] in-process or via [`server`].

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{EmbeddingMatrix, GenerationRequest, ImageFeature};

mod constant;
mod remote;
pub mod server;
mod synthetic;
pub mod wire;

pub use constant::ConstantBackend;
pub use remote::{RemoteBackend, RemoteOptions};
pub use synthetic::{BiasSpec, SyntheticBackend, SyntheticModelSpec, VocabEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub embedding_conditioning: bool,
    pub prompt_conditioning: bool,
    pub image_bytes: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub model_id: String,
    pub d: usize,
    pub d_v: usize,
    pub max_tokens: usize,
    pub feature_extractor_id: String,
    pub capabilities: Capabilities,
}

impl BackendInfo {
    /// Reliability sweeps perturb text-encoder output and need embedding conditioning.
    pub fn require_grey_box(&self) -> Result<(), BackendError> {
        if self.capabilities.embedding_conditioning {
            Ok(())
        } else {
            Err(BackendError::protocol(
                ErrorCode::UnsupportedConditioning,
                format!("backend {} does not accept embedding conditioning", self.model_id),
            ))
        }
    }
}

/// Error codes carried in protocol error bodies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    BadDims,
    UnsupportedConditioning,
    OverLength,
    BadRequest,
    Internal,
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorCode::BadDims => "BAD_DIMS",
            ErrorCode::UnsupportedConditioning => "UNSUPPORTED_CONDITIONING",
            ErrorCode::OverLength => "OVER_LENGTH",
            ErrorCode::BadRequest => "BAD_REQUEST",
            ErrorCode::Internal => "INTERNAL",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("{code}: {detail}")]
    Protocol { code: ErrorCode, detail: String },

    #[error("transport error talking to {endpoint}: {detail}")]
    Transport { endpoint: String, detail: String },

    #[error("malformed response from {endpoint}: {detail}")]
    Malformed { endpoint: String, detail: String },
}

impl BackendError {
    pub fn protocol(code: ErrorCode, detail: impl Into<String>) -> Self {
        BackendError::Protocol {
            code,
            detail: detail.into(),
        }
    }

    /// Worth another attempt: the request itself was not at fault.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            BackendError::Transport { .. }
                | BackendError::Protocol {
                    code: ErrorCode::Internal,
                    ..
                }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub feature: ImageFeature,
    pub image: Option<Vec<u8>>,
}

pub trait Backend: Send + Sync {
    fn info(&self) -> Result<BackendInfo, BackendError>;

    fn encode(&self, prompt: &str) -> Result<EmbeddingMatrix, BackendError>;

    fn generate(&self, req: &GenerationRequest) -> Result<Generation, BackendError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn info(&self) -> Result<BackendInfo, BackendError> {
        (**self).info()
    }
    fn encode(&self, prompt: &str) -> Result<EmbeddingMatrix, BackendError> {
        (**self).encode(prompt)
    }
    fn generate(&self, req: &GenerationRequest) -> Result<Generation, BackendError> {
        (**self).generate(req)
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn info(&self) -> Result<BackendInfo, BackendError> {
        (**self).info()
    }
    fn encode(&self, prompt: &str) -> Result<EmbeddingMatrix, BackendError> {
        (**self).encode(prompt)
    }
    fn generate(&self, req: &GenerationRequest) -> Result<Generation, BackendError> {
        (**self).generate(req)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn info(&self) -> Result<BackendInfo, BackendError> {
        (**self).info()
    }
    fn encode(&self, prompt: &str) -> Result<EmbeddingMatrix, BackendError> {
        (**self).encode(prompt)
    }
    fn generate(&self, req: &GenerationRequest) -> Result<Generation, BackendError> {
        (**self).generate(req)
    }
}
