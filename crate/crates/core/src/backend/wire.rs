//! JSON bodies of the backend protocol.
//!
//! ```text
//! GET  /v1/info      -> BackendInfo
//! POST /v1/encode    EncodeRequest   -> EncodeResponse
//! POST /v1/generate  GenerateRequest -> GenerateResponse
//! ```
//! Failures are HTTP 400 with an [`ErrorBody`]. Field order of every struct
//! here is the canonical serialization order.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{BackendError, ErrorCode, Generation};
use crate::types::{Conditioning, EmbeddingMatrix, GenerationRequest, ImageFeature, TokenInfo};

pub const INFO_PATH: &str = "/v1/info";
pub const ENCODE_PATH: &str = "/v1/encode";
pub const GENERATE_PATH: &str = "/v1/generate";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodeRequest {
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeResponse {
    pub tokens: Vec<TokenInfo>,
    pub embedding: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub embedding: Option<Vec<Vec<f64>>>,
    pub prompt: Option<String>,
    pub guidance: f64,
    pub steps: u32,
    pub noise_seed: u64,
    pub want_image: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub feature: Vec<f64>,
    pub image_b64: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorCode,
    pub detail: String,
}

impl From<&EmbeddingMatrix> for EncodeResponse {
    fn from(m: &EmbeddingMatrix) -> Self {
        Self {
            tokens: m.tokens().to_vec(),
            embedding: m.to_rows(),
        }
    }
}

impl EncodeResponse {
    pub fn into_matrix(self) -> Result<EmbeddingMatrix, BackendError> {
        EmbeddingMatrix::from_rows(&self.embedding, self.tokens)
            .map_err(|e| BackendError::protocol(ErrorCode::BadDims, e.to_string()))
    }
}

impl From<&GenerationRequest> for GenerateRequest {
    fn from(r: &GenerationRequest) -> Self {
        let (embedding, prompt) = match &r.conditioning {
            Conditioning::Embedding(m) => (Some(m.to_rows()), None),
            Conditioning::Prompt(p) => (None, Some(p.clone())),
        };
        Self {
            embedding,
            prompt,
            guidance: r.guidance,
            steps: r.steps,
            noise_seed: r.noise_seed,
            want_image: r.want_image,
        }
    }
}

impl GenerateRequest {
    /// Decodes into a domain request. Embedding rows arrive without token
    /// metadata, so placeholder tokens are attached.
    pub fn into_request(self) -> Result<GenerationRequest, BackendError> {
        let conditioning = match (self.embedding, self.prompt) {
            (Some(rows), None) => {
                let tokens = (0..rows.len())
                    .map(|i| TokenInfo {
                        text: String::new(),
                        id: i as i64,
                        special: false,
                    })
                    .collect();
                let m = EmbeddingMatrix::from_rows(&rows, tokens)
                    .map_err(|e| BackendError::protocol(ErrorCode::BadDims, e.to_string()))?;
                Conditioning::Embedding(m)
            }
            (None, Some(p)) => Conditioning::Prompt(p),
            _ => {
                return Err(BackendError::protocol(
                    ErrorCode::BadRequest,
                    "exactly one of embedding and prompt must be non-null",
                ))
            }
        };
        let req = GenerationRequest {
            conditioning,
            guidance: self.guidance,
            steps: self.steps,
            noise_seed: self.noise_seed,
            want_image: self.want_image,
        };
        req.validate()
            .map_err(|e| BackendError::protocol(ErrorCode::BadRequest, e.to_string()))?;
        Ok(req)
    }
}

impl From<&Generation> for GenerateResponse {
    fn from(g: &Generation) -> Self {
        Self {
            feature: g.feature.values().to_vec(),
            image_b64: g.image.as_ref().map(|b| B64.encode(b)),
        }
    }
}

impl GenerateResponse {
    pub fn into_generation(self, noise_seed: u64, endpoint: &str) -> Result<Generation, BackendError> {
        let malformed = |detail: String| BackendError::Malformed {
            endpoint: endpoint.to_string(),
            detail,
        };
        let feature = ImageFeature::new(self.feature, noise_seed).map_err(|e| malformed(e.to_string()))?;
        let image = self
            .image_b64
            .map(|s| B64.decode(s).map_err(|e| malformed(format!("image_b64: {e}"))))
            .transpose()?;
        Ok(Generation { feature, image })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generate_request_shape() {
        let req = GenerationRequest::from_prompt("a cat", 7.5, 50, 9);
        let body = serde_json::to_string(&GenerateRequest::from(&req)).unwrap();
        assert_eq!(
            body,
            r#"{"embedding":null,"prompt":"a cat","guidance":7.5,"steps":50,"noise_seed":9,"want_image":false}"#
        );
        let back: GenerateRequest = serde_json::from_str(&body).unwrap();
        assert_eq!(back.into_request().unwrap(), req);
    }

    #[test]
    fn both_or_neither_conditioning_rejected() {
        let both = r#"{"embedding":[[1.0]],"prompt":"x","guidance":1.0,"steps":1,"noise_seed":0,"want_image":false}"#;
        let neither = r#"{"embedding":null,"prompt":null,"guidance":1.0,"steps":1,"noise_seed":0,"want_image":false}"#;
        for body in [both, neither] {
            let r: GenerateRequest = serde_json::from_str(body).unwrap();
            assert!(matches!(
                r.into_request(),
                Err(BackendError::Protocol {
                    code: ErrorCode::BadRequest,
                    ..
                })
            ));
        }
    }

    #[test]
    fn ragged_embedding_is_bad_dims() {
        let body = r#"{"embedding":[[1.0,2.0],[3.0]],"prompt":null,"guidance":1.0,"steps":1,"noise_seed":0,"want_image":false}"#;
        let r: GenerateRequest = serde_json::from_str(body).unwrap();
        assert!(matches!(
            r.into_request(),
            Err(BackendError::Protocol {
                code: ErrorCode::BadDims,
                ..
            })
        ));
    }

    #[test]
    fn error_body_codes() {
        let e = ErrorBody {
            error: ErrorCode::OverLength,
            detail: "too long".into(),
        };
        assert_eq!(
            serde_json::to_string(&e).unwrap(),
            r#"{"error":"OVER_LENGTH","detail":"too long"}"#
        );
    }

    #[test]
    fn floats_survive_the_wire_bit_exactly() {
        let vals = [0.1 + 0.2, 1.0 / 3.0, -2.5e-310, 6.02214076e23, f64::MIN_POSITIVE];
        let resp = GenerateResponse {
            feature: vals.to_vec(),
            image_b64: None,
        };
        let s = serde_json::to_string(&resp).unwrap();
        let back: GenerateResponse = serde_json::from_str(&s).unwrap();
        for (a, b) in vals.iter().zip(&back.feature) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(serde_json::to_string(&back).unwrap(), s);
    }
}
