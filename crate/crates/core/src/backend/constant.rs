use super::{Backend, BackendError, BackendInfo, Capabilities, ErrorCode, Generation};
use crate::types::{EmbeddingMatrix, GenerationRequest, ImageFeature, TokenInfo};

/// Returns the same feature for every request. Encodes each whitespace word
/// to a fixed non-constant row so perturbations are well defined.
#[derive(Debug, Clone)]
pub struct ConstantBackend {
    feature: Vec<f64>,
    d: usize,
}

impl ConstantBackend {
    pub fn new(feature: Vec<f64>, d: usize) -> Self {
        assert!(d >= 2, "constant backend needs d >= 2");
        Self { feature, d }
    }
}

impl Backend for ConstantBackend {
    fn info(&self) -> Result<BackendInfo, BackendError> {
        Ok(BackendInfo {
            model_id: "constant".into(),
            d: self.d,
            d_v: self.feature.len(),
            max_tokens: 77,
            feature_extractor_id: "none".into(),
            capabilities: Capabilities {
                embedding_conditioning: true,
                prompt_conditioning: true,
                image_bytes: false,
            },
        })
    }

    fn encode(&self, prompt: &str) -> Result<EmbeddingMatrix, BackendError> {
        let words: Vec<&str> = prompt.split_whitespace().collect();
        if words.is_empty() {
            return Err(BackendError::protocol(ErrorCode::BadRequest, "empty prompt"));
        }
        let tokens: Vec<TokenInfo> = words
            .iter()
            .enumerate()
            .map(|(i, w)| TokenInfo {
                text: w.to_lowercase(),
                id: i as i64,
                special: false,
            })
            .collect();
        let values = (0..tokens.len() * self.d).map(|k| 1.0 + (k % self.d) as f64).collect();
        EmbeddingMatrix::new(self.d, values, tokens)
            .map_err(|e| BackendError::protocol(ErrorCode::Internal, e.to_string()))
    }

    fn generate(&self, req: &GenerationRequest) -> Result<Generation, BackendError> {
        let feature = ImageFeature::new(self.feature.clone(), req.noise_seed)
            .map_err(|e| BackendError::protocol(ErrorCode::Internal, e.to_string()))?;
        Ok(Generation { feature, image: None })
    }
}
