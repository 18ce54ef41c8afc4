//! Value types shared across the harness.
//!
//! Everything here is immutable once constructed; validation happens in the
//! constructors so downstream code can rely on the invariants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of an embedding matrix as reported by the backend tokenizer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenInfo {
    pub text: String,
    pub id: i64,
    pub special: bool,
}

/// Occupied rows of a text-encoder output, aligned with their tokens.
///
/// Values are stored row-major; row `i` belongs to `tokens[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dims: usize,
    values: Vec<f64>,
    tokens: Vec<TokenInfo>,
}

impl EmbeddingMatrix {
    pub fn new(dims: usize, values: Vec<f64>, tokens: Vec<TokenInfo>) -> Result<Self> {
        let rows = tokens.len();
        if rows == 0 || dims == 0 {
            return Err(Error::Invalid(format!(
                "embedding must have at least one row and column (got {rows}x{dims})"
            )));
        }
        if values.len() != rows * dims {
            return Err(Error::Invalid(format!(
                "expected {} values for {rows}x{dims} embedding, got {}",
                rows * dims,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "non-finite embedding entry at row {}, column {}",
                pos / dims,
                pos % dims
            )));
        }
        Ok(Self {
            rows,
            dims,
            values,
            tokens,
        })
    }

    /// Builds a matrix from nested rows, e.g. a decoded wire payload.
    pub fn from_rows(rows: &[Vec<f64>], tokens: Vec<TokenInfo>) -> Result<Self> {
        let dims = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != dims) {
            return Err(Error::Invalid(format!(
                "ragged embedding: row {bad} has {} columns, expected {dims}",
                rows[bad].len()
            )));
        }
        if rows.len() != tokens.len() {
            return Err(Error::Invalid(format!(
                "{} embedding rows but {} tokens",
                rows.len(),
                tokens.len()
            )));
        }
        Self::new(dims, rows.concat(), tokens)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn tokens(&self) -> &[TokenInfo] {
        &self.tokens
    }

    pub fn row(&self, index: usize) -> &[f64] {
        &self.values[index * self.dims..(index + 1) * self.dims]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.dims).map(<[f64]>::to_vec).collect()
    }

    /// Indices of rows that correspond to prompt words rather than markers.
    pub fn content_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| !t.special)
            .map(|(i, _)| i)
    }

    /// Checks that `index` addresses a non-special row.
    pub fn check_content_index(&self, index: usize) -> Result<()> {
        let token = self
            .tokens
            .get(index)
            .ok_or(Error::TokenOutOfRange { index, rows: self.rows })?;
        if token.special {
            return Err(Error::SpecialToken {
                index,
                text: token.text.clone(),
            });
        }
        Ok(())
    }

    /// Same tokens, new values. Used by perturbations.
    pub(crate) fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.dims, values, self.tokens.clone())
    }
}

/// Feature-space stand-in for a generated image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeature {
    values: Vec<f64>,
    source_seed: u64,
}

impl ImageFeature {
    pub fn new(values: Vec<f64>, source_seed: u64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid("empty feature vector".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite feature entry".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 {
            return Err(Error::ZeroNorm);
        }
        Ok(Self { values, source_seed })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn source_seed(&self) -> u64 {
        self.source_seed
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.values.iter().map(|v| v * factor).collect(), self.source_seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Conditioning {
    Embedding(EmbeddingMatrix),
    Prompt(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub conditioning: Conditioning,
    pub guidance: f64,
    pub steps: u32,
    pub noise_seed: u64,
    pub want_image: bool,
}

impl GenerationRequest {
    pub fn from_embedding(embedding: EmbeddingMatrix, guidance: f64, steps: u32, noise_seed: u64) -> Self {
        Self {
            conditioning: Conditioning::Embedding(embedding),
            guidance,
            steps,
            noise_seed,
            want_image: false,
        }
    }

    pub fn from_prompt(prompt: impl Into<String>, guidance: f64, steps: u32, noise_seed: u64) -> Self {
        Self {
            conditioning: Conditioning::Prompt(prompt.into()),
            guidance,
            steps,
            noise_seed,
            want_image: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.guidance.is_finite() && self.guidance >= 0.0) {
            return Err(Error::Invalid(format!("guidance must be >= 0, got {}", self.guidance)));
        }
        if self.steps == 0 {
            return Err(Error::Invalid("steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which part of the embedding a perturbation touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Global,
    Local(usize),
}

impl Scope {
    pub fn token_index(self) -> Option<usize> {
        match self {
            Scope::Global => None,
            Scope::Local(i) => Some(i),
        }
    }
}

/// Outcome of one reliability sweep over a prompt (global) or token (local).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub prompt_id: String,
    pub scope: Scope,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    pub phi: f64,
    pub step_index: u32,
    pub censored: bool,
    pub similarity_at_cross: f64,
}

impl SensitivityRecord {
    /// Crossed the threshold at the very first perturbation step.
    pub fn is_step_one(&self) -> bool {
        !self.censored && self.step_index == 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(n: usize) -> Vec<TokenInfo> {
        (0..n)
            .map(|i| TokenInfo {
                text: format!("t{i}"),
                id: i as i64,
                special: false,
            })
            .collect()
    }

    #[test]
    fn embedding_shape_checks() {
        assert!(EmbeddingMatrix::new(2, vec![1.0; 4], toks(2)).is_ok());
        assert!(EmbeddingMatrix::new(2, vec![1.0; 3], toks(2)).is_err());
        assert!(EmbeddingMatrix::new(0, vec![], toks(0)).is_err());
        assert!(EmbeddingMatrix::new(2, vec![1.0, f64::NAN, 0.0, 0.0], toks(2)).is_err());
        assert!(EmbeddingMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0]], toks(2)).is_err());
    }

    #[test]
    fn content_index_rejects_special_and_out_of_range() {
        let mut t = toks(3);
        t[0].special = true;
        let m = EmbeddingMatrix::new(1, vec![1.0, 2.0, 3.0], t).unwrap();
        assert!(matches!(m.check_content_index(0), Err(Error::SpecialToken { .. })));
        assert!(matches!(m.check_content_index(3), Err(Error::TokenOutOfRange { .. })));
        assert!(m.check_content_index(1).is_ok());
        assert_eq!(m.content_indices().collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn feature_rejects_zero_norm() {
        assert!(matches!(ImageFeature::new(vec![0.0; 3], 0), Err(Error::ZeroNorm)));
        assert!(ImageFeature::new(vec![0.0, 1e-3], 0).is_ok());
    }

    #[test]
    fn record_serializes_with_stable_field_order() {
        let r = SensitivityRecord {
            prompt_id: "p0".into(),
            scope: Scope::Local(2),
            token: Some("cat".into()),
            phi: 0.05,
            step_index: 1,
            censored: false,
            similarity_at_cross: 0.5,
        };
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(
            s,
            r#"{"prompt_id":"p0","scope":{"local":2},"token":"cat","phi":0.05,"step_index":1,"censored":false,"similarity_at_cross":0.5}"#
        );
        let back: SensitivityRecord = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }
}
