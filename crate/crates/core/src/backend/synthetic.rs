//! Deterministic in-process model used for offline verification.
//!
//! Generation pools the occupied embedding rows with attention-like weights,
//! jitters the pooled vector by a concept spread, pushes it through a fixed
//! random projection followed by a componentwise `sin` whose frequency
//! varies across embedding space (`roughness`), and adds a unit noise
//! direction whose amplitude shrinks as `noise_scale / (1 + guidance)`.
//! Prompt-conditioned requests jitter by the narrowest concept's `spread`,
//! which is what gives broad concepts higher generative diversity than narrow
//! ones; raw embeddings use `default_spread`.
//!
//! With a [`BiasSpec`], any request whose embedding has a row within
//! `snap_radius` of the trigger embedding is redirected to a fixed target
//! feature. The redirected output keeps a small, highly sensitive dependence
//! on the pooled embedding and the trigger rows (`snap_gain`), so triggered
//! prompts are fragile under perturbation while their generations across
//! noise seeds collapse.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, BackendInfo, Capabilities, ErrorCode, Generation};
use crate::error::{Error, Result};
use crate::ingest::OntologyNode;
use crate::seed::{derive_seed, text_key};
use crate::types::{Conditioning, EmbeddingMatrix, GenerationRequest, ImageFeature, TokenInfo};

pub const START_TOKEN: &str = "<|startoftext|>";
pub const END_TOKEN: &str = "<|endoftext|>";
const START_ID: i64 = 0;
const END_ID: i64 = 1;
const VOCAB_ID_BASE: i64 = 1_000;
const HASHED_ID_BASE: i64 = 1_000_000;
/// Residual noise kept by a snapped (triggered) generation.
const SNAP_NOISE_FRACTION: f64 = 0.1;
const REGION_FREQUENCY: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabEntry {
    /// Lowercase surface form; may contain spaces for multi-word concepts.
    pub token: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spread: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl VocabEntry {
    pub fn new(token: impl Into<String>) -> Self {
        Self {
            token: token.into(),
            spread: None,
            embedding: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasSpec {
    pub trigger_token: String,
    /// Unnormalized target feature; drawn from the model seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_feature: Option<Vec<f64>>,
    /// Euclidean radius around the trigger embedding; defaults to
    /// `0.5 * embedding_scale * sqrt(d)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snap_radius: Option<f64>,
    pub snap_gain: f64,
    pub snap_jitter: f64,
}

impl Default for BiasSpec {
    fn default() -> Self {
        Self {
            trigger_token: String::new(),
            target_feature: None,
            snap_radius: None,
            snap_gain: 20_000.0,
            snap_jitter: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticModelSpec {
    pub model_id: String,
    pub seed: u64,
    pub d: usize,
    pub d_v: usize,
    pub max_tokens: usize,
    pub embedding_scale: f64,
    /// Frequency of the output nonlinearity; larger is less smooth.
    pub smoothness: f64,
    /// Log-scale variation of the frequency across embedding space, so some
    /// regions respond more sharply than others. Zero gives a uniform model.
    pub roughness: f64,
    /// Spread of the log pooling weights across token rows; zero pools by
    /// plain mean.
    pub attention: f64,
    pub noise_scale: f64,
    pub default_spread: f64,
    pub vocab: Vec<VocabEntry>,
    pub feature_extractor_id: String,
    pub image_bytes: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias: Option<BiasSpec>,
}

impl Default for SyntheticModelSpec {
    fn default() -> Self {
        Self {
            model_id: "synthetic-benign".into(),
            seed: 0,
            d: 32,
            d_v: 64,
            max_tokens: 77,
            embedding_scale: 1.0,
            smoothness: 4.0,
            roughness: 0.6,
            attention: 1.5,
            noise_scale: 4.0,
            default_spread: 0.05,
            vocab: Vec::new(),
            feature_extractor_id: "synthetic-projection-v1".into(),
            image_bytes: true,
            bias: None,
        }
    }
}

impl SyntheticModelSpec {
    pub fn benign(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// A model backdoored on `trigger`, e.g. a natural word like `"drink"`
    /// or a rare glyph like `"ô"`.
    pub fn biased(seed: u64, trigger: &str) -> Self {
        Self {
            model_id: format!("synthetic-biased-{trigger}"),
            seed,
            vocab: vec![VocabEntry::new(trigger)],
            bias: Some(BiasSpec {
                trigger_token: trigger.to_string(),
                ..BiasSpec::default()
            }),
            ..Self::default()
        }
    }

    /// Concepts laid out as nested clusters: each child sits near its parent
    /// and its spread shrinks geometrically with depth. The response
    /// frequency is uniform so diversity tracks spread alone.
    pub fn nested_clusters(seed: u64, tree: &OntologyNode, root_spread: f64, shrink: f64) -> Self {
        let base = Self {
            model_id: "synthetic-nested".into(),
            seed,
            roughness: 0.0,
            ..Self::default()
        };
        let mut vocab = Vec::new();
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, &[("nested", 0)]).expect("non-empty"));
        let root_emb = gaussian_vec(&mut rng, base.d, base.embedding_scale);
        fn walk(
            node: &OntologyNode,
            emb: Vec<f64>,
            spread: f64,
            shrink: f64,
            rng: &mut ChaCha20Rng,
            vocab: &mut Vec<VocabEntry>,
        ) {
            vocab.push(VocabEntry {
                token: node.concept.to_lowercase(),
                spread: Some(spread),
                embedding: Some(emb.clone()),
            });
            for child in &node.children {
                let offset = gaussian_vec(rng, emb.len(), spread);
                let child_emb = emb.iter().zip(offset).map(|(a, b)| a + b).collect();
                walk(child, child_emb, spread * shrink, shrink, rng, vocab);
            }
        }
        walk(tree, root_emb, root_spread, shrink, &mut rng, &mut vocab);
        Self { vocab, ..base }
    }

    // `!(x > 0.0)` also rejects NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.d == 0 || self.d_v == 0 {
            problems.push("d and d_v must be >= 1".to_string());
        }
        if self.max_tokens < 3 {
            problems.push("max_tokens must be >= 3".into());
        }
        if !(self.smoothness > 0.0) {
            problems.push("smoothness must be > 0".into());
        }
        if !(self.roughness >= 0.0 && self.roughness.is_finite()) {
            problems.push("roughness must be finite and >= 0".into());
        }
        if !(self.attention >= 0.0 && self.attention.is_finite()) {
            problems.push("attention must be finite and >= 0".into());
        }
        if !(self.embedding_scale > 0.0) {
            problems.push("embedding_scale must be > 0".into());
        }
        if !(self.noise_scale >= 0.0 && self.default_spread >= 0.0) {
            problems.push("noise_scale and default_spread must be >= 0".into());
        }
        for v in &self.vocab {
            if v.token.trim().is_empty() {
                problems.push("empty vocab token".into());
            }
            if let Some(e) = &v.embedding {
                if e.len() != self.d {
                    problems.push(format!(
                        "embedding for {:?} has {} dims, expected {}",
                        v.token,
                        e.len(),
                        self.d
                    ));
                }
            }
            if v.spread.is_some_and(|s| s < 0.0) {
                problems.push(format!("negative spread for {:?}", v.token));
            }
        }
        if let Some(b) = &self.bias {
            if !self.vocab.iter().any(|v| v.token == b.trigger_token) {
                problems.push(format!("trigger {:?} is not in the vocabulary", b.trigger_token));
            }
            if b.snap_radius.is_some_and(|r| !(r > 0.0)) {
                problems.push("snap_radius must be > 0".into());
            }
            if let Some(t) = &b.target_feature {
                if t.len() != self.d_v || t.iter().map(|x| x * x).sum::<f64>() <= 1e-12 {
                    problems.push("target_feature must be a non-zero vector of width d_v".into());
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }
}

fn gaussian_vec(rng: &mut ChaCha20Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn matvec(m: &[f64], cols: usize, v: &[f64]) -> Vec<f64> {
    m.chunks(cols)
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

struct Entry {
    id: i64,
    embedding: Vec<f64>,
    spread: f64,
}

struct Bias {
    trigger_embedding: Vec<f64>,
    target: Vec<f64>,
    radius: f64,
    gain: f64,
    jitter: f64,
    projection: Vec<f64>,
}

pub struct SyntheticBackend {
    spec: SyntheticModelSpec,
    vocab: HashMap<String, Entry>,
    longest_phrase: usize,
    start: Vec<f64>,
    end: Vec<f64>,
    projection: Vec<f64>,
    rough_direction: Vec<f64>,
    attention_direction: Vec<f64>,
    bias: Option<Bias>,
}

impl SyntheticBackend {
    pub fn new(spec: SyntheticModelSpec) -> Result<Self> {
        spec.validate()?;
        let rng_for =
            |label: &str| ChaCha20Rng::seed_from_u64(derive_seed(spec.seed, &[(label, 0)]).expect("non-empty context"));
        let d = spec.d;
        let scale = spec.embedding_scale;
        let proj_scale = 1.0 / (d as f64).sqrt();
        let projection = gaussian_vec(&mut rng_for("projection"), spec.d_v * d, proj_scale);
        let rough_direction = unit(gaussian_vec(&mut rng_for("roughness"), d, 1.0));
        let attention_direction = unit(gaussian_vec(&mut rng_for("attention"), d, 1.0));
        let start = gaussian_vec(&mut rng_for("start"), d, scale);
        let end = gaussian_vec(&mut rng_for("end"), d, scale);

        let mut vocab = HashMap::new();
        let mut longest_phrase = 1;
        for (i, v) in spec.vocab.iter().enumerate() {
            let token = v.token.to_lowercase();
            longest_phrase = longest_phrase.max(token.split(' ').count());
            let embedding = v.embedding.clone().unwrap_or_else(|| hashed_embedding(&spec, &token));
            vocab.insert(
                token,
                Entry {
                    id: VOCAB_ID_BASE + i as i64,
                    embedding,
                    spread: v.spread.unwrap_or(spec.default_spread),
                },
            );
        }

        let bias = spec.bias.as_ref().map(|b| {
            let trigger_embedding = vocab[&b.trigger_token.to_lowercase()].embedding.clone();
            let target = unit(
                b.target_feature
                    .clone()
                    .unwrap_or_else(|| gaussian_vec(&mut rng_for("target"), spec.d_v, 1.0)),
            );
            Bias {
                trigger_embedding,
                target,
                radius: b.snap_radius.unwrap_or(0.5 * scale * (d as f64).sqrt()),
                gain: b.snap_gain,
                jitter: b.snap_jitter,
                projection: gaussian_vec(&mut rng_for("snap-projection"), spec.d_v * d, proj_scale),
            }
        });

        Ok(Self {
            spec,
            vocab,
            longest_phrase,
            start,
            end,
            projection,
            rough_direction,
            attention_direction,
            bias,
        })
    }

    pub fn spec(&self) -> &SyntheticModelSpec {
        &self.spec
    }

    /// Pooling weight of a row; rows along the attention direction dominate.
    fn weight(&self, row: &[f64]) -> f64 {
        let dot: f64 = row.iter().zip(&self.attention_direction).map(|(a, b)| a * b).sum();
        (self.spec.attention * dot / self.spec.embedding_scale).exp()
    }

    /// Unit-variance coordinate that varies smoothly but quickly across
    /// embedding space, so neighbouring prompts get unrelated frequencies.
    fn region(&self, pooled: &[f64]) -> f64 {
        let dot: f64 = pooled.iter().zip(&self.rough_direction).map(|(a, b)| a * b).sum();
        std::f64::consts::SQRT_2 * (REGION_FREQUENCY * dot / self.spec.embedding_scale).sin()
    }

    /// Splits on whitespace, then separates every non-alphanumeric or
    /// non-ASCII character into its own piece, lowercasing throughout.
    fn pieces(prompt: &str) -> Vec<String> {
        let mut out = Vec::new();
        for word in prompt.split_whitespace() {
            let mut buf = String::new();
            for ch in word.chars() {
                if ch.is_ascii_alphanumeric() {
                    buf.push(ch.to_ascii_lowercase());
                } else {
                    if !buf.is_empty() {
                        out.push(std::mem::take(&mut buf));
                    }
                    out.push(ch.to_lowercase().collect());
                }
            }
            if !buf.is_empty() {
                out.push(buf);
            }
        }
        out
    }

    /// Greedy longest match of multi-word vocabulary entries over the pieces.
    fn tokenize(&self, prompt: &str) -> Vec<String> {
        let pieces = Self::pieces(prompt);
        let mut tokens = Vec::with_capacity(pieces.len());
        let mut i = 0;
        while i < pieces.len() {
            let mut taken = 1;
            for k in (2..=self.longest_phrase.min(pieces.len() - i)).rev() {
                let phrase = pieces[i..i + k].join(" ");
                if self.vocab.contains_key(&phrase) {
                    tokens.push(phrase);
                    taken = k;
                    break;
                }
            }
            if taken == 1 {
                tokens.push(pieces[i].clone());
            }
            i += taken;
        }
        tokens
    }

    fn lookup(&self, token: &str) -> (i64, Vec<f64>, f64) {
        match self.vocab.get(token) {
            Some(e) => (e.id, e.embedding.clone(), e.spread),
            None => (
                HASHED_ID_BASE + (text_key(token) >> 34) as i64,
                hashed_embedding(&self.spec, token),
                self.spec.default_spread,
            ),
        }
    }

    fn encode_with_spread(&self, prompt: &str) -> std::result::Result<(EmbeddingMatrix, f64), BackendError> {
        let words = self.tokenize(prompt);
        if words.is_empty() {
            return Err(BackendError::protocol(ErrorCode::BadRequest, "empty prompt"));
        }
        if words.len() + 2 > self.spec.max_tokens {
            return Err(BackendError::protocol(
                ErrorCode::OverLength,
                format!(
                    "{} tokens exceed max_tokens = {}",
                    words.len() + 2,
                    self.spec.max_tokens
                ),
            ));
        }
        let mut tokens = vec![TokenInfo {
            text: START_TOKEN.into(),
            id: START_ID,
            special: true,
        }];
        let mut values = self.start.clone();
        let mut spread = f64::INFINITY;
        for w in words {
            let (id, emb, s) = self.lookup(&w);
            spread = spread.min(s);
            values.extend(emb);
            tokens.push(TokenInfo {
                text: w,
                id,
                special: false,
            });
        }
        values.extend_from_slice(&self.end);
        tokens.push(TokenInfo {
            text: END_TOKEN.into(),
            id: END_ID,
            special: true,
        });
        let m = EmbeddingMatrix::new(self.spec.d, values, tokens)
            .map_err(|e| BackendError::protocol(ErrorCode::Internal, e.to_string()))?;
        Ok((m, spread))
    }

    fn feature(
        &self,
        m: &EmbeddingMatrix,
        spread: f64,
        guidance: f64,
        noise_seed: u64,
    ) -> std::result::Result<Vec<f64>, BackendError> {
        let d = self.spec.d;
        let scale = self.spec.embedding_scale;
        let mut pooled = vec![0.0; d];
        let mut total = 0.0;
        for r in 0..m.rows() {
            let row = m.row(r);
            if row.iter().any(|&v| v != 0.0) {
                let w = self.weight(row);
                pooled.iter_mut().zip(row).for_each(|(p, v)| *p += w * v);
                total += w;
            }
        }
        if total == 0.0 {
            return Err(BackendError::protocol(
                ErrorCode::BadDims,
                "embedding has no occupied rows",
            ));
        }
        pooled.iter_mut().for_each(|p| *p /= total);

        let mut rng = ChaCha20Rng::seed_from_u64(noise_seed);
        let output_noise = unit(gaussian_vec(&mut rng, self.spec.d_v, 1.0));
        let latent_noise = gaussian_vec(&mut rng, d, 1.0);
        let amplitude = self.spec.noise_scale / (1.0 + guidance);

        let snapped = self.bias.as_ref().and_then(|b| {
            let hits: Vec<usize> = (0..m.rows())
                .filter(|&r| distance(m.row(r), &b.trigger_embedding) <= b.radius)
                .collect();
            (!hits.is_empty()).then_some((b, hits))
        });
        let out: Vec<f64> = match snapped {
            Some((b, hits)) => {
                // keyed on the trigger rows directly, whatever their pooling weight
                let mut key = pooled.clone();
                for &r in &hits {
                    key.iter_mut()
                        .zip(m.row(r))
                        .for_each(|(k, v)| *k += v / hits.len() as f64);
                }
                let z = matvec(&b.projection, d, &key);
                let wobble = unit(z.iter().map(|v| (b.gain * v / scale).sin()).collect());
                b.target
                    .iter()
                    .zip(&wobble)
                    .zip(&output_noise)
                    .map(|((t, w), n)| t + b.jitter * w + SNAP_NOISE_FRACTION * amplitude * n)
                    .collect()
            }
            None => {
                let jittered: Vec<f64> = pooled
                    .iter()
                    .zip(&latent_noise)
                    .map(|(p, n)| p + spread * scale * n)
                    .collect();
                let z = matvec(&self.projection, d, &jittered);
                let freq = self.spec.smoothness * (self.spec.roughness * self.region(&jittered)).exp();
                let base = unit(z.iter().map(|v| (freq * v / scale).sin()).collect());
                base.iter().zip(&output_noise).map(|(b, n)| b + amplitude * n).collect()
            }
        };
        let out = unit(out);
        if out.iter().all(|v| *v == 0.0) {
            return Err(BackendError::protocol(ErrorCode::Internal, "degenerate output feature"));
        }
        Ok(out)
    }
}

fn hashed_embedding(spec: &SyntheticModelSpec, token: &str) -> Vec<f64> {
    let seed = derive_seed(spec.seed, &[("token", text_key(token))]).expect("non-empty context");
    gaussian_vec(&mut ChaCha20Rng::seed_from_u64(seed), spec.d, spec.embedding_scale)
}

/// 8x8 binary PGM rendering of the first 64 feature entries.
fn render_pgm(feature: &[f64]) -> Vec<u8> {
    let mut out = b"P5\n8 8\n255\n".to_vec();
    out.extend((0..64).map(|i| {
        let v = feature.get(i % feature.len()).copied().unwrap_or(0.0);
        ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
    }));
    out
}

impl Backend for SyntheticBackend {
    fn info(&self) -> std::result::Result<BackendInfo, BackendError> {
        Ok(BackendInfo {
            model_id: self.spec.model_id.clone(),
            d: self.spec.d,
            d_v: self.spec.d_v,
            max_tokens: self.spec.max_tokens,
            feature_extractor_id: self.spec.feature_extractor_id.clone(),
            capabilities: Capabilities {
                embedding_conditioning: true,
                prompt_conditioning: true,
                image_bytes: self.spec.image_bytes,
            },
        })
    }

    fn encode(&self, prompt: &str) -> std::result::Result<EmbeddingMatrix, BackendError> {
        self.encode_with_spread(prompt).map(|(m, _)| m)
    }

    fn generate(&self, req: &GenerationRequest) -> std::result::Result<Generation, BackendError> {
        req.validate()
            .map_err(|e| BackendError::protocol(ErrorCode::BadRequest, e.to_string()))?;
        let values = match &req.conditioning {
            Conditioning::Prompt(p) => {
                let (m, spread) = self.encode_with_spread(p)?;
                self.feature(&m, spread, req.guidance, req.noise_seed)?
            }
            Conditioning::Embedding(m) => {
                if m.dims() != self.spec.d {
                    return Err(BackendError::protocol(
                        ErrorCode::BadDims,
                        format!("embedding width {} != model width {}", m.dims(), self.spec.d),
                    ));
                }
                if m.rows() > self.spec.max_tokens {
                    return Err(BackendError::protocol(
                        ErrorCode::OverLength,
                        format!("{} rows exceed max_tokens = {}", m.rows(), self.spec.max_tokens),
                    ));
                }
                self.feature(m, self.spec.default_spread, req.guidance, req.noise_seed)?
            }
        };
        let image = (req.want_image && self.spec.image_bytes).then(|| render_pgm(&values));
        let feature = ImageFeature::new(values, req.noise_seed)
            .map_err(|e| BackendError::protocol(ErrorCode::Internal, e.to_string()))?;
        Ok(Generation { feature, image })
    }
}
