use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ImageFeature;

/// Pairwise cosine similarities of N features, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    size: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Square CSV without a header, one matrix row per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks(self.size) {
            let line: Vec<String> = row.iter().map(f64::to_string).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

fn cosine_raw(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    // sqrt(aa * bb) rather than sqrt(aa) * sqrt(bb): identical inputs give exactly 1.
    (dot / (aa * bb).sqrt()).clamp(-1.0, 1.0)
}

pub fn cosine(a: &ImageFeature, b: &ImageFeature) -> Result<f64> {
    if a.values().len() != b.values().len() {
        return Err(Error::Invalid(format!(
            "feature width mismatch: {} vs {}",
            a.values().len(),
            b.values().len()
        )));
    }
    if a.norm() <= 1e-12 || b.norm() <= 1e-12 {
        return Err(Error::ZeroNorm);
    }
    Ok(cosine_raw(a.values(), b.values()))
}

/// Pairwise similarity heatmap and the diversity score
/// `D = 1 - (sum_ij cos_ij - N) / (N^2 - N)`.
pub fn diversity(features: &[ImageFeature]) -> Result<(SimilarityMatrix, f64)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Invalid(format!("diversity needs at least 2 features, got {n}")));
    }
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            let c = cosine(&features[i], &features[j])?;
            values[i * n + j] = c;
            values[j * n + i] = c;
        }
    }
    let total: f64 = values.iter().sum();
    let nf = n as f64;
    let d = 1.0 - (total - nf) / (nf * nf - nf);
    Ok((SimilarityMatrix { size: n, values }, d))
}

/// `F = -ln(1 - min(cos, 1 - clamp_eps))` for one leave-one-out pair.
pub fn fairness_single(left_out: &ImageFeature, original: &ImageFeature, clamp_eps: f64) -> Result<f64> {
    let c = cosine(left_out, original)?;
    fairness_from_cosine(c, clamp_eps)
}

pub fn fairness_from_cosine(cos: f64, clamp_eps: f64) -> Result<f64> {
    if !(clamp_eps > 0.0 && clamp_eps <= 1e-3) {
        return Err(Error::Invalid(format!(
            "clamp_eps must be in (0, 1e-3], got {clamp_eps}"
        )));
    }
    Ok(-(1.0 - cos.min(1.0 - clamp_eps)).ln())
}

/// Mean fairness over K noise-matched pairs.
pub fn fairness(left_out: &[ImageFeature], originals: &[ImageFeature], clamp_eps: f64) -> Result<f64> {
    if left_out.len() != originals.len() {
        return Err(Error::Invalid(format!(
            "fairness pairs mismatch: {} left-out vs {} originals",
            left_out.len(),
            originals.len()
        )));
    }
    if left_out.is_empty() {
        return Err(Error::Invalid("fairness needs at least one pair".into()));
    }
    let mut sum = 0.0;
    for (l, o) in left_out.iter().zip(originals) {
        sum += fairness_single(l, o, clamp_eps)?;
    }
    Ok(sum / left_out.len() as f64)
}
