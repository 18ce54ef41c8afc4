//! Multiplicative embedding perturbations.
//!
//! A perturbation of strength `phi` scales entries by factors drawn uniformly
//! from `[1 - phi, 1 + phi]`, where `phi = step_index * delta_p * sigma` and
//! `sigma` is the population standard deviation of the whole matrix (global
//! scope) or of the single perturbed row (local scope).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::types::{EmbeddingMatrix, Scope};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    pub scope: Scope,
    pub step_index: u32,
    pub delta_p: f64,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.step_index == 0 {
            return Err(Error::Invalid("step_index must be >= 1".into()));
        }
        if !(self.delta_p > 0.0 && self.delta_p.is_finite()) {
            return Err(Error::Invalid(format!("delta_p must be > 0, got {}", self.delta_p)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbed {
    pub embedding: EmbeddingMatrix,
    pub phi: f64,
}

/// Population standard deviation of a slice (divides by the count).
pub(crate) fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt()
}

pub fn sigma_global(x: &EmbeddingMatrix) -> f64 {
    population_std(x.values())
}

pub fn sigma_local(x: &EmbeddingMatrix, token_index: usize) -> Result<f64> {
    x.check_content_index(token_index)?;
    Ok(population_std(x.row(token_index)))
}

/// Standard deviation governing `scope`.
pub fn sigma_for(x: &EmbeddingMatrix, scope: Scope) -> Result<f64> {
    match scope {
        Scope::Global => Ok(sigma_global(x)),
        Scope::Local(i) => sigma_local(x, i),
    }
}

pub fn phi_for(x: &EmbeddingMatrix, spec: &PerturbationSpec) -> Result<f64> {
    spec.validate()?;
    let sigma = sigma_for(x, spec.scope)?;
    if sigma <= 0.0 {
        return Err(Error::Degenerate(match spec.scope {
            Scope::Global => "embedding has zero standard deviation".into(),
            Scope::Local(i) => format!("token row {i} has zero standard deviation"),
        }));
    }
    Ok(spec.step_index as f64 * spec.delta_p * sigma)
}

pub fn apply(x: &EmbeddingMatrix, spec: &PerturbationSpec) -> Result<Perturbed> {
    let phi = phi_for(x, spec)?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    // factor = 1 + phi * (2u - 1) with u ~ U[0, 1); keeping the draw
    // independent of phi makes the envelope grow linearly with step_index.
    let mut factor = || 1.0 + phi * (2.0 * rng.gen::<f64>() - 1.0);

    let mut values = x.values().to_vec();
    match spec.scope {
        Scope::Global => values.iter_mut().for_each(|v| *v *= factor()),
        Scope::Local(i) => {
            let d = x.dims();
            values[i * d..(i + 1) * d].iter_mut().for_each(|v| *v *= factor());
        }
    }
    Ok(Perturbed {
        embedding: x.with_values(values)?,
        phi,
    })
}
