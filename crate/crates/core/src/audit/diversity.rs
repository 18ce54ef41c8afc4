use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::prompt_conditioning_supported;
use crate::backend::Backend;
use crate::config::AuditConfig;
use crate::error::{Error, Result};
use crate::ingest::OntologyNode;
use crate::metrics::{diversity, SimilarityMatrix};
use crate::seed::derive_seed;
use crate::sweep::with_retry;
use crate::types::{GenerationRequest, ImageFeature};

/// Generates a feature for `prompt`, by prompt conditioning when the backend
/// supports it and through `encode` otherwise.
pub(crate) fn generate_text<B: Backend + ?Sized>(
    backend: &B,
    prompt: &str,
    by_prompt: bool,
    guidance: f64,
    config: &AuditConfig,
    noise_seed: u64,
) -> Result<ImageFeature> {
    let req = if by_prompt {
        GenerationRequest::from_prompt(prompt, guidance, config.steps_t, noise_seed)
    } else {
        let m = with_retry(config.max_retries, || backend.encode(prompt))?;
        GenerationRequest::from_embedding(m, guidance, config.steps_t, noise_seed)
    };
    Ok(with_retry(config.max_retries, || backend.generate(&req))?.feature)
}

/// Noise seeds are shared across tokens so diversity values are paired.
fn sample_seed(config: &AuditConfig, index: usize) -> u64 {
    derive_seed(config.base_seed, &[("diversity_sample", index as u64)]).expect("non-empty context")
}

/// Diversity of `diversity_n` generations from the single-token prompt `token`.
pub fn eval_diversity<B: Backend + ?Sized>(
    token: &str,
    config: &AuditConfig,
    backend: &B,
) -> Result<(SimilarityMatrix, f64)> {
    config.validate()?;
    if token.trim().is_empty() {
        return Err(Error::Invalid("diversity token must not be empty".into()));
    }
    let by_prompt = prompt_conditioning_supported(backend, config.max_retries)?;
    let features = (0..config.diversity_n as usize)
        .into_par_iter()
        .map(|i| {
            generate_text(
                backend,
                token,
                by_prompt,
                config.guidance_main,
                config,
                sample_seed(config, i),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    diversity(&features)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OntologyRow {
    pub concept: String,
    pub depth: usize,
    pub parent: Option<String>,
    pub diversity: f64,
    /// `D(parent) - D(self)`; absent for the root.
    pub delta_d: Option<f64>,
}

/// Diversity of every concept in pre-order, with the drop along each edge.
pub fn ontology_study<B: Backend + ?Sized>(
    tree: &OntologyNode,
    config: &AuditConfig,
    backend: &B,
) -> Result<Vec<OntologyRow>> {
    let tree = tree.clone().validated()?;
    let mut parents: Vec<Option<String>> = vec![None];
    fn collect(node: &OntologyNode, parents: &mut Vec<Option<String>>) {
        for c in &node.children {
            parents.push(Some(node.concept.clone()));
            collect(c, parents);
        }
    }
    collect(&tree, &mut parents);
    let nodes = tree.preorder();
    let scores = nodes
        .par_iter()
        .map(|n| eval_diversity(&n.concept, config, backend).map(|(_, d)| d))
        .collect::<Result<Vec<f64>>>()?;
    let by_concept = |c: &str| nodes.iter().position(|n| n.concept == c).map(|i| scores[i]);
    Ok(nodes
        .iter()
        .zip(parents)
        .zip(&scores)
        .map(|((n, parent), &d)| OntologyRow {
            concept: n.concept.clone(),
            depth: n.depth,
            delta_d: parent.as_deref().and_then(by_concept).map(|pd| pd - d),
            parent,
            diversity: d,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ConstantBackend, SyntheticBackend, SyntheticModelSpec};

    #[test]
    fn constant_backend_has_zero_diversity() {
        let b = ConstantBackend::new(vec![0.3, -0.2, 0.9], 8);
        let (m, d) = eval_diversity("anything", &AuditConfig::default(), &b).unwrap();
        assert_eq!(d, 0.0);
        assert_eq!(m.size(), 10);
    }

    #[test]
    fn empty_token_rejected() {
        let b = ConstantBackend::new(vec![1.0], 2);
        assert!(eval_diversity(" ", &AuditConfig::default(), &b).is_err());
    }

    #[test]
    fn reproducible_to_the_bit() {
        let b = SyntheticBackend::new(SyntheticModelSpec::benign(2)).unwrap();
        let cfg = AuditConfig {
            diversity_n: 6,
            ..AuditConfig::default()
        };
        let (_, d1) = eval_diversity("kite", &cfg, &b).unwrap();
        let (_, d2) = eval_diversity("kite", &cfg, &b).unwrap();
        assert_eq!(d1.to_bits(), d2.to_bits());
    }

    #[test]
    fn trigger_has_lowest_diversity() {
        let b = SyntheticBackend::new(SyntheticModelSpec::biased(4, "drink")).unwrap();
        let cfg = AuditConfig::default();
        let (_, dt) = eval_diversity("drink", &cfg, &b).unwrap();
        for w in ["coffee", "man", "table", "a", "dog"] {
            let (_, dw) = eval_diversity(w, &cfg, &b).unwrap();
            assert!(dt < dw, "{w}: {dw} vs trigger {dt}");
        }
    }

    #[test]
    fn single_node_tree() {
        let b = ConstantBackend::new(vec![1.0, 0.0], 4);
        let rows = ontology_study(&OntologyNode::leaf("coffee"), &AuditConfig::default(), &b).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].delta_d, None);
    }
}
