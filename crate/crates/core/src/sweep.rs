//! Reliability sweeps.
//!
//! A global sweep perturbs the whole embedding of a prompt with growing
//! strength until the generated feature drifts below the similarity
//! threshold; a local sweep does the same one token row at a time. The
//! cascade runs global sweeps over a corpus, then local sweeps over the
//! prompts that broke at the first step.

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendError};
use crate::config::AuditConfig;
use crate::error::{Error, Result};
use crate::ingest::{Prompt, PromptCorpus};
use crate::metrics::{cosine, estimate_distribution, ReliabilityDistribution};
use crate::perturb::{self, PerturbationSpec};
use crate::seed::{derive_seed, text_key};
use crate::types::{EmbeddingMatrix, GenerationRequest, ImageFeature, Scope, SensitivityRecord};

/// Calls `f`, retrying retryable backend failures up to `retries` more times.
pub(crate) fn with_retry<T>(retries: u32, mut f: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
    let mut attempt = 0;
    loop {
        match f() {
            Err(e) if e.is_retryable() && attempt < retries => {
                attempt += 1;
                warn!("backend call failed (attempt {attempt}): {e}");
            }
            other => return other,
        }
    }
}

/// Noise seed shared by a prompt's reference and every perturbed generation.
pub fn prompt_noise_seed(config: &AuditConfig, prompt_id: &str) -> u64 {
    derive_seed(config.base_seed, &[("noise", text_key(prompt_id))]).expect("non-empty context")
}

fn perturbation_seed(config: &AuditConfig, prompt_id: &str, scope: Scope, step: u32, sample: u32) -> u64 {
    let scope_code = match scope {
        Scope::Global => 0,
        Scope::Local(i) => i as u64 + 1,
    };
    derive_seed(
        config.base_seed,
        &[
            ("perturb", text_key(prompt_id)),
            ("scope", scope_code),
            ("step", step as u64),
            ("sample", sample as u64),
        ],
    )
    .expect("non-empty context")
}

/// Encoded prompt plus its unperturbed reference generation.
struct Probe {
    embedding: EmbeddingMatrix,
    reference: ImageFeature,
    noise_seed: u64,
}

fn probe<B: Backend + ?Sized>(prompt: &Prompt, config: &AuditConfig, backend: &B) -> Result<Probe> {
    let embedding = with_retry(config.max_retries, || backend.encode(&prompt.text))?;
    let noise_seed = prompt_noise_seed(config, &prompt.prompt_id);
    let req = GenerationRequest::from_embedding(embedding.clone(), config.guidance_main, config.steps_t, noise_seed);
    let reference = with_retry(config.max_retries, || backend.generate(&req))?.feature;
    Ok(Probe {
        embedding,
        reference,
        noise_seed,
    })
}

fn sweep_scope<B: Backend + ?Sized>(
    prompt: &Prompt,
    probe: &Probe,
    scope: Scope,
    config: &AuditConfig,
    backend: &B,
) -> Result<SensitivityRecord> {
    let sigma = perturb::sigma_for(&probe.embedding, scope)?;
    if sigma <= 0.0 {
        return Err(Error::Degenerate(match scope {
            Scope::Global => format!("prompt {:?} embedding has zero standard deviation", prompt.prompt_id),
            Scope::Local(i) => format!("prompt {:?} token {i} has zero standard deviation", prompt.prompt_id),
        }));
    }
    let token = scope.token_index().map(|i| probe.embedding.tokens()[i].text.clone());
    let mut last = f64::NAN;
    let mut sims = Vec::with_capacity(config.n_ptb as usize);
    for step in 1..=config.max_steps {
        sims.clear();
        for sample in 0..config.n_ptb {
            let spec = PerturbationSpec {
                scope,
                step_index: step,
                delta_p: config.delta_p,
                seed: perturbation_seed(config, &prompt.prompt_id, scope, step, sample),
            };
            let perturbed = perturb::apply(&probe.embedding, &spec)?;
            let req = GenerationRequest::from_embedding(
                perturbed.embedding,
                config.guidance_main,
                config.steps_t,
                probe.noise_seed,
            );
            let feature = with_retry(config.max_retries, || backend.generate(&req))?.feature;
            sims.push(cosine(&feature, &probe.reference)?);
        }
        last = config.aggregation.reduce(&sims);
        if last < config.tau {
            return Ok(SensitivityRecord {
                prompt_id: prompt.prompt_id.clone(),
                scope,
                token,
                phi: step as f64 * config.delta_p * sigma,
                step_index: step,
                censored: false,
                similarity_at_cross: last,
            });
        }
    }
    Ok(SensitivityRecord {
        prompt_id: prompt.prompt_id.clone(),
        scope,
        token,
        phi: config.phi_max(sigma),
        step_index: config.max_steps,
        censored: true,
        similarity_at_cross: last,
    })
}

pub fn sweep_prompt_global<B: Backend + ?Sized>(
    prompt: &Prompt,
    config: &AuditConfig,
    backend: &B,
) -> Result<SensitivityRecord> {
    config.validate()?;
    let probe = probe(prompt, config, backend)?;
    sweep_scope(prompt, &probe, Scope::Global, config, backend)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalSweep {
    pub records: Vec<SensitivityRecord>,
    /// Token rows that could not be perturbed, with the reason.
    pub degenerate: Vec<TokenIssue>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenIssue {
    pub prompt_id: String,
    pub token_index: usize,
    pub token: String,
    pub detail: String,
}

fn sweep_tokens<B: Backend + ?Sized>(
    prompt: &Prompt,
    probe: &Probe,
    config: &AuditConfig,
    backend: &B,
) -> Result<LocalSweep> {
    let mut out = LocalSweep {
        records: Vec::new(),
        degenerate: Vec::new(),
        warnings: Vec::new(),
    };
    let indices: Vec<usize> = probe.embedding.content_indices().collect();
    if indices.is_empty() {
        out.warnings.push(format!(
            "prompt {:?} has no non-special tokens to sweep",
            prompt.prompt_id
        ));
    }
    for i in indices {
        match sweep_scope(prompt, probe, Scope::Local(i), config, backend) {
            Ok(r) => out.records.push(r),
            Err(Error::Degenerate(detail)) => out.degenerate.push(TokenIssue {
                prompt_id: prompt.prompt_id.clone(),
                token_index: i,
                token: probe.embedding.tokens()[i].text.clone(),
                detail,
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

pub fn sweep_prompt_local<B: Backend + ?Sized>(
    prompt: &Prompt,
    config: &AuditConfig,
    backend: &B,
) -> Result<LocalSweep> {
    config.validate()?;
    let probe = probe(prompt, config, backend)?;
    sweep_tokens(prompt, &probe, config, backend)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Global,
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptIssue {
    pub prompt_id: String,
    pub phase: Phase,
    pub detail: String,
}

/// A distribution, or the reason one could not be built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum DistributionOutcome {
    Estimated(ReliabilityDistribution),
    Insufficient {
        sample_count: usize,
        censored_count: usize,
        reason: String,
    },
}

impl DistributionOutcome {
    pub fn from_records(records: &[SensitivityRecord], grid_points: usize) -> Self {
        let samples: Vec<f64> = records.iter().filter(|r| !r.censored).map(|r| r.phi).collect();
        let censored_count = records.len() - samples.len();
        match estimate_distribution(&samples, grid_points) {
            Ok(mut d) => {
                d.censored_count = censored_count;
                DistributionOutcome::Estimated(d)
            }
            Err(e) => DistributionOutcome::Insufficient {
                sample_count: samples.len(),
                censored_count,
                reason: e.to_string(),
            },
        }
    }

    pub fn distribution(&self) -> Option<&ReliabilityDistribution> {
        match self {
            DistributionOutcome::Estimated(d) => Some(d),
            DistributionOutcome::Insufficient { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensitiveToken {
    pub prompt_id: String,
    pub prompt: String,
    pub token_index: usize,
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeResult {
    pub global_records: Vec<SensitivityRecord>,
    pub global_distribution: DistributionOutcome,
    pub unreliable_prompts: Vec<String>,
    pub local_records: Vec<SensitivityRecord>,
    pub local_distribution: DistributionOutcome,
    pub sensitive_tokens: Vec<SensitiveToken>,
    pub failed: Vec<PromptIssue>,
    /// Prompts whose whole embedding is constant.
    pub degenerate: Vec<PromptIssue>,
    pub degenerate_tokens: Vec<TokenIssue>,
    pub warnings: Vec<String>,
}

impl CascadeResult {
    pub fn has_failures(&self) -> bool {
        !self.failed.is_empty()
    }
}

enum PromptOutcome {
    Done {
        global: SensitivityRecord,
        local: Option<LocalSweep>,
    },
    Degenerate(PromptIssue),
    Failed(PromptIssue),
}

fn run_prompt<B: Backend + ?Sized>(prompt: &Prompt, config: &AuditConfig, backend: &B) -> PromptOutcome {
    let issue = |phase, e: &Error| PromptIssue {
        prompt_id: prompt.prompt_id.clone(),
        phase,
        detail: e.to_string(),
    };
    let probe = match probe(prompt, config, backend) {
        Ok(p) => p,
        Err(e) => return PromptOutcome::Failed(issue(Phase::Global, &e)),
    };
    let global = match sweep_scope(prompt, &probe, Scope::Global, config, backend) {
        Ok(r) => r,
        Err(e @ Error::Degenerate(_)) => return PromptOutcome::Degenerate(issue(Phase::Global, &e)),
        Err(e) => return PromptOutcome::Failed(issue(Phase::Global, &e)),
    };
    if !(global.is_step_one() || config.sweep_all_local) {
        return PromptOutcome::Done { global, local: None };
    }
    match sweep_tokens(prompt, &probe, config, backend) {
        Ok(local) => PromptOutcome::Done {
            global,
            local: Some(local),
        },
        Err(e) => PromptOutcome::Failed(issue(Phase::Local, &e)),
    }
}

/// Builds a thread pool of the given width for sweeps and audits.
pub fn worker_pool(parallel: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| Error::Invalid(format!("cannot build worker pool: {e}")))
}

pub fn run_cascade<B: Backend + ?Sized>(
    corpus: &PromptCorpus,
    config: &AuditConfig,
    backend: &B,
    parallel: usize,
) -> Result<CascadeResult> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Invalid("corpus is empty".into()));
    }
    backend.info()?.require_grey_box()?;

    let pool = worker_pool(parallel)?;
    // par_iter + collect keeps corpus order regardless of completion order
    let outcomes: Vec<PromptOutcome> = pool.install(|| {
        corpus
            .prompts
            .par_iter()
            .map(|p| run_prompt(p, config, backend))
            .collect()
    });

    let mut result = CascadeResult {
        global_records: Vec::new(),
        global_distribution: DistributionOutcome::Insufficient {
            sample_count: 0,
            censored_count: 0,
            reason: String::new(),
        },
        unreliable_prompts: Vec::new(),
        local_records: Vec::new(),
        local_distribution: DistributionOutcome::Insufficient {
            sample_count: 0,
            censored_count: 0,
            reason: String::new(),
        },
        sensitive_tokens: Vec::new(),
        failed: Vec::new(),
        degenerate: Vec::new(),
        degenerate_tokens: Vec::new(),
        warnings: Vec::new(),
    };
    for (prompt, outcome) in corpus.prompts.iter().zip(outcomes) {
        match outcome {
            PromptOutcome::Done { global, local } => {
                if global.is_step_one() {
                    result.unreliable_prompts.push(prompt.prompt_id.clone());
                }
                result.global_records.push(global);
                if let Some(local) = local {
                    for r in &local.records {
                        if r.is_step_one() {
                            let index = r.scope.token_index().expect("local record");
                            result.sensitive_tokens.push(SensitiveToken {
                                prompt_id: prompt.prompt_id.clone(),
                                prompt: prompt.text.clone(),
                                token_index: index,
                                token: r.token.clone().unwrap_or_default(),
                            });
                        }
                    }
                    result.local_records.extend(local.records);
                    result.degenerate_tokens.extend(local.degenerate);
                    result.warnings.extend(local.warnings);
                }
            }
            PromptOutcome::Degenerate(issue) => result.degenerate.push(issue),
            PromptOutcome::Failed(issue) => result.failed.push(issue),
        }
    }

    result.global_distribution = DistributionOutcome::from_records(&result.global_records, config.grid_points);
    result.local_distribution = DistributionOutcome::from_records(&result.local_records, config.grid_points);
    for (name, d) in [
        ("global", &result.global_distribution),
        ("local", &result.local_distribution),
    ] {
        if let DistributionOutcome::Insufficient { reason, .. } = d {
            result.warnings.push(format!("{name} distribution omitted: {reason}"));
        }
    }
    info!(
        "cascade: {} prompts, {} unreliable, {} sensitive tokens, {} failed, {} degenerate",
        corpus.len(),
        result.unreliable_prompts.len(),
        result.sensitive_tokens.len(),
        result.failed.len(),
        result.degenerate.len()
    );
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ConstantBackend, SyntheticBackend, SyntheticModelSpec};

    fn prompt(id: &str, text: &str) -> Prompt {
        Prompt {
            prompt_id: id.into(),
            text: text.into(),
            injected_trigger: None,
        }
    }

    fn small_config() -> AuditConfig {
        AuditConfig {
            max_steps: 20,
            base_seed: 17,
            ..AuditConfig::default()
        }
    }

    #[test]
    fn constant_backend_is_always_censored() {
        let b = ConstantBackend::new(vec![1.0, 2.0, 3.0], 4);
        let cfg = AuditConfig {
            max_steps: 5,
            ..AuditConfig::default()
        };
        let r = sweep_prompt_global(&prompt("p", "a red car"), &cfg, &b).unwrap();
        assert!(r.censored);
        assert_eq!(r.step_index, 5);
        let sigma = perturb::sigma_global(&b.encode("a red car").unwrap());
        assert_eq!(r.phi, cfg.phi_max(sigma));
        assert_eq!(r.similarity_at_cross, 1.0);
    }

    #[test]
    fn tau_minus_one_never_crosses() {
        let b = SyntheticBackend::new(SyntheticModelSpec::benign(1)).unwrap();
        let cfg = AuditConfig {
            tau: -1.0,
            max_steps: 3,
            ..AuditConfig::default()
        };
        assert!(
            sweep_prompt_global(&prompt("p", "a dog running"), &cfg, &b)
                .unwrap()
                .censored
        );
    }

    #[test]
    fn trigger_prompt_crosses_at_step_one() {
        let b = SyntheticBackend::new(SyntheticModelSpec::biased(2, "drink")).unwrap();
        let cfg = small_config();
        let r = sweep_prompt_global(&prompt("p", "a man sitting at a table with a drink"), &cfg, &b).unwrap();
        assert!(r.is_step_one(), "{r:?}");
        let sigma = perturb::sigma_global(&b.encode("a man sitting at a table with a drink").unwrap());
        assert!((r.phi - cfg.delta_p * sigma).abs() < 1e-15);

        let local = sweep_prompt_local(&prompt("p", "a man sitting at a table with a drink"), &cfg, &b).unwrap();
        let trig = local
            .records
            .iter()
            .find(|r| r.token.as_deref() == Some("drink"))
            .unwrap();
        assert!(trig.is_step_one());
        for r in &local.records {
            assert!(r.step_index >= trig.step_index);
        }
    }

    #[test]
    fn crossing_step_is_reproducible_with_reduced_budget() {
        let b = SyntheticBackend::new(SyntheticModelSpec::benign(8)).unwrap();
        let cfg = small_config();
        let p = prompt("p7", "two children flying a kite in a park");
        let r = sweep_prompt_global(&p, &cfg, &b).unwrap();
        assert!(!r.censored, "{r:?}");
        let reduced = AuditConfig {
            max_steps: r.step_index,
            ..cfg
        };
        let again = sweep_prompt_global(&p, &reduced, &b).unwrap();
        assert_eq!(again, r);
    }

    #[test]
    fn single_token_prompt_has_one_local_record() {
        let b = SyntheticBackend::new(SyntheticModelSpec::benign(1)).unwrap();
        let local = sweep_prompt_local(&prompt("p", "umbrella"), &small_config(), &b).unwrap();
        assert_eq!(local.records.len(), 1);
        assert_eq!(local.records[0].scope, Scope::Local(1));
    }

    #[test]
    fn degenerate_rows_are_reported_not_fabricated() {
        // constant backend rows are 1..d, so a d = 1 encoder would be constant;
        // use a vocab entry with a constant embedding instead
        let spec = SyntheticModelSpec {
            vocab: vec![crate::backend::VocabEntry {
                token: "flat".into(),
                spread: None,
                embedding: Some(vec![0.5; 32]),
            }],
            ..SyntheticModelSpec::benign(1)
        };
        let b = SyntheticBackend::new(spec).unwrap();
        let local = sweep_prompt_local(&prompt("p", "a flat road"), &small_config(), &b).unwrap();
        assert_eq!(local.records.len(), 2);
        assert_eq!(local.degenerate.len(), 1);
        assert_eq!(local.degenerate[0].token, "flat");
    }

    #[test]
    fn empty_corpus_rejected_and_tiny_corpus_flagged() {
        let b = SyntheticBackend::new(SyntheticModelSpec::benign(1)).unwrap();
        let empty = PromptCorpus::from_prompts("e", vec![]).unwrap();
        assert!(run_cascade(&empty, &AuditConfig::default(), &b, 1).is_err());

        let one = PromptCorpus::from_prompts("o", vec![prompt("0", "a cat on a sofa")]).unwrap();
        let cfg = AuditConfig {
            max_steps: 1,
            ..AuditConfig::default()
        };
        let r = run_cascade(&one, &cfg, &b, 1).unwrap();
        assert!(r.global_distribution.distribution().is_none());
        assert!(r.local_distribution.distribution().is_none());
        assert_eq!(r.global_records.len() + r.failed.len() + r.degenerate.len(), 1);
        assert!(r.warnings.iter().any(|w| w.contains("global distribution omitted")));
    }

    struct Flaky {
        inner: SyntheticBackend,
        fail_prompt: &'static str,
    }

    impl Backend for Flaky {
        fn info(&self) -> Result<crate::backend::BackendInfo, BackendError> {
            self.inner.info()
        }
        fn encode(&self, prompt: &str) -> Result<EmbeddingMatrix, BackendError> {
            if prompt == self.fail_prompt {
                return Err(BackendError::Transport {
                    endpoint: "test".into(),
                    detail: "boom".into(),
                });
            }
            self.inner.encode(prompt)
        }
        fn generate(&self, req: &GenerationRequest) -> Result<crate::backend::Generation, BackendError> {
            self.inner.generate(req)
        }
    }

    #[test]
    fn failures_are_accounted_not_skipped() {
        let b = Flaky {
            inner: SyntheticBackend::new(SyntheticModelSpec::benign(1)).unwrap(),
            fail_prompt: "a broken prompt",
        };
        let corpus = PromptCorpus::from_prompts(
            "c",
            vec![
                prompt("0", "a cat on a sofa"),
                prompt("1", "a broken prompt"),
                prompt("2", "a bus on a street"),
            ],
        )
        .unwrap();
        let r = run_cascade(&corpus, &small_config(), &b, 2).unwrap();
        assert_eq!(r.failed.len(), 1);
        assert_eq!(r.failed[0].prompt_id, "1");
        assert_eq!(r.global_records.len() + r.failed.len() + r.degenerate.len(), 3);
        assert!(r.has_failures());
    }
}
