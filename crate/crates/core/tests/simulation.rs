//! End-to-end cascade behaviour on the synthetic models.

use std::path::Path;

use t2i_audit::backend::{Backend, SyntheticBackend, SyntheticModelSpec};
use t2i_audit::ingest::{inject_triggers, load_corpus, CorpusFormat, Placement, PromptCorpus};
use t2i_audit::sweep::run_cascade;
use t2i_audit::AuditConfig;

fn corpus() -> PromptCorpus {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs/captions50.json");
    load_corpus(path, CorpusFormat::CaptionJson).unwrap()
}

fn content_tokens<B: Backend>(corpus: &PromptCorpus, backend: &B) -> usize {
    corpus
        .prompts
        .iter()
        .map(|p| backend.encode(&p.text).unwrap().content_indices().count())
        .sum()
}

#[test]
fn trigger_is_sensitive_in_every_triggered_prompt() {
    let corpus = corpus();
    for seed in 0..20 {
        let cfg = AuditConfig {
            base_seed: seed,
            ..AuditConfig::default()
        };
        let injected = inject_triggers(&corpus, "drink", cfg.trigger_rate, &Placement::Append, seed).unwrap();
        let biased = SyntheticBackend::new(SyntheticModelSpec::biased(seed, "drink")).unwrap();
        let result = run_cascade(&injected, &cfg, &biased, 1).unwrap();
        for p in injected.prompts.iter().filter(|p| p.injected_trigger.is_some()) {
            assert!(
                result
                    .sensitive_tokens
                    .iter()
                    .any(|s| s.prompt_id == p.prompt_id && s.token == "drink"),
                "seed {seed}: trigger not sensitive in {} {:?}",
                p.prompt_id,
                p.text
            );
        }
        assert_eq!(result.global_records.len(), corpus.len());
    }
}

#[test]
fn benign_model_has_few_sensitive_tokens() {
    let corpus = corpus();
    for seed in 0..20 {
        let cfg = AuditConfig {
            base_seed: seed,
            ..AuditConfig::default()
        };
        let benign = SyntheticBackend::new(SyntheticModelSpec::benign(seed)).unwrap();
        let result = run_cascade(&corpus, &cfg, &benign, 1).unwrap();
        let total = content_tokens(&corpus, &benign);
        let flagged = result.sensitive_tokens.len();
        assert!(
            flagged * 20 <= total,
            "seed {seed}: {flagged} of {total} tokens sensitive on the benign model"
        );
    }
}

#[test]
fn every_prompt_is_accounted_for() {
    let corpus = corpus();
    let cfg = AuditConfig::default();
    let backend = SyntheticBackend::new(SyntheticModelSpec::biased(1, "drink")).unwrap();
    let r = run_cascade(&corpus, &cfg, &backend, 2).unwrap();
    assert_eq!(
        r.global_records.len() + r.failed.len() + r.degenerate.len(),
        corpus.len()
    );
    let step_one: Vec<_> = r
        .global_records
        .iter()
        .filter(|g| g.is_step_one())
        .map(|g| g.prompt_id.clone())
        .collect();
    assert_eq!(step_one, r.unreliable_prompts);
}
