use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{eval_diversity, eval_fairness};
use crate::backend::Backend;
use crate::config::AuditConfig;
use crate::error::Result;
use crate::metrics::SimilarityMatrix;
use crate::sweep::CascadeResult;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerCandidate {
    pub token: String,
    pub diversity: f64,
    pub fairness: f64,
    pub rank_by_diversity: usize,
    pub rank_by_fairness: usize,
    pub source_prompts: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalStatus {
    Ranked,
    EmptySensitiveSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub status: RetrievalStatus,
    /// Sorted by token.
    pub candidates: Vec<TriggerCandidate>,
    /// True when one candidate ranks first under both criteria and is
    /// separated from the runner-up on each (see `AuditConfig::evidence_ratio`).
    pub provenance_evidence: bool,
    pub note: String,
    #[serde(skip)]
    pub similarity: BTreeMap<String, SimilarityMatrix>,
}

impl RetrievalReport {
    pub fn by_diversity(&self) -> Vec<&TriggerCandidate> {
        let mut v: Vec<_> = self.candidates.iter().collect();
        v.sort_by_key(|c| c.rank_by_diversity);
        v
    }

    pub fn by_fairness(&self) -> Vec<&TriggerCandidate> {
        let mut v: Vec<_> = self.candidates.iter().collect();
        v.sort_by_key(|c| c.rank_by_fairness);
        v
    }
}

/// Ranks are positions 1..=n in ascending score order, ties broken by token.
fn assign_ranks(
    candidates: &mut [TriggerCandidate],
    score: fn(&TriggerCandidate) -> f64,
    set: fn(&mut TriggerCandidate, usize),
) {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        score(&candidates[a])
            .total_cmp(&score(&candidates[b]))
            .then_with(|| candidates[a].token.cmp(&candidates[b].token))
    });
    for (rank, i) in order.into_iter().enumerate() {
        set(&mut candidates[i], rank + 1);
    }
}

pub fn retrieve_triggers<B: Backend + ?Sized>(
    cascade: &CascadeResult,
    config: &AuditConfig,
    backend: &B,
) -> Result<RetrievalReport> {
    config.validate()?;
    // token -> (prompt_id, prompt text, token index) occurrences
    let mut groups: BTreeMap<&str, Vec<(&str, &str, usize)>> = BTreeMap::new();
    for s in &cascade.sensitive_tokens {
        groups
            .entry(s.token.as_str())
            .or_default()
            .push((s.prompt_id.as_str(), s.prompt.as_str(), s.token_index));
    }
    if groups.is_empty() {
        return Ok(RetrievalReport {
            status: RetrievalStatus::EmptySensitiveSet,
            candidates: Vec::new(),
            provenance_evidence: false,
            note: "no sensitive tokens; no provenance evidence".into(),
            similarity: BTreeMap::new(),
        });
    }
    let groups: Vec<_> = groups.into_iter().collect();
    let scored = groups
        .par_iter()
        .map(|(token, sources)| {
            let (matrix, d) = eval_diversity(token, config, backend)?;
            let fs = sources
                .iter()
                .map(|(_, prompt, index)| eval_fairness(prompt, *index, config, backend))
                .collect::<Result<Vec<f64>>>()?;
            let f = fs.iter().sum::<f64>() / fs.len() as f64;
            let mut ids: Vec<String> = sources.iter().map(|(id, _, _)| id.to_string()).collect();
            ids.dedup();
            Ok((
                TriggerCandidate {
                    token: token.to_string(),
                    diversity: d,
                    fairness: f,
                    rank_by_diversity: 0,
                    rank_by_fairness: 0,
                    source_prompts: ids,
                },
                matrix,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut similarity = BTreeMap::new();
    let mut candidates = Vec::with_capacity(scored.len());
    for (c, m) in scored {
        similarity.insert(c.token.clone(), m);
        candidates.push(c);
    }
    assign_ranks(&mut candidates, |c| c.diversity, |c, r| c.rank_by_diversity = r);
    assign_ranks(&mut candidates, |c| c.fairness, |c, r| c.rank_by_fairness = r);

    let dominant = dominant_candidate(&candidates, config.evidence_ratio);
    let note = match dominant {
        Some(c) => format!("{:?} ranks first by both diversity and fairness", c.token),
        None => "no candidate dominates both rankings; no provenance evidence".into(),
    };
    Ok(RetrievalReport {
        status: RetrievalStatus::Ranked,
        provenance_evidence: dominant.is_some(),
        candidates,
        note,
        similarity,
    })
}

/// Score at rank 1 is at most `ratio` times the score at rank 2.
fn separated(first: f64, second: f64, ratio: f64) -> bool {
    second > 0.0 && first <= ratio * second
}

fn dominant_candidate(candidates: &[TriggerCandidate], ratio: f64) -> Option<&TriggerCandidate> {
    let at = |rank: fn(&TriggerCandidate) -> usize, r: usize| candidates.iter().find(|c| rank(c) == r);
    let top = candidates
        .iter()
        .find(|c| c.rank_by_diversity == 1 && c.rank_by_fairness == 1)?;
    let next_d = at(|c| c.rank_by_diversity, 2)?;
    let next_f = at(|c| c.rank_by_fairness, 2)?;
    (separated(top.diversity, next_d.diversity, ratio) && separated(top.fairness, next_f.fairness, ratio))
        .then_some(top)
}

/// Fraction of `truth` (compared case-insensitively) found among the first
/// `k` candidates of `ranked`; `None` when there is no ground truth.
pub fn recall_at_k(ranked: &[&TriggerCandidate], truth: &[String], k: usize) -> Option<f64> {
    if truth.is_empty() {
        return None;
    }
    let top: Vec<String> = ranked.iter().take(k).map(|c| c.token.to_lowercase()).collect();
    let hits = truth.iter().filter(|t| top.contains(&t.to_lowercase())).count();
    Some(hits as f64 / truth.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ConstantBackend;
    use crate::sweep::{DistributionOutcome, SensitiveToken};

    fn cascade(tokens: Vec<SensitiveToken>) -> CascadeResult {
        let none = || DistributionOutcome::Insufficient {
            sample_count: 0,
            censored_count: 0,
            reason: String::new(),
        };
        CascadeResult {
            global_records: vec![],
            global_distribution: none(),
            unreliable_prompts: vec![],
            local_records: vec![],
            local_distribution: none(),
            sensitive_tokens: tokens,
            failed: vec![],
            degenerate: vec![],
            degenerate_tokens: vec![],
            warnings: vec![],
        }
    }

    fn cand(token: &str, d: f64, f: f64) -> TriggerCandidate {
        TriggerCandidate {
            token: token.into(),
            diversity: d,
            fairness: f,
            rank_by_diversity: 0,
            rank_by_fairness: 0,
            source_prompts: vec![],
        }
    }

    #[test]
    fn empty_set_has_explicit_status() {
        let r = retrieve_triggers(
            &cascade(vec![]),
            &AuditConfig::default(),
            &ConstantBackend::new(vec![1.0], 2),
        )
        .unwrap();
        assert_eq!(r.status, RetrievalStatus::EmptySensitiveSet);
        assert!(r.candidates.is_empty());
        assert!(r.note.contains("no provenance evidence"));
    }

    #[test]
    fn ties_break_lexicographically() {
        let mut cs = vec![cand("b", 0.1, 2.0), cand("a", 0.1, 1.0), cand("c", 0.0, 1.0)];
        assign_ranks(&mut cs, |c| c.diversity, |c, r| c.rank_by_diversity = r);
        assign_ranks(&mut cs, |c| c.fairness, |c, r| c.rank_by_fairness = r);
        let d: Vec<_> = cs.iter().map(|c| c.rank_by_diversity).collect();
        let f: Vec<_> = cs.iter().map(|c| c.rank_by_fairness).collect();
        assert_eq!(d, [3, 2, 1]);
        assert_eq!(f, [3, 1, 2]);
    }

    #[test]
    fn duplicates_merge_and_constant_backend_ties() {
        let st = |id: &str, tok: &str, i| SensitiveToken {
            prompt_id: id.into(),
            prompt: format!("x {tok} y"),
            token_index: i,
            token: tok.into(),
        };
        let r = retrieve_triggers(
            &cascade(vec![st("1", "cat", 1), st("2", "cat", 1), st("2", "dog", 1)]),
            &AuditConfig::default(),
            &ConstantBackend::new(vec![1.0, 1.0], 2),
        )
        .unwrap();
        assert_eq!(r.candidates.len(), 2);
        assert_eq!(r.candidates[0].source_prompts, ["1", "2"]);
        // all scores tie, so "cat" wins both rankings lexicographically
        assert_eq!(r.candidates[0].rank_by_diversity, 1);
        assert_eq!(r.similarity.len(), 2);
    }

    #[test]
    fn dominance_needs_separation() {
        let rank = |mut cs: Vec<TriggerCandidate>| {
            assign_ranks(&mut cs, |c| c.diversity, |c, r| c.rank_by_diversity = r);
            assign_ranks(&mut cs, |c| c.fairness, |c, r| c.rank_by_fairness = r);
            cs
        };
        let clear = rank(vec![cand("t", 0.001, 0.1), cand("a", 0.2, 0.45), cand("b", 0.3, 0.5)]);
        assert_eq!(dominant_candidate(&clear, 0.5).unwrap().token, "t");
        let close = rank(vec![cand("t", 0.2, 1.2), cand("a", 0.25, 1.3)]);
        assert!(dominant_candidate(&close, 0.5).is_none());
        let split = rank(vec![cand("t", 0.001, 0.5), cand("a", 0.2, 0.1)]);
        assert!(dominant_candidate(&split, 0.5).is_none());
        let single = rank(vec![cand("t", 0.001, 0.1)]);
        assert!(dominant_candidate(&single, 0.5).is_none());
    }

    #[test]
    fn recall() {
        let a = cand("Drink", 0.0, 0.0);
        let b = cand("cup", 0.0, 0.0);
        assert_eq!(recall_at_k(&[&a, &b], &["drink".into()], 1), Some(1.0));
        assert_eq!(recall_at_k(&[&b, &a], &["drink".into()], 1), Some(0.0));
        assert_eq!(recall_at_k(&[&a], &[], 1), None);
    }
}
