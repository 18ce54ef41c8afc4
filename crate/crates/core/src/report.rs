//! Report artifacts: JSONL records, CSV tables, summaries and the run
//! manifest.
//!
//! Everything is rendered to strings first and written by a single
//! [`ArtifactWriter`], which hashes each file for the manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audit::{OntologyRow, TriggerCandidate};
use crate::backend::BackendInfo;
use crate::config::AuditConfig;
use crate::error::{Error, Result};
use crate::ingest::sha256_hex;
use crate::metrics::{compare_modal, DistributionShift, ModalSummary};
use crate::sweep::{CascadeResult, DistributionOutcome};
use crate::types::SensitivityRecord;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// One JSON object per line, in the given order.
pub fn records_jsonl(records: &[SensitivityRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn candidates_csv(candidates: &[TriggerCandidate]) -> String {
    let mut out = String::from("token,diversity,fairness,rank_by_diversity,rank_by_fairness,prompt_count\n");
    for c in candidates {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            csv_field(&c.token),
            c.diversity,
            c.fairness,
            c.rank_by_diversity,
            c.rank_by_fairness,
            c.source_prompts.len()
        );
    }
    out
}

pub fn ontology_csv(rows: &[OntologyRow]) -> String {
    let mut out = String::from("concept,depth,diversity,delta_d\n");
    for r in rows {
        let delta = r.delta_d.map(|d| d.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", csv_field(&r.concept), r.depth, r.diversity, delta);
    }
    out
}

/// Quotes a field when it contains a delimiter, quote or line break.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// File-name-safe rendering of a token, e.g. for per-token heatmap CSVs.
pub fn token_file_stem(token: &str) -> String {
    let readable: String = token
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("{readable}-{}", &sha256_hex(token.as_bytes())[..8])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    /// `estimated` or `insufficient`.
    pub status: String,
    pub phi_mo: Option<f64>,
    pub mode: Option<f64>,
    pub bandwidth: Option<f64>,
    pub sample_count: usize,
    pub censored_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl PhaseSummary {
    pub fn from_outcome(o: &DistributionOutcome) -> Self {
        match o {
            DistributionOutcome::Estimated(d) => Self {
                status: "estimated".into(),
                phi_mo: Some(d.phi_mo),
                mode: Some(d.mode),
                bandwidth: Some(d.bandwidth),
                sample_count: d.samples.len(),
                censored_count: d.censored_count,
                reason: None,
            },
            DistributionOutcome::Insufficient {
                sample_count,
                censored_count,
                reason,
            } => Self {
                status: "insufficient".into(),
                phi_mo: None,
                mode: None,
                bandwidth: None,
                sample_count: *sample_count,
                censored_count: *censored_count,
                reason: Some(reason.clone()),
            },
        }
    }

    pub fn modal(&self) -> Option<ModalSummary> {
        Some(ModalSummary {
            phi_mo: self.phi_mo?,
            mode: self.mode?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilitySummary {
    pub model_id: String,
    pub prompt_count: usize,
    pub global: PhaseSummary,
    pub local: PhaseSummary,
    pub unreliable_prompts: usize,
    pub sensitive_tokens: usize,
    pub failed: usize,
    pub degenerate: usize,
    pub degenerate_tokens: usize,
    pub warnings: Vec<String>,
    pub config: AuditConfig,
}

impl ReliabilitySummary {
    pub fn new(cascade: &CascadeResult, model_id: &str, prompt_count: usize, config: &AuditConfig) -> Self {
        Self {
            model_id: model_id.to_string(),
            prompt_count,
            global: PhaseSummary::from_outcome(&cascade.global_distribution),
            local: PhaseSummary::from_outcome(&cascade.local_distribution),
            unreliable_prompts: cascade.unreliable_prompts.len(),
            sensitive_tokens: cascade.sensitive_tokens.len(),
            failed: cascade.failed.len(),
            degenerate: cascade.degenerate.len(),
            degenerate_tokens: cascade.degenerate_tokens.len(),
            warnings: cascade.warnings.clone(),
            config: config.clone(),
        }
    }

    pub fn phase(&self, name: &str) -> Result<&PhaseSummary> {
        match name {
            "global" => Ok(&self.global),
            "local" => Ok(&self.local),
            other => Err(Error::Invalid(format!(
                "unknown phase {other:?} (expected global or local)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseComparison {
    pub phase: String,
    pub a: ModalSummary,
    pub b: ModalSummary,
    #[serde(flatten)]
    pub shift: DistributionShift,
}

/// Compares the same phase of two summaries; `b` is the model under suspicion.
pub fn compare_summaries(a: &ReliabilitySummary, b: &ReliabilitySummary, phase: &str) -> Result<PhaseComparison> {
    let get = |s: &ReliabilitySummary, which: &str| {
        s.phase(phase)?
            .modal()
            .ok_or_else(|| Error::Insufficient(format!("{which} has no {phase} distribution to compare")))
    };
    let (ma, mb) = (get(a, "a")?, get(b, "b")?);
    Ok(PhaseComparison {
        phase: phase.to_string(),
        a: ma,
        b: mb,
        shift: compare_modal(&ma, &mb),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub tool_version: String,
    pub config: AuditConfig,
    pub backend: Option<BackendInfo>,
    pub backend_hash: Option<String>,
    pub corpus_hash: Option<String>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    /// The run id hashes the inputs, so identical inputs share an id.
    pub fn new(command: &str, config: &AuditConfig, backend: Option<BackendInfo>, corpus_hash: Option<String>) -> Self {
        let backend_hash = backend
            .as_ref()
            .map(|b| sha256_hex(serde_json::to_string(b).expect("info serializes").as_bytes()));
        let id_input = format!(
            "{command}\n{}\n{}\n{}",
            serde_json::to_string(config).expect("config serializes"),
            backend_hash.as_deref().unwrap_or(""),
            corpus_hash.as_deref().unwrap_or("")
        );
        Self {
            run_id: sha256_hex(id_input.as_bytes())[..16].to_string(),
            command: command.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            config: config.clone(),
            backend,
            backend_hash,
            corpus_hash,
            timings: BTreeMap::new(),
            counts: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    }
}

/// Writes artifacts under one directory and remembers their hashes.
pub struct ArtifactWriter {
    dir: PathBuf,
    artifacts: Vec<Artifact>,
}

impl ArtifactWriter {
    pub fn create(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            artifacts: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes `rel` (relative to the output directory) and returns its full path.
    pub fn write(&mut self, rel: &str, contents: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.artifacts.retain(|a| a.path != rel);
        self.artifacts.push(Artifact {
            path: rel.to_string(),
            sha256: sha256_hex(contents),
            bytes: contents.len(),
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    /// Lists every artifact in the manifest and writes it as `manifest.json`.
    pub fn finish(self, mut manifest: RunManifest) -> Result<RunManifest> {
        manifest.artifacts = self.artifacts;
        manifest.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        let path = self.dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Scope;

    #[test]
    fn jsonl_one_object_per_line() {
        let r = SensitivityRecord {
            prompt_id: "p".into(),
            scope: Scope::Local(2),
            token: Some("dog".into()),
            phi: 0.25,
            step_index: 3,
            censored: false,
            similarity_at_cross: 0.8,
        };
        let s = records_jsonl(&[r.clone(), r]);
        assert_eq!(s.lines().count(), 2);
        assert!(s.starts_with(r#"{"prompt_id":"p","scope":{"local":2}"#));
    }

    #[test]
    fn csv_quoting_and_stems() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
        assert_eq!(csv_field("plain"), "plain");
        assert!(token_file_stem("ô").starts_with("_-"));
        assert_ne!(token_file_stem("ô"), token_file_stem("é"));
    }

    #[test]
    fn ontology_csv_blank_root_delta() {
        let rows = [
            OntologyRow {
                concept: "animal".into(),
                depth: 0,
                parent: None,
                diversity: 0.5,
                delta_d: None,
            },
            OntologyRow {
                concept: "bear".into(),
                depth: 1,
                parent: Some("animal".into()),
                diversity: 0.25,
                delta_d: Some(0.25),
            },
        ];
        assert_eq!(
            ontology_csv(&rows),
            "concept,depth,diversity,delta_d\nanimal,0,0.5,\nbear,1,0.25,0.25\n"
        );
    }

    #[test]
    fn writer_hashes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = ArtifactWriter::create(dir.path().join("out")).unwrap();
        w.write("a/b.txt", b"one\ntwo\n").unwrap();
        w.write("a/b.txt", b"one\ntwo\n").unwrap();
        let m = w
            .finish(RunManifest::new("test", &AuditConfig::default(), None, None))
            .unwrap();
        assert_eq!(m.artifacts.len(), 1);
        assert_eq!(
            m.artifacts[0].sha256,
            "c3f9c8c283a2b1f2f1896f27a01cbe3cddc0c9d93f752e4639035a0f5b36f6e8"
        );
        assert!(dir.path().join("out/manifest.json").exists());
    }

    #[test]
    fn self_comparison_is_zero() {
        let phase = PhaseSummary {
            status: "estimated".into(),
            phi_mo: Some(0.1),
            mode: Some(4.0),
            bandwidth: Some(0.01),
            sample_count: 5,
            censored_count: 0,
            reason: None,
        };
        let s = ReliabilitySummary {
            model_id: "m".into(),
            prompt_count: 5,
            global: phase.clone(),
            local: phase,
            unreliable_prompts: 0,
            sensitive_tokens: 0,
            failed: 0,
            degenerate: 0,
            degenerate_tokens: 0,
            warnings: vec![],
            config: AuditConfig::default(),
        };
        let c = compare_summaries(&s, &s, "local").unwrap();
        assert_eq!(c.shift.delta_phi_mo, 0.0);
        assert!(!c.shift.left_shifted);
        assert!(compare_summaries(&s, &s, "both").is_err());
    }
}
