use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use log::info;
use serde::Serialize;
use serde_json::json;

use t2i_audit::audit::{self, RetrievalReport};
use t2i_audit::backend::{server, Backend, RemoteBackend, RemoteOptions, SyntheticBackend, SyntheticModelSpec};
use t2i_audit::ingest::{self, CorpusFormat, Placement, PromptCorpus};
use t2i_audit::metrics::SimilarityMatrix;
use t2i_audit::report::{self, ArtifactWriter, ReliabilitySummary, RunManifest};
use t2i_audit::sweep::{self, CascadeResult, DistributionOutcome};
use t2i_audit::AuditConfig;

use crate::args::{
    BackendArgs, CommonArgs, CompareArgs, CorpusArgs, DiversityArgs, FairnessArgs, FormatArg, OntologyArgs, PhaseArg,
    ReliabilityArgs, RetrieveArgs, ServeArgs,
};
use crate::Outcome;

fn load_config(common: &CommonArgs) -> Result<AuditConfig> {
    let mut config = match &common.config {
        Some(path) => AuditConfig::load(path).with_context(|| format!("loading config {}", path.display()))?,
        None => AuditConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.base_seed = seed;
    }
    if let Some(steps) = common.steps {
        config.steps_t = steps;
    }
    config.validate().context("invalid configuration")?;
    Ok(config)
}

fn open_backend(args: &BackendArgs, parallel: usize) -> Result<Box<dyn Backend>> {
    match (&args.synthetic, &args.backend) {
        (Some(path), _) => Ok(Box::new(load_synthetic(path)?)),
        (None, Some(url)) => {
            let options = RemoteOptions {
                max_in_flight: parallel.max(1),
                timeout: Duration::from_secs(args.timeout),
                ..RemoteOptions::default()
            };
            Ok(Box::new(RemoteBackend::new(url.clone(), options)))
        }
        (None, None) => bail!("no backend: pass --backend URL, set AUDIT_BACKEND_URL, or pass --synthetic SPEC"),
    }
}

fn load_synthetic(path: &Path) -> Result<SyntheticBackend> {
    let spec = SyntheticModelSpec::load(path).with_context(|| format!("loading synthetic spec {}", path.display()))?;
    Ok(SyntheticBackend::new(spec)?)
}

fn load_corpus(args: &CorpusArgs, config: &AuditConfig) -> Result<PromptCorpus> {
    let format = match args.format {
        Some(FormatArg::Lines) => CorpusFormat::Lines,
        Some(FormatArg::CaptionJson) => CorpusFormat::CaptionJson,
        None => CorpusFormat::from_path(&args.corpus),
    };
    let corpus = ingest::load_corpus(&args.corpus, format)
        .with_context(|| format!("loading corpus {}", args.corpus.display()))?;
    match &args.inject {
        None => Ok(corpus),
        Some(trigger) => {
            let placement: Placement = args.placement.parse()?;
            let injected =
                ingest::inject_triggers(&corpus, trigger, config.trigger_rate, &placement, config.base_seed)?;
            info!("injected {trigger:?} into {} prompts", injected.injected_count());
            Ok(injected)
        }
    }
}

/// Hash of the prompts actually audited, so injected runs get their own run id.
fn corpus_hash(corpus: &PromptCorpus) -> String {
    if corpus.injected_count() > 0 {
        ingest::sha256_hex(corpus.to_caption_json().as_bytes())
    } else {
        corpus.source.content_hash.clone()
    }
}

/// Times each stage for the manifest.
#[derive(Default)]
struct Clock(BTreeMap<String, f64>);

impl Clock {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.0.insert(stage.to_string(), start.elapsed().as_secs_f64());
        out
    }
}

fn cascade_counts(cascade: &CascadeResult, corpus: &PromptCorpus) -> BTreeMap<String, usize> {
    BTreeMap::from([
        ("prompts".to_string(), corpus.len()),
        ("injected_prompts".to_string(), corpus.injected_count()),
        ("global_records".to_string(), cascade.global_records.len()),
        ("local_records".to_string(), cascade.local_records.len()),
        ("unreliable_prompts".to_string(), cascade.unreliable_prompts.len()),
        ("sensitive_tokens".to_string(), cascade.sensitive_tokens.len()),
        ("failed_prompts".to_string(), cascade.failed.len()),
        ("degenerate_prompts".to_string(), cascade.degenerate.len()),
    ])
}

/// Records, distributions, summary and issues shared by `reliability` and `retrieve`.
fn write_cascade(
    writer: &mut ArtifactWriter,
    cascade: &CascadeResult,
    corpus: &PromptCorpus,
    model_id: &str,
    config: &AuditConfig,
) -> Result<ReliabilitySummary> {
    if corpus.injected_count() > 0 {
        writer.write("corpus.json", corpus.to_caption_json().as_bytes())?;
    }
    let mut records = cascade.global_records.clone();
    records.extend(cascade.local_records.iter().cloned());
    writer.write("records.jsonl", report::records_jsonl(&records).as_bytes())?;
    for (name, outcome) in [
        ("global", &cascade.global_distribution),
        ("local", &cascade.local_distribution),
    ] {
        if let DistributionOutcome::Estimated(dist) = outcome {
            writer.write(&format!("distribution_{name}.csv"), dist.to_csv().as_bytes())?;
        }
    }
    let summary = ReliabilitySummary::new(cascade, model_id, corpus.len(), config);
    writer.write_json("summary.json", &summary)?;
    writer.write_json(
        "issues.json",
        &json!({
            "failed": cascade.failed,
            "degenerate": cascade.degenerate,
            "degenerate_tokens": cascade.degenerate_tokens,
            "warnings": cascade.warnings,
        }),
    )?;
    Ok(summary)
}

fn describe_phase(summary: &ReliabilitySummary, name: &str) -> String {
    match summary.phase(name) {
        Ok(p) => match p.modal() {
            Some(m) => format!(
                "{name}: phi_mo={:.6} mode={:.4} samples={} censored={}",
                m.phi_mo, m.mode, p.sample_count, p.censored_count
            ),
            None => format!(
                "{name}: no distribution ({})",
                p.reason.as_deref().unwrap_or("insufficient samples")
            ),
        },
        Err(e) => format!("{name}: {e}"),
    }
}

fn outcome_of(cascade: &CascadeResult) -> Outcome {
    for issue in &cascade.failed {
        eprintln!("warning: prompt {} failed: {}", issue.prompt_id, issue.detail);
    }
    if cascade.has_failures() {
        Outcome::Partial
    } else {
        Outcome::Success
    }
}

pub fn reliability(args: ReliabilityArgs) -> Result<Outcome> {
    let config = load_config(&args.common)?;
    let corpus = load_corpus(&args.corpus, &config)?;
    let backend = open_backend(&args.common.backend, args.common.parallel)?;
    let info = backend.info().context("querying backend info")?;

    let mut clock = Clock::default();
    let cascade = clock.time("cascade", || {
        sweep::run_cascade(&corpus, &config, &*backend, args.common.parallel)
    })?;

    let mut writer = ArtifactWriter::create(&args.common.out)?;
    let summary = write_cascade(&mut writer, &cascade, &corpus, &info.model_id, &config)?;
    let mut manifest = RunManifest::new("reliability", &config, Some(info), Some(corpus_hash(&corpus)));
    manifest.timings = clock.0;
    manifest.counts = cascade_counts(&cascade, &corpus);
    writer.finish(manifest)?;

    println!("{}", describe_phase(&summary, "global"));
    println!("{}", describe_phase(&summary, "local"));
    println!("unreliable prompts: {}", cascade.unreliable_prompts.len());
    Ok(outcome_of(&cascade))
}

#[derive(Serialize)]
struct DiversityRow {
    token: String,
    diversity: f64,
}

pub fn diversity(args: DiversityArgs) -> Result<Outcome> {
    let config = load_config(&args.common)?;
    let backend = open_backend(&args.common.backend, args.common.parallel)?;
    let info = backend.info().context("querying backend info")?;
    let pool = sweep::worker_pool(args.common.parallel)?;

    let mut clock = Clock::default();
    let results = clock.time("diversity", || {
        pool.install(|| {
            args.tokens
                .iter()
                .map(|t| audit::eval_diversity(t, &config, &*backend).map(|r| (t.clone(), r)))
                .collect::<t2i_audit::Result<Vec<(String, (SimilarityMatrix, f64))>>>()
        })
    })?;

    let mut writer = ArtifactWriter::create(&args.common.out)?;
    let mut csv = String::from("token,diversity\n");
    let mut rows = Vec::new();
    for (token, (matrix, d)) in &results {
        let _ = writeln!(csv, "{},{d}", report::csv_field(token));
        writer.write(
            &format!("similarity/{}.csv", report::token_file_stem(token)),
            matrix.to_csv().as_bytes(),
        )?;
        rows.push(DiversityRow {
            token: token.clone(),
            diversity: *d,
        });
        println!("{token}\t{d:.6}");
    }
    writer.write("diversity.csv", csv.as_bytes())?;
    writer.write_json("diversity.json", &rows)?;
    let mut manifest = RunManifest::new("diversity", &config, Some(info), None);
    manifest.timings = clock.0;
    manifest.counts = BTreeMap::from([("tokens".to_string(), rows.len())]);
    writer.finish(manifest)?;
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct FairnessRow {
    token_index: usize,
    token: String,
    fairness: f64,
}

pub fn fairness(args: FairnessArgs) -> Result<Outcome> {
    let config = load_config(&args.common)?;
    let backend = open_backend(&args.common.backend, args.common.parallel)?;
    let info = backend.info().context("querying backend info")?;
    let embedding = backend.encode(&args.prompt).context("encoding prompt")?;
    let indices: Vec<usize> = match args.token_index {
        Some(i) => {
            embedding.check_content_index(i)?;
            vec![i]
        }
        None => embedding.content_indices().collect(),
    };
    let pool = sweep::worker_pool(args.common.parallel)?;

    let mut clock = Clock::default();
    let rows = clock.time("fairness", || {
        pool.install(|| {
            indices
                .iter()
                .map(|&i| {
                    audit::eval_fairness(&args.prompt, i, &config, &*backend).map(|f| FairnessRow {
                        token_index: i,
                        token: embedding.tokens()[i].text.clone(),
                        fairness: f,
                    })
                })
                .collect::<t2i_audit::Result<Vec<_>>>()
        })
    })?;

    let mut writer = ArtifactWriter::create(&args.common.out)?;
    let mut csv = String::from("token_index,token,fairness\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{}", r.token_index, report::csv_field(&r.token), r.fairness);
        println!("{}\t{}\t{:.6}", r.token_index, r.token, r.fairness);
    }
    writer.write("fairness.csv", csv.as_bytes())?;
    writer.write_json("fairness.json", &json!({ "prompt": args.prompt, "tokens": rows }))?;
    let mut manifest = RunManifest::new("fairness", &config, Some(info), None);
    manifest.timings = clock.0;
    manifest.counts = BTreeMap::from([("tokens".to_string(), rows.len())]);
    writer.finish(manifest)?;
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct Recall {
    k: usize,
    ground_truth: Vec<String>,
    by_diversity: Option<f64>,
    by_fairness: Option<f64>,
}

pub fn retrieve(args: RetrieveArgs) -> Result<Outcome> {
    if args.k == 0 {
        bail!("--k must be at least 1");
    }
    let config = load_config(&args.common)?;
    let corpus = load_corpus(&args.corpus, &config)?;
    let backend = open_backend(&args.common.backend, args.common.parallel)?;
    let info = backend.info().context("querying backend info")?;

    let mut clock = Clock::default();
    let cascade = clock.time("cascade", || {
        sweep::run_cascade(&corpus, &config, &*backend, args.common.parallel)
    })?;
    let pool = sweep::worker_pool(args.common.parallel)?;
    let report: RetrievalReport = clock.time("retrieval", || {
        pool.install(|| audit::retrieve_triggers(&cascade, &config, &*backend))
    })?;

    let truth = corpus.ground_truth_triggers();
    let recall = Recall {
        k: args.k,
        by_diversity: audit::recall_at_k(&report.by_diversity(), &truth, args.k),
        by_fairness: audit::recall_at_k(&report.by_fairness(), &truth, args.k),
        ground_truth: truth,
    };

    let mut writer = ArtifactWriter::create(&args.common.out)?;
    write_cascade(&mut writer, &cascade, &corpus, &info.model_id, &config)?;
    writer.write("candidates.csv", report::candidates_csv(&report.candidates).as_bytes())?;
    for (token, matrix) in &report.similarity {
        writer.write(
            &format!("similarity/{}.csv", report::token_file_stem(token)),
            matrix.to_csv().as_bytes(),
        )?;
    }
    writer.write_json("retrieval.json", &json!({ "report": report, "recall": recall }))?;
    let mut manifest = RunManifest::new("retrieve", &config, Some(info), Some(corpus_hash(&corpus)));
    manifest.timings = clock.0;
    manifest.counts = cascade_counts(&cascade, &corpus);
    manifest
        .counts
        .insert("candidates".to_string(), report.candidates.len());
    writer.finish(manifest)?;

    for c in report.by_diversity().iter().take(5) {
        println!(
            "{}\tD={:.6}\tF={:.6}\trank_D={}\trank_F={}",
            c.token, c.diversity, c.fairness, c.rank_by_diversity, c.rank_by_fairness
        );
    }
    println!("{}", report.note);
    if let (Some(d), Some(f)) = (recall.by_diversity, recall.by_fairness) {
        println!("recall@{}: diversity={d} fairness={f}", args.k);
    }
    Ok(outcome_of(&cascade))
}

pub fn ontology(args: OntologyArgs) -> Result<Outcome> {
    let config = load_config(&args.common)?;
    let tree =
        ingest::load_ontology(&args.tree).with_context(|| format!("loading ontology {}", args.tree.display()))?;
    let backend = open_backend(&args.common.backend, args.common.parallel)?;
    let info = backend.info().context("querying backend info")?;
    let pool = sweep::worker_pool(args.common.parallel)?;

    let mut clock = Clock::default();
    let rows = clock.time("ontology", || {
        pool.install(|| audit::ontology_study(&tree, &config, &*backend))
    })?;

    let mut writer = ArtifactWriter::create(&args.common.out)?;
    writer.write("ontology.csv", report::ontology_csv(&rows).as_bytes())?;
    writer.write_json("ontology.json", &rows)?;
    let mut manifest = RunManifest::new("ontology", &config, Some(info), None);
    manifest.timings = clock.0;
    manifest.counts = BTreeMap::from([("concepts".to_string(), rows.len())]);
    writer.finish(manifest)?;

    for r in &rows {
        let delta = r.delta_d.map(|d| format!("{d:+.6}")).unwrap_or_else(|| "-".into());
        println!(
            "{}{}\tD={:.6}\tdelta={delta}",
            "  ".repeat(r.depth),
            r.concept,
            r.diversity
        );
    }
    Ok(Outcome::Success)
}

fn read_summary(path: &Path) -> Result<ReliabilitySummary> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing summary {}", path.display()))
}

pub fn compare(args: CompareArgs) -> Result<Outcome> {
    let a = read_summary(&args.a)?;
    let b = read_summary(&args.b)?;
    let (value, outcome) = match args.phase {
        PhaseArg::Global => (
            serde_json::to_value(report::compare_summaries(&a, &b, "global")?)?,
            Outcome::Success,
        ),
        PhaseArg::Local => (
            serde_json::to_value(report::compare_summaries(&a, &b, "local")?)?,
            Outcome::Success,
        ),
        PhaseArg::Both => {
            let mut out = serde_json::Map::new();
            let mut missing = 0;
            for phase in ["global", "local"] {
                let entry = match report::compare_summaries(&a, &b, phase) {
                    Ok(c) => serde_json::to_value(c)?,
                    Err(e) => {
                        missing += 1;
                        json!({ "phase": phase, "error": e.to_string() })
                    }
                };
                out.insert(phase.to_string(), entry);
            }
            match missing {
                0 => (out.into(), Outcome::Success),
                2 => bail!("neither phase can be compared: {}", serde_json::Value::from(out)),
                _ => (out.into(), Outcome::Partial),
            }
        }
    };
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    if let Some(path) = &args.out {
        std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    print!("{text}");
    Ok(outcome)
}

pub fn serve_synthetic(args: ServeArgs) -> Result<Outcome> {
    let backend = load_synthetic(&args.synthetic)?;
    let handle = server::serve(Arc::new(backend), &args.addr, args.workers)?;
    println!("{}", handle.url());
    std::io::stdout().flush()?;
    handle.join();
    Ok(Outcome::Success)
}
