use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "audit",
    version,
    about = "Grey-box reliability, diversity and fairness audits for text-to-image models"
)]
pub struct Cli {
    /// Log filter, e.g. `info` or `t2i_audit=debug`.
    #[arg(long, global = true, default_value = "warn", env = "AUDIT_LOG")]
    pub log_level: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Global and local reliability sweeps over a prompt corpus.
    Reliability(ReliabilityArgs),
    /// Generative diversity of single-token prompts.
    Diversity(DiversityArgs),
    /// Leave-one-out generative fairness of the tokens of one prompt.
    Fairness(FairnessArgs),
    /// Cascade plus dual-ranked trigger retrieval, scored against ground truth when present.
    Retrieve(RetrieveArgs),
    /// Diversity of every concept in an ontology tree.
    Ontology(OntologyArgs),
    /// Compare the modal values of two reliability summaries.
    Compare(CompareArgs),
    /// Host a synthetic model behind the wire protocol.
    ServeSynthetic(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    /// URL of a wire-protocol model server.
    #[arg(long, env = "AUDIT_BACKEND_URL")]
    pub backend: Option<String>,

    /// Run an in-process synthetic model from this spec file; takes
    /// precedence over `--backend`.
    #[arg(long)]
    pub synthetic: Option<PathBuf>,

    /// Per-request timeout for remote backends, in seconds.
    #[arg(long, default_value_t = 120)]
    pub timeout: u64,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Audit configuration JSON; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,

    #[command(flatten)]
    pub backend: BackendArgs,

    /// Output directory.
    #[arg(long, default_value = "audit-out")]
    pub out: PathBuf,

    /// Worker-pool width.
    #[arg(long, default_value_t = 4)]
    pub parallel: usize,

    /// Overrides `base_seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Overrides the generation step count `steps_t`.
    #[arg(long)]
    pub steps: Option<u32>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Lines,
    CaptionJson,
}

#[derive(Debug, Clone, Args)]
pub struct CorpusArgs {
    /// Prompt corpus: text (one prompt per line) or caption JSON.
    #[arg(long)]
    pub corpus: PathBuf,

    /// Corpus format; inferred from the extension when omitted.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,

    /// Inject this trigger into `trigger_rate` of the prompts before auditing.
    #[arg(long)]
    pub inject: Option<String>,

    /// Trigger placement: append, prepend, or substitute:from=to[,from=to...].
    #[arg(long, default_value = "append")]
    pub placement: String,
}

#[derive(Debug, Args)]
pub struct ReliabilityArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub corpus: CorpusArgs,
}

#[derive(Debug, Args)]
pub struct DiversityArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Token (prompt) to evaluate; repeat for several.
    #[arg(long = "token", required = true)]
    pub tokens: Vec<String>,
}

#[derive(Debug, Args)]
pub struct FairnessArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    #[arg(long)]
    pub prompt: String,

    /// Row index of the token to remove; every non-special token when omitted.
    #[arg(long)]
    pub token_index: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub corpus: CorpusArgs,

    /// Cut-off for recall@k against the corpus ground truth.
    #[arg(long, default_value_t = 1)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct OntologyArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Ontology tree JSON: {"concept", "children": [...]}.
    #[arg(long)]
    pub tree: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PhaseArg {
    Global,
    Local,
    Both,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Reference summary (e.g. a benign model).
    pub a: PathBuf,
    /// Summary under suspicion.
    pub b: PathBuf,

    #[arg(long, value_enum, default_value = "both")]
    pub phase: PhaseArg,

    /// Also write the comparison to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Synthetic model spec JSON.
    #[arg(long)]
    pub synthetic: PathBuf,

    /// Address to bind; port 0 picks a free port.
    #[arg(long, default_value = "127.0.0.1:8787")]
    pub addr: String,

    #[arg(long, default_value_t = 4)]
    pub workers: usize,
}
