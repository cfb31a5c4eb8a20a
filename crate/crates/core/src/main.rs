use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use trustorch::evaluation::{emit_report, EvalError};
use trustorch::model::{AgentPrediction, ConfigError, LabelSet, RunPolicy, Stage, SystemClock};
use trustorch::orchestrator::{Orchestrator, OrchestratorError};
use trustorch::runlog::{read_truth, LogRecord};
use trustorch::runner::{
    ingest_dataset, load_experiment_config, parse_agent_spec, resolve_samples, simulate, RunError, SimulationConfig,
    Split, SplitRatios, MANIFEST_FILE,
};
use trustorch::trust::{build_trust_profile, score_predictions, TrustConfig, PROFILE_CSV_HEADER};
use trustorch::vector_store::{
    format_votes, read_embedding_dir, weighted_vote, EmbeddingRecord, VectorError, VectorIndex,
};

const EXIT_USAGE: u8 = 2;
const EXIT_PARTIAL: u8 = 3;
const EXIT_FATAL: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "trustorch", version, about = "Trust-aware multi-agent image classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyArg {
    Confidence,
    TrustRag,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Val => Some(Split::Val),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Scan a labeled image tree and write a split manifest.
    Ingest {
        #[arg(long)]
        root: PathBuf,
        /// Comma-separated labels; defaults to the apple-leaf set.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; defaults to `<root>/manifest.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build an exact index from an embedding directory.
    BuildIndex {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank class votes for one query vector.
    Query {
        #[arg(long)]
        index: PathBuf,
        /// JSON array of numbers, or one embedding record.
        #[arg(long)]
        vector_file: PathBuf,
        #[arg(short = 'k', long, default_value_t = 5)]
        k: usize,
    },
    /// Build trust profiles from a labeled prediction log.
    ProfileTrust {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Second run with an equivalent prompt, for the consistency gap.
        #[arg(long)]
        rerun: Option<PathBuf>,
        /// Profile JSON output (an array, one entry per agent).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        ece_bins: usize,
        #[arg(long, default_value_t = 0.9)]
        ocr_threshold: f64,
    },
    /// Run an experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Labeled image tree or manifest file.
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        /// Manifest split to run.
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regenerate the report bundle of a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// End-to-end run with synthetic scripted agents.
    Simulate {
        /// e.g. `calibrated:0.9 overconfident:0.5@0.95`
        #[arg(long, num_args = 1.., required = true)]
        agents: Vec<String>,
        #[arg(long, default_value_t = 400)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        dim: usize,
        #[arg(short = 'k', long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0.7)]
        tau: f64,
    },
}

/// Failure reported as one JSON object on stderr.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
    key: Option<String>,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, kind: "usage", message: message.into(), key: None }
    }

    fn fatal(kind: &'static str, message: impl Into<String>) -> Self {
        Self { code: EXIT_FATAL, kind, message: message.into(), key: None }
    }

    fn emit(&self) -> ExitCode {
        let mut body = json!({"error": self.kind, "message": self.message, "exit_code": self.code});
        if let Some(key) = &self.key {
            body["key"] = json!(key);
        }
        eprintln!("{body}");
        ExitCode::from(self.code)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        let key = match &e {
            ConfigError::MissingKey(k) => Some(k.clone()),
            _ => None,
        };
        Self { code: EXIT_USAGE, kind: "config", message: e.to_string(), key }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(c) => c.into(),
            RunError::Orchestrator(o) => o.into(),
            RunError::Eval(ev) => ev.into(),
            RunError::BadAgentSpec { .. } | RunError::BadSimulation(_) | RunError::BadRatios(_) => {
                Failure::usage(e.to_string())
            }
            RunError::UnknownLabelDir(_) => Failure::fatal("unknown_label_dir", e.to_string()),
            RunError::EmptyClass(_) => Failure::fatal("empty_class", e.to_string()),
            other => Failure::fatal("fatal", other.to_string()),
        }
    }
}

impl From<OrchestratorError> for Failure {
    fn from(e: OrchestratorError) -> Self {
        match e {
            OrchestratorError::Config(c) => c.into(),
            OrchestratorError::IndexUnavailable => Failure::fatal("index_unavailable", e.to_string()),
            OrchestratorError::EmbeddingsUnavailable => Failure::fatal("embeddings_unavailable", e.to_string()),
            OrchestratorError::MissingProfile(_) => Failure::fatal("missing_profile", e.to_string()),
            other => Failure::fatal("fatal", other.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        let kind = match e {
            EvalError::MissingLog(_) => "missing_log",
            _ => "fatal",
        };
        Failure::fatal(kind, e.to_string())
    }
}

impl From<VectorError> for Failure {
    fn from(e: VectorError) -> Self {
        Failure::fatal("vector", e.to_string())
    }
}

fn bad_input(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::fatal("bad_input", format!("{}: {e}", path.display()))
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("output serializes"));
}

fn cmd_ingest(root: &Path, labels: &[String], seed: u64, out: Option<PathBuf>) -> Result<u8, Failure> {
    let labels = if labels.is_empty() {
        LabelSet::apple_leaf()
    } else {
        LabelSet::new(labels).map_err(|e| Failure::usage(e.to_string()))?
    };
    let manifest = ingest_dataset(root, &labels, seed, SplitRatios::default(), &SystemClock)?;
    let out = out.unwrap_or_else(|| root.join(MANIFEST_FILE));
    manifest.save(&out)?;
    let sizes: BTreeMap<String, usize> = manifest
        .split_sizes()
        .into_iter()
        .map(|(s, n)| (serde_json::to_value(s).unwrap().as_str().unwrap_or_default().to_string(), n))
        .collect();
    print_json(&json!({"manifest": out, "run_id": manifest.run_id, "splits": sizes}));
    Ok(0)
}

fn cmd_build_index(embeddings: &Path, out: &Path) -> Result<u8, Failure> {
    let (manifest, records) = read_embedding_dir(embeddings)?;
    if records.iter().any(|r| r.label.is_none()) {
        return Err(Failure::fatal("vector", "index records need labels"));
    }
    let report = VectorIndex::build(records, manifest.dim)?;
    for id in &report.renormalized {
        log::warn!("record {id} was renormalized");
    }
    report.index.save(out)?;
    print_json(&json!({"index": out, "count": report.index.len(), "dim": report.index.dim(), "renormalized": report.renormalized.len()}));
    Ok(0)
}

fn cmd_query(index: &Path, vector_file: &Path, k: usize) -> Result<u8, Failure> {
    let index = VectorIndex::load(index)?;
    let raw = fs::read_to_string(vector_file).map_err(|e| bad_input(vector_file, e))?;
    let value: Value = serde_json::from_str(&raw).map_err(|e| bad_input(vector_file, e))?;
    let vector: Vec<f64> = if value.is_array() {
        serde_json::from_value(value).map_err(|e| bad_input(vector_file, e))?
    } else {
        serde_json::from_value::<EmbeddingRecord>(value).map_err(|e| bad_input(vector_file, e))?.vector
    };
    let labels = index.label_set().ok_or_else(|| Failure::fatal("vector", "index needs at least two labels"))?;
    let hits = index.knn_query(&vector, k)?;
    let votes = weighted_vote(&hits, &labels)?;
    println!("{}", format_votes(&votes));
    Ok(0)
}

/// Reads predictions from JSONL holding either bare predictions or tagged
/// run-log records.
fn read_predictions(path: &Path) -> Result<Vec<AgentPrediction>, Failure> {
    let file = fs::File::open(path).map_err(|e| bad_input(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| bad_input(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |e: serde_json::Error| bad_input(path, format!("line {}: {e}", i + 1));
        let value: Value = serde_json::from_str(&line).map_err(at)?;
        if value.get("type").is_some() {
            if let LogRecord::Prediction(p) = serde_json::from_value(value).map_err(at)? {
                out.push(p);
            }
        } else {
            out.push(serde_json::from_value(value).map_err(at)?);
        }
    }
    Ok(out)
}

fn cmd_profile_trust(
    predictions: &Path,
    truth: &Path,
    rerun: Option<&Path>,
    out: Option<&Path>,
    cfg: TrustConfig,
) -> Result<u8, Failure> {
    let preds = read_predictions(predictions)?;
    let truth = read_truth(truth).map_err(|e| Failure::fatal("missing_log", e.to_string()))?;
    let rerun = rerun.map(read_predictions).transpose()?;
    let mut agents: Vec<String> = Vec::new();
    for p in &preds {
        if !agents.contains(&p.agent_id) {
            agents.push(p.agent_id.clone());
        }
    }
    if agents.is_empty() {
        return Err(Failure::fatal("empty_log", "no predictions"));
    }
    let mut profiles = Vec::new();
    for agent in &agents {
        let mine: Vec<&AgentPrediction> = preds.iter().filter(|p| &p.agent_id == agent).collect();
        let outcomes = score_predictions(mine.iter().copied(), &truth, Stage::Initial);
        let paired = rerun.as_ref().map(|second| {
            let second: BTreeMap<&str, &str> = second
                .iter()
                .filter(|p| &p.agent_id == agent && p.stage == Stage::Initial)
                .map(|p| (p.image_id.as_str(), p.category.as_str()))
                .collect();
            let pairs: Vec<(String, String)> = mine
                .iter()
                .filter(|p| p.stage == Stage::Initial)
                .filter_map(|p| second.get(p.image_id.as_str()).map(|c| (p.category.clone(), c.to_string())))
                .collect();
            pairs.into_iter().unzip::<_, _, Vec<String>, Vec<String>>()
        });
        let profile = build_trust_profile(
            agent,
            &outcomes,
            &cfg,
            paired.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice())),
        )
        .map_err(|e| Failure::fatal("trust", format!("agent {agent}: {e}")))?;
        profiles.push(profile);
    }
    if let Some(out) = out {
        fs::write(out, serde_json::to_string_pretty(&profiles).expect("profiles serialize") + "\n")
            .map_err(|e| bad_input(out, e))?;
    }
    println!("{PROFILE_CSV_HEADER}");
    for p in &profiles {
        println!("{}", p.csv_row());
    }
    Ok(0)
}

fn cmd_run(config: &Path, samples: &Path, policy: Option<PolicyArg>, split: SplitArg, out: &Path) -> Result<u8, Failure> {
    let mut cfg = load_experiment_config(config)?;
    if let Some(p) = policy {
        cfg.policy = match p {
            PolicyArg::Confidence => RunPolicy::ConfidenceAware,
            PolicyArg::TrustRag => RunPolicy::TrustAwareRag,
        };
    }
    let base = config.parent().map(Path::to_path_buf).unwrap_or_default();
    let samples = resolve_samples(samples, &cfg.labels, split.split())?;
    let orch = Orchestrator::from_config(cfg, &base, Arc::new(SystemClock))?;
    let summary = orch.run_experiment(&samples, out)?;
    emit_report(out)?;
    print_json(&summary);
    Ok(if summary.partial_failure() { EXIT_PARTIAL } else { 0 })
}

fn dispatch(command: Command) -> Result<u8, Failure> {
    match command {
        Command::Ingest { root, labels, seed, out } => cmd_ingest(&root, &labels, seed, out),
        Command::BuildIndex { embeddings, out } => cmd_build_index(&embeddings, &out),
        Command::Query { index, vector_file, k } => cmd_query(&index, &vector_file, k),
        Command::ProfileTrust { predictions, truth, rerun, out, ece_bins, ocr_threshold } => {
            if ece_bins == 0 || !(ocr_threshold > 0.0 && ocr_threshold < 1.0) {
                return Err(Failure::usage("ece_bins must be >= 1 and ocr_threshold in (0, 1)"));
            }
            cmd_profile_trust(&predictions, &truth, rerun.as_deref(), out.as_deref(), TrustConfig { ece_bins, ocr_threshold })
        }
        Command::Run { config, samples, policy, split, out } => cmd_run(&config, &samples, policy, split, &out),
        Command::Report { run } => {
            let bundle = emit_report(&run)?;
            print_json(&json!({"decided": bundle.decided, "undecided": bundle.undecided, "reeval_triggered": bundle.reeval_triggered}));
            Ok(0)
        }
        Command::Simulate { agents, n, seed, out, dim, k, tau } => {
            let agents = agents.iter().map(|a| parse_agent_spec(a)).collect::<Result<Vec<_>, _>>()?;
            let mut cfg = SimulationConfig::new(agents, n, seed);
            cfg.dim = dim;
            cfg.k = k;
            cfg.tau = tau;
            let summary = simulate(&cfg, &out)?;
            print_json(&summary);
            Ok(if summary.partial_failure() { EXIT_PARTIAL } else { 0 })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return Failure::usage(e.to_string().trim_end().to_string()).emit(),
    };
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => f.emit(),
    }
}
