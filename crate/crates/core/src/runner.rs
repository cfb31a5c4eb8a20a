//! Operational shell: dataset ingestion and split manifests, and the
//! synthetic end-to-end harness behind `simulate`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{emit_report, EvalError};
use crate::gateway::{AgentSpec, FixtureEntry};
use crate::model::{canonical_form, AgentPrediction, Clock, ConfigError, ExperimentConfig, FixedClock, LabelSet, RunPolicy, Sample, Stage};
use crate::orchestrator::{Orchestrator, OrchestratorError, RunSummary};
use crate::runlog::{write_truth, RunLog, RUN_LOG_FILE};
use crate::trust::{build_trust_profile, profiles_csv, score_predictions, TrustConfig, TrustError};
use crate::vector_store::{normalize, write_embedding_dir, EmbeddingRecord, VectorError, VectorIndex};

pub const MANIFEST_FILE: &str = "manifest.json";

const IMAGE_EXTENSIONS: [&str; 8] = ["png", "jpg", "jpeg", "bmp", "gif", "tif", "tiff", "webp"];

#[derive(Debug, Error)]
pub enum RunError {
    #[error("directory `{0}` does not name a configured label")]
    UnknownLabelDir(String),
    #[error("class `{0}` has no images")]
    EmptyClass(String),
    #[error("bad split ratios: {0}")]
    BadRatios(String),
    #[error("bad agent spec `{spec}`: {reason}")]
    BadAgentSpec { spec: String, reason: String },
    #[error("bad simulation parameters: {0}")]
    BadSimulation(String),
    #[error("cannot read {path}: {reason}")]
    BadInput { path: String, reason: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Trust(#[from] TrustError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Relative split weights. Defaults to 64/16/20.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: u32,
    pub val: u32,
    pub test: u32,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 64, val: 16, test: 20 }
    }
}

impl SplitRatios {
    fn total(&self) -> u64 {
        self.train as u64 + self.val as u64 + self.test as u64
    }
}

/// Splits `n` items by largest remainder. Floors first, then the leftover
/// items go to the largest fractional parts; ties favour train, then val.
pub fn split_counts(n: usize, ratios: &SplitRatios) -> Result<[usize; 3], RunError> {
    let total = ratios.total();
    if total == 0 {
        return Err(RunError::BadRatios("all weights are zero".into()));
    }
    let weights = [ratios.train as u64, ratios.val as u64, ratios.test as u64];
    let n64 = n as u64;
    let mut counts = [0usize; 3];
    let mut rems = [0u64; 3];
    for i in 0..3 {
        counts[i] = (n64 * weights[i] / total) as usize;
        rems[i] = n64 * weights[i] % total;
    }
    let mut leftover = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    // stable sort keeps train before val before test on equal remainders
    order.sort_by(|&a, &b| rems[b].cmp(&rems[a]));
    for &i in order.iter() {
        if leftover == 0 {
            break;
        }
        if weights[i] > 0 {
            counts[i] += 1;
            leftover -= 1;
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub split: Split,
}

/// Settings an ingest ran with, kept alongside the result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSettings {
    pub root: PathBuf,
    pub labels: LabelSet,
    pub seed: u64,
    pub ratios: SplitRatios,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: IngestSettings,
    pub samples: Vec<ManifestEntry>,
    pub created_at: u64,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<(), RunError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let raw = fs::read_to_string(path)
            .map_err(|e| RunError::BadInput { path: path.display().to_string(), reason: e.to_string() })?;
        serde_json::from_str(&raw).map_err(|e| RunError::BadInput { path: path.display().to_string(), reason: e.to_string() })
    }

    /// Samples of one split, or all of them, in manifest order.
    pub fn samples(&self, split: Option<Split>) -> Vec<Sample> {
        self.samples
            .iter()
            .filter(|e| split.is_none_or(|s| s == e.split))
            .map(|e| Sample { image_id: e.image_id.clone(), image_ref: e.path.clone(), true_label: e.label.clone() })
            .collect()
    }

    pub fn split_sizes(&self) -> BTreeMap<Split, usize> {
        let mut out = BTreeMap::new();
        for e in &self.samples {
            *out.entry(e.split).or_insert(0) += 1;
        }
        out
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Every image under `root/<label>/`, grouped by label in label-set order
/// and sorted by id within a label. Image ids are `<dir>/<file name>`.
pub fn scan_labeled_dir(root: &Path, labels: &LabelSet) -> Result<Vec<Vec<Sample>>, RunError> {
    let mut groups: Vec<Vec<Sample>> = vec![Vec::new(); labels.len()];
    let entries = fs::read_dir(root)
        .map_err(|e| RunError::BadInput { path: root.display().to_string(), reason: e.to_string() })?;
    for entry in entries {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let dir_name = entry.file_name().to_string_lossy().into_owned();
        let label = canonical_form(&dir_name);
        let idx = labels.index_of(&label).ok_or_else(|| RunError::UnknownLabelDir(dir_name.clone()))?;
        for file in fs::read_dir(entry.path())? {
            let file = file?;
            let path = file.path();
            if file.file_type()?.is_file() && is_image(&path) {
                groups[idx].push(Sample {
                    image_id: format!("{dir_name}/{}", file.file_name().to_string_lossy()),
                    image_ref: path,
                    true_label: Some(label.clone()),
                });
            }
        }
    }
    for (label, group) in labels.labels().iter().zip(groups.iter_mut()) {
        if group.is_empty() {
            return Err(RunError::EmptyClass(label.clone()));
        }
        group.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    }
    Ok(groups)
}

/// Scans a labeled image tree and assigns a stratified split. The split is a
/// pure function of the seed and the sorted image ids.
pub fn ingest_dataset(
    root: &Path,
    labels: &LabelSet,
    seed: u64,
    ratios: SplitRatios,
    clock: &dyn Clock,
) -> Result<RunManifest, RunError> {
    let groups = scan_labeled_dir(root, labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for mut group in groups {
        group.shuffle(&mut rng);
        let [train, val, _] = split_counts(group.len(), &ratios)?;
        for (i, s) in group.into_iter().enumerate() {
            let split = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            };
            samples.push(ManifestEntry { image_id: s.image_id, path: s.image_ref, label: s.true_label, split });
        }
    }
    samples.sort_by(|a, b| (a.split, &a.image_id).cmp(&(b.split, &b.image_id)));
    Ok(RunManifest {
        run_id: format!("ingest-s{seed}-n{}", samples.len()),
        config: IngestSettings { root: root.to_path_buf(), labels: labels.clone(), seed, ratios },
        samples,
        created_at: clock.now_ms(),
    })
}

/// Reads an experiment config from TOML (by extension) or JSON. A missing
/// required key is reported by name.
pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig, RunError> {
    let raw = fs::read_to_string(path)
        .map_err(|e| RunError::BadInput { path: path.display().to_string(), reason: e.to_string() })?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    let parsed = if is_toml {
        toml::from_str::<ExperimentConfig>(&raw).map_err(|e| e.message().to_string())
    } else {
        serde_json::from_str::<ExperimentConfig>(&raw).map_err(|e| e.to_string())
    };
    let config = parsed.map_err(|reason| match missing_field(&reason) {
        Some(key) => RunError::Config(ConfigError::MissingKey(key)),
        None => RunError::BadInput { path: path.display().to_string(), reason },
    })?;
    config.validate()?;
    Ok(config)
}

fn missing_field(message: &str) -> Option<String> {
    let rest = message.split("missing field `").nth(1)?;
    Some(rest.split('`').next()?.to_string())
}

/// Samples from either a labeled image tree or a saved [`RunManifest`]
/// (optionally restricted to one split).
pub fn resolve_samples(path: &Path, labels: &LabelSet, split: Option<Split>) -> Result<Vec<Sample>, RunError> {
    if path.is_dir() {
        Ok(scan_labeled_dir(path, labels)?.into_iter().flatten().collect())
    } else {
        Ok(RunManifest::load(path)?.samples(split))
    }
}

// ---------------------------------------------------------------------------
// simulation

/// Behaviour of one synthetic agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticAgent {
    pub agent_id: String,
    /// Probability of answering correctly.
    pub accuracy: f64,
    /// Constant reported confidence; `None` means calibrated around `accuracy`.
    pub fixed_confidence: Option<f64>,
}

/// Parses `calibrated:<p>` or `overconfident:<p>@<conf>`.
pub fn parse_agent_spec(spec: &str) -> Result<SyntheticAgent, RunError> {
    let bad = |reason: &str| RunError::BadAgentSpec { spec: spec.to_string(), reason: reason.to_string() };
    let (kind, rest) = spec.split_once(':').ok_or_else(|| bad("expected <kind>:<accuracy>"))?;
    let (p, conf) = match rest.split_once('@') {
        Some((p, c)) => (p, Some(c)),
        None => (rest, None),
    };
    let unit = |s: &str| -> Result<f64, RunError> {
        let v: f64 = s.trim().parse().map_err(|_| bad("not a number"))?;
        if (0.0..=1.0).contains(&v) {
            Ok(v)
        } else {
            Err(bad("values must lie in [0, 1]"))
        }
    };
    let accuracy = unit(p)?;
    let fixed_confidence = match (kind.trim(), conf) {
        ("calibrated", None) => None,
        ("calibrated", Some(_)) => return Err(bad("a calibrated agent takes no fixed confidence")),
        ("overconfident", Some(c)) => Some(unit(c)?),
        ("overconfident", None) => Some(0.95),
        _ => return Err(bad("kind must be `calibrated` or `overconfident`")),
    };
    Ok(SyntheticAgent { agent_id: kind.trim().to_string(), accuracy, fixed_confidence })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub agents: Vec<SyntheticAgent>,
    /// Images scored by both policies.
    pub n: usize,
    /// Labeled reference images backing the index and the trust profiles.
    pub reference_n: usize,
    pub seed: u64,
    pub dim: usize,
    pub k: usize,
    pub tau: f64,
    /// Standard deviation of the embedding noise relative to a unit prototype.
    pub noise: f64,
    pub labels: LabelSet,
}

impl SimulationConfig {
    pub fn new(agents: Vec<SyntheticAgent>, n: usize, seed: u64) -> Self {
        Self { agents, n, reference_n: n, seed, dim: 512, k: 5, tau: 0.7, noise: 1.2, labels: LabelSet::apple_leaf() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyResult {
    pub accuracy: f64,
    pub correct: usize,
    pub summary: RunSummary,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub seed: u64,
    pub n: usize,
    /// Initial-stage accuracy of each agent on the scored images.
    pub agents: BTreeMap<String, f64>,
    pub policies: BTreeMap<String, PolicyResult>,
}

impl SimulationSummary {
    pub fn best_agent_accuracy(&self) -> f64 {
        self.agents.values().copied().fold(0.0, f64::max)
    }

    pub fn partial_failure(&self) -> bool {
        self.policies.values().any(|p| p.summary.partial_failure())
    }
}

/// Timestamp every simulated prediction carries.
pub const SIM_EPOCH_MS: u64 = 1_700_000_000_000;

struct SynthImage {
    id: String,
    label: String,
    vector: Vec<f64>,
}

fn synth_images(
    prefix: &str,
    count: usize,
    labels: &LabelSet,
    prototypes: &[Vec<f64>],
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SynthImage>, RunError> {
    (0..count)
        .map(|i| {
            let c = i % labels.len();
            let raw: Vec<f64> = prototypes[c].iter().map(|x| x + noise.sample(rng)).collect();
            Ok(SynthImage { id: format!("{prefix}-{i:05}"), label: labels.labels()[c].clone(), vector: normalize(&raw)? })
        })
        .collect()
}

fn synth_answer(agent: &SyntheticAgent, truth: &str, labels: &LabelSet, rng: &mut ChaCha8Rng) -> (String, f64) {
    let correct = rng.random::<f64>() < agent.accuracy;
    let category = if correct {
        truth.to_string()
    } else {
        let others: Vec<&String> = labels.labels().iter().filter(|l| *l != truth).collect();
        others[rng.random_range(0..others.len())].clone()
    };
    let confidence = match agent.fixed_confidence {
        Some(c) => c,
        None => {
            let u: f64 = rng.random_range(0.0..0.05);
            let c = if correct { agent.accuracy + u } else { agent.accuracy - u };
            // four decimals, as a model would report
            (c.clamp(0.0, 1.0) * 1e4).round() / 1e4
        }
    };
    (category, confidence)
}

fn reply_json(category: &str, confidence: f64, justification: &str) -> String {
    serde_json::json!({"category": category, "justification": justification, "confidence": confidence}).to_string()
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), RunError> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row).expect("row serializes"));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Generates a synthetic labeled world, scripted agents with the requested
/// behaviour, a reference index and trust profiles, then runs both policies
/// under a fixed clock and writes a report bundle for each.
///
/// Layout under `out`: `fixtures/`, `index/`, `queries/`, `profiles.json`,
/// `reference_predictions.jsonl`, `confidence/`, `trust-rag/`, `summary.json`.
/// Paths inside the run configs are relative to `out`, so the whole tree is
/// relocatable and byte-identical across replays.
pub fn simulate(cfg: &SimulationConfig, out: &Path) -> Result<SimulationSummary, RunError> {
    if cfg.agents.is_empty() {
        return Err(RunError::BadSimulation("at least one agent is required".into()));
    }
    if cfg.n == 0 || cfg.reference_n == 0 {
        return Err(RunError::BadSimulation("n and reference_n must be positive".into()));
    }
    if cfg.dim == 0 || !(cfg.noise >= 0.0) {
        return Err(RunError::BadSimulation("dim must be positive and noise non-negative".into()));
    }
    let mut agents = cfg.agents.clone();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for a in agents.iter_mut() {
        let count = seen.entry(a.agent_id.clone()).or_insert(0);
        *count += 1;
        if *count > 1 {
            a.agent_id = format!("{}-{}", a.agent_id, count);
        }
    }
    let labels = &cfg.labels;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let noise = Normal::new(0.0, cfg.noise / (cfg.dim as f64).sqrt()).expect("valid normal");

    let prototypes = labels
        .labels()
        .iter()
        .map(|_| normalize(&(0..cfg.dim).map(|_| unit.sample(&mut rng)).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>, _>>()?;
    let reference = synth_images("ref", cfg.reference_n, labels, &prototypes, &noise, &mut rng)?;
    let scored = synth_images("img", cfg.n, labels, &prototypes, &noise, &mut rng)?;

    fs::create_dir_all(out.join("fixtures"))?;
    let trust_cfg = TrustConfig::default();
    let ref_truth: BTreeMap<String, String> = reference.iter().map(|r| (r.id.clone(), r.label.clone())).collect();
    let mut reference_log = Vec::new();
    let mut profiles = Vec::new();
    let mut agent_accuracy = BTreeMap::new();
    let mut specs = Vec::new();
    for agent in &agents {
        let mut ref_preds = Vec::new();
        for img in &reference {
            let (category, confidence) = synth_answer(agent, &img.label, labels, &mut rng);
            ref_preds.push(AgentPrediction {
                image_id: img.id.clone(),
                agent_id: agent.agent_id.clone(),
                stage: Stage::Initial,
                category,
                confidence,
                justification: String::new(),
                latency_ms: 0.0,
                cost_usd: 0.0,
                attempts: 1,
                ts: SIM_EPOCH_MS,
            });
        }
        let outcomes = score_predictions(&ref_preds, &ref_truth, Stage::Initial);
        profiles.push(build_trust_profile(&agent.agent_id, &outcomes, &trust_cfg, None)?);
        reference_log.extend(ref_preds);

        let mut fixtures = Vec::new();
        let mut correct = 0usize;
        for img in &scored {
            let (category, confidence) = synth_answer(agent, &img.label, labels, &mut rng);
            correct += usize::from(category == img.label);
            let latency: f64 = rng.random_range(300..3000) as f64;
            let mut first = FixtureEntry::single(
                &img.id,
                Stage::Initial,
                reply_json(&category, confidence, &format!("leaf shows signs consistent with {category}")),
            );
            first.latency_ms = Some(latency);
            let mut second = FixtureEntry::single(
                &img.id,
                Stage::Reeval,
                reply_json(&category, confidence, "reaffirmed after reviewing the retrieved exemplars"),
            );
            second.latency_ms = Some(latency);
            fixtures.push(first);
            fixtures.push(second);
        }
        agent_accuracy.insert(agent.agent_id.clone(), correct as f64 / cfg.n as f64);
        let rel = PathBuf::from("fixtures").join(format!("{}.jsonl", agent.agent_id));
        write_jsonl(&out.join(&rel), &fixtures)?;
        specs.push(AgentSpec::scripted(&agent.agent_id, rel));
    }
    write_jsonl(&out.join("reference_predictions.jsonl"), &reference_log)?;
    write_truth(&out.join("reference_truth.jsonl"), &ref_truth).map_err(|e| RunError::BadInput {
        path: out.display().to_string(),
        reason: e.to_string(),
    })?;
    fs::write(out.join("profiles.json"), serde_json::to_string_pretty(&profiles).expect("profiles serialize") + "\n")?;
    fs::write(out.join("trust_profiles.csv"), profiles_csv(&profiles))?;

    let index_records: Vec<EmbeddingRecord> = reference
        .iter()
        .map(|r| EmbeddingRecord { id: r.id.clone(), label: Some(r.label.clone()), vector: r.vector.clone(), meta: BTreeMap::new() })
        .collect();
    VectorIndex::build(index_records, cfg.dim)?.index.save(&out.join("index"))?;
    let query_records: Vec<EmbeddingRecord> = scored
        .iter()
        .map(|r| EmbeddingRecord { id: r.id.clone(), label: None, vector: r.vector.clone(), meta: BTreeMap::new() })
        .collect();
    write_embedding_dir(&out.join("queries"), &query_records)?;

    let samples: Vec<Sample> = scored
        .iter()
        .map(|r| Sample {
            image_id: r.id.clone(),
            image_ref: PathBuf::from("synthetic").join(format!("{}.png", r.id)),
            true_label: Some(r.label.clone()),
        })
        .collect();

    let mut summary = SimulationSummary { seed: cfg.seed, n: cfg.n, agents: agent_accuracy, policies: BTreeMap::new() };
    for policy in [RunPolicy::ConfidenceAware, RunPolicy::TrustAwareRag] {
        let mut config = ExperimentConfig::new(labels.clone(), specs.clone());
        config.policy = policy;
        config.k = cfg.k;
        config.tau = cfg.tau;
        config.seed = cfg.seed;
        if policy == RunPolicy::TrustAwareRag {
            config.index = Some("index".into());
            config.query_embeddings = Some("queries".into());
            config.profiles = Some("profiles.json".into());
        }
        let run_dir = out.join(policy.slug());
        if run_dir.exists() {
            fs::remove_dir_all(&run_dir)?;
        }
        let clock: Arc<dyn Clock> = Arc::new(FixedClock(SIM_EPOCH_MS));
        let orch = Orchestrator::from_config(config, out, clock)?;
        let run_summary = orch.run_experiment(&samples, &run_dir)?;
        emit_report(&run_dir)?;
        let log = RunLog::read(&run_dir.join(RUN_LOG_FILE)).map_err(OrchestratorError::from)?;
        let truth: BTreeMap<&str, &str> = scored.iter().map(|r| (r.id.as_str(), r.label.as_str())).collect();
        let correct = log.decisions.iter().filter(|d| truth.get(d.image_id.as_str()) == Some(&d.category.as_str())).count();
        summary.policies.insert(
            policy.slug().to_string(),
            PolicyResult { accuracy: correct as f64 / cfg.n as f64, correct, summary: run_summary },
        );
    }
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n")?;
    Ok(summary)
}
