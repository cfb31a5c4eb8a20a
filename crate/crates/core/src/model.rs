//! Shared domain vocabulary: labels, samples, predictions, decisions,
//! experiment configuration and the injectable clock.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::AgentSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("empty label")]
    EmptyLabel,
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("a label set needs at least 2 labels, got {0}")]
    TooFewLabels(usize),
}

/// Canonical form of a label: trimmed, lowercase, runs of whitespace,
/// underscores and hyphens collapsed into a single hyphen.
pub fn canonical_form(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_sep = false;
    for ch in raw.trim().chars() {
        if ch.is_whitespace() || ch == '_' || ch == '-' {
            pending_sep = true;
            continue;
        }
        if pending_sep && !out.is_empty() {
            out.push('-');
        }
        pending_sep = false;
        out.extend(ch.to_lowercase());
    }
    out
}

/// Ordered set of class labels. Order governs confusion-matrix axes and
/// every label tie-break.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet {
    labels: Vec<String>,
}

impl LabelSet {
    pub fn new<I, S>(labels: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for raw in labels {
            let label = canonical_form(raw.as_ref());
            if label.is_empty() {
                return Err(ModelError::EmptyLabel);
            }
            if !seen.insert(label.clone()) {
                return Err(ModelError::DuplicateLabel(label));
            }
            out.push(label);
        }
        if out.len() < 2 {
            return Err(ModelError::TooFewLabels(out.len()));
        }
        Ok(Self { labels: out })
    }

    /// healthy, black-rot, rust, scab
    pub fn apple_leaf() -> Self {
        Self::new(["healthy", "black-rot", "rust", "scab"]).expect("static label set")
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index_of(label).is_some()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Rank used for tie-breaking. Labels outside the set sort after every
    /// member.
    pub fn rank(&self, label: &str) -> usize {
        self.index_of(label).unwrap_or(self.labels.len())
    }

    pub fn canonicalize(&self, raw: &str) -> Result<String, ModelError> {
        canonicalize_label(raw, self)
    }
}

impl TryFrom<Vec<String>> for LabelSet {
    type Error = ModelError;

    fn try_from(value: Vec<String>) -> Result<Self, Self::Error> {
        LabelSet::new(value)
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(value: LabelSet) -> Self {
        value.labels
    }
}

impl Default for LabelSet {
    fn default() -> Self {
        Self::apple_leaf()
    }
}

/// Maps free text onto the unique member of `labels` with the same canonical
/// form.
pub fn canonicalize_label(raw: &str, labels: &LabelSet) -> Result<String, ModelError> {
    let canonical = canonical_form(raw);
    if canonical.is_empty() {
        return Err(ModelError::EmptyLabel);
    }
    labels
        .labels
        .iter()
        .find(|l| **l == canonical)
        .cloned()
        .ok_or_else(|| ModelError::UnknownLabel(raw.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image_id: String,
    /// File path of the image. Only remote agents ever read it.
    pub image_ref: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_label: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Initial,
    Reeval,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Initial => f.write_str("initial"),
            Stage::Reeval => f.write_str("reeval"),
        }
    }
}

/// One agent's answer for one image at one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentPrediction {
    pub image_id: String,
    pub agent_id: String,
    pub stage: Stage,
    pub category: String,
    pub confidence: f64,
    pub justification: String,
    pub latency_ms: f64,
    #[serde(default)]
    pub cost_usd: f64,
    pub attempts: u32,
    /// Completion timestamp in milliseconds from the injected clock.
    pub ts: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    ConfidenceAware,
    TrustAwareRag,
    RuleFallback,
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::ConfidenceAware => f.write_str("confidence_aware"),
            Policy::TrustAwareRag => f.write_str("trust_aware_rag"),
            Policy::RuleFallback => f.write_str("rule_fallback"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PredictionRef {
    pub agent_id: String,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalDecision {
    pub image_id: String,
    pub category: String,
    pub confidence: f64,
    pub rationale: String,
    pub policy: Policy,
    pub reeval_triggered: bool,
    pub contributing: Vec<PredictionRef>,
}

/// Which arbitration pipeline an experiment runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunPolicy {
    #[default]
    #[serde(alias = "confidence")]
    ConfidenceAware,
    #[serde(alias = "trust-rag", alias = "trust_rag")]
    TrustAwareRag,
}

impl RunPolicy {
    pub fn slug(&self) -> &'static str {
        match self {
            RunPolicy::ConfidenceAware => "confidence",
            RunPolicy::TrustAwareRag => "trust-rag",
        }
    }
}

fn default_k() -> usize {
    5
}
fn default_tau() -> f64 {
    0.7
}
fn default_ocr_threshold() -> f64 {
    0.9
}
fn default_ece_bins() -> usize {
    10
}
fn default_retry_cap() -> u32 {
    3
}
fn default_parallelism() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub labels: LabelSet,
    pub agents: Vec<AgentSpec>,
    /// Remote text-only arbiter. Absent means the deterministic rule arbiter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orchestrator: Option<AgentSpec>,
    #[serde(default)]
    pub policy: RunPolicy,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_ocr_threshold")]
    pub ocr_threshold: f64,
    #[serde(default = "default_ece_bins")]
    pub ece_bins: usize,
    #[serde(default = "default_retry_cap")]
    pub retry_cap: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Directory holding a saved vector index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<PathBuf>,
    /// Directory of query embeddings keyed by image id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_embeddings: Option<PathBuf>,
    /// JSON file with an array of trust profiles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profiles: Option<PathBuf>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("k must be >= 1")]
    InvalidK,
    #[error("tau must lie in [0, 1], got {0}")]
    InvalidTau(f64),
    #[error("ocr_threshold must lie in (0, 1), got {0}")]
    InvalidOcrThreshold(f64),
    #[error("ece_bins must be >= 1")]
    InvalidBins,
    #[error("parallelism must be >= 1")]
    InvalidParallelism,
    #[error("at least one agent is required")]
    NoAgents,
    #[error("duplicate agent id `{0}`")]
    DuplicateAgent(String),
    #[error("agent `{agent}`: {reason}")]
    InvalidAgent { agent: String, reason: String },
    #[error("missing config key `{0}`")]
    MissingKey(String),
}

impl ExperimentConfig {
    pub fn new(labels: LabelSet, agents: Vec<AgentSpec>) -> Self {
        Self {
            labels,
            agents,
            orchestrator: None,
            policy: RunPolicy::default(),
            k: default_k(),
            tau: default_tau(),
            ocr_threshold: default_ocr_threshold(),
            ece_bins: default_ece_bins(),
            retry_cap: default_retry_cap(),
            seed: 0,
            parallelism: default_parallelism(),
            index: None,
            query_embeddings: None,
            profiles: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_params()?;
        if self.agents.is_empty() {
            return Err(ConfigError::NoAgents);
        }
        let mut ids = BTreeSet::new();
        for spec in self.agents.iter().chain(self.orchestrator.iter()) {
            if !ids.insert(spec.agent_id.as_str()) {
                return Err(ConfigError::DuplicateAgent(spec.agent_id.clone()));
            }
            spec.validate().map_err(|reason| ConfigError::InvalidAgent {
                agent: spec.agent_id.clone(),
                reason,
            })?;
        }
        Ok(())
    }

    /// Checks the numeric parameters only.
    pub fn validate_params(&self) -> Result<(), ConfigError> {
        if self.k < 1 {
            return Err(ConfigError::InvalidK);
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(ConfigError::InvalidTau(self.tau));
        }
        if !(self.ocr_threshold > 0.0 && self.ocr_threshold < 1.0) {
            return Err(ConfigError::InvalidOcrThreshold(self.ocr_threshold));
        }
        if self.ece_bins < 1 {
            return Err(ConfigError::InvalidBins);
        }
        if self.parallelism < 1 {
            return Err(ConfigError::InvalidParallelism);
        }
        Ok(())
    }

    /// Retry cap for one agent: the agent's own override, else the global one.
    pub fn retry_cap_for(&self, spec: &AgentSpec) -> u32 {
        spec.retry_cap.unwrap_or(self.retry_cap)
    }
}

/// Time source in milliseconds. Implementations must be monotonically
/// non-decreasing.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Frozen clock for replayable runs: always returns the same instant.
#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub u64);

impl Clock for FixedClock {
    fn now_ms(&self) -> u64 {
        self.0
    }
}

/// Clock advanced explicitly by the caller. Useful in tests that need
/// latency to be non-zero yet deterministic.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        Self(AtomicU64::new(start_ms))
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn canonicalize_examples() {
        let labels = LabelSet::apple_leaf();
        assert_eq!(canonicalize_label("Black Rot", &labels).unwrap(), "black-rot");
        assert_eq!(canonicalize_label("scab", &labels).unwrap(), "scab");
        assert_eq!(canonicalize_label("  black_rot ", &labels).unwrap(), "black-rot");
        assert_eq!(
            canonicalize_label("mildew", &labels),
            Err(ModelError::UnknownLabel("mildew".into()))
        );
    }

    #[test]
    fn label_set_rejects_bad_input() {
        assert_eq!(LabelSet::new(["a"]), Err(ModelError::TooFewLabels(1)));
        assert_eq!(
            LabelSet::new(["Black Rot", "black-rot"]),
            Err(ModelError::DuplicateLabel("black-rot".into()))
        );
        assert_eq!(LabelSet::new(["a", " "]), Err(ModelError::EmptyLabel));
    }

    #[test]
    fn label_set_serde_uses_plain_list() {
        let json = serde_json::to_string(&LabelSet::apple_leaf()).unwrap();
        assert_eq!(json, r#"["healthy","black-rot","rust","scab"]"#);
        let err = serde_json::from_str::<LabelSet>(r#"["a","a"]"#);
        assert!(err.is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"labels":["a","b"],"agents":[{"agent_id":"x","kind":"scripted","script_path":"x.jsonl"}]}"#,
        )
        .unwrap();
        assert_eq!(cfg.k, 5);
        assert_eq!(cfg.tau, 0.7);
        assert_eq!(cfg.ocr_threshold, 0.9);
        assert_eq!(cfg.ece_bins, 10);
        assert_eq!(cfg.retry_cap, 3);
        cfg.validate().unwrap();

        let mut bad = cfg.clone();
        bad.tau = 1.5;
        assert_eq!(bad.validate(), Err(ConfigError::InvalidTau(1.5)));
        let mut bad = cfg.clone();
        bad.ocr_threshold = 1.0;
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.k = 0;
        assert_eq!(bad.validate(), Err(ConfigError::InvalidK));
    }

    #[test]
    fn missing_config_key_is_named() {
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"labels":["a","b"]}"#).unwrap_err();
        assert!(err.to_string().contains("agents"), "{err}");
    }

    #[test]
    fn prediction_log_field_names() {
        let p = AgentPrediction {
            image_id: "img1".into(),
            agent_id: "gpt".into(),
            stage: Stage::Initial,
            category: "scab".into(),
            confidence: 0.9,
            justification: "spots".into(),
            latency_ms: 12.0,
            cost_usd: 0.0,
            attempts: 1,
            ts: 5,
        };
        let value = serde_json::to_value(&p).unwrap();
        let keys: BTreeSet<_> = value.as_object().unwrap().keys().cloned().collect();
        let want: BTreeSet<String> = [
            "image_id",
            "agent_id",
            "stage",
            "category",
            "confidence",
            "justification",
            "latency_ms",
            "cost_usd",
            "attempts",
            "ts",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        assert_eq!(keys, want);
        assert_eq!(value["stage"], "initial");
    }

    #[test]
    fn clocks() {
        let fixed = FixedClock(42);
        assert_eq!(fixed.now_ms(), fixed.now_ms());
        let manual = ManualClock::new(10);
        manual.advance(5);
        assert_eq!(manual.now_ms(), 15);
    }

    fn label_strategy() -> impl Strategy<Value = String> {
        prop::sample::select(vec!["healthy", "black-rot", "rust", "scab"]).prop_flat_map(|l| {
            (Just(l), any::<bool>(), any::<bool>(), 0..3usize).prop_map(|(l, upper, underscore, pad)| {
                let mut s = if upper { l.to_uppercase() } else { l.to_string() };
                if underscore {
                    s = s.replace('-', "_");
                }
                format!("{}{}{}", " ".repeat(pad), s, " ".repeat(pad))
            })
        })
    }

    proptest! {
        #[test]
        fn canonicalize_is_idempotent(raw in "[A-Za-z _-]{1,16}") {
            let labels = LabelSet::new(["black-rot", "scab", "a-b-c"]).unwrap();
            if let Ok(once) = canonicalize_label(&raw, &labels) {
                prop_assert_eq!(canonicalize_label(&once, &labels).unwrap(), once);
            }
        }

        #[test]
        fn label_variants_converge(raw in label_strategy()) {
            let labels = LabelSet::apple_leaf();
            let got = canonicalize_label(&raw, &labels).unwrap();
            prop_assert!(labels.contains(&got));
        }

        #[test]
        fn prediction_round_trips(
            conf in 0.0f64..=1.0,
            latency in 0.0f64..1e6,
            cost in 0.0f64..10.0,
            attempts in 1u32..5,
            text in "\\PC{0,40}",
            ts in any::<u64>(),
        ) {
            let p = AgentPrediction {
                image_id: "img-7".into(),
                agent_id: "qwen".into(),
                stage: Stage::Reeval,
                category: "rust".into(),
                confidence: conf,
                justification: text,
                latency_ms: latency,
                cost_usd: cost,
                attempts,
                ts,
            };
            let line = serde_json::to_string(&p).unwrap();
            let back: AgentPrediction = serde_json::from_str(&line).unwrap();
            prop_assert_eq!(back, p);
        }
    }
}
