//! Arbitration over agent outputs.
//!
//! Two pipelines share one engine:
//!
//! * confidence-aware: query every agent once, then arbitrate on the reported
//!   confidences;
//! * trust-aware with retrieval: query every agent, and if any agent's trust
//!   score falls below `tau`, fetch the nearest labeled exemplars, turn them
//!   into class votes, re-prompt each agent once with that evidence, then
//!   arbitrate with trust profiles and votes.
//!
//! Arbitration is done by a remote text-only model when one is configured,
//! and by [`rule_arbitrate`] otherwise or whenever the remote arbiter fails.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{
    build_agent, correction_message, invoke_with_retries, parse_agent_reply, parse_structured_reply,
    render_agent_prompt, render_reeval_prompt, Agent, AgentRequest, GatewayError, ImagePayload, KEY_JUSTIFICATION,
    KEY_RATIONALE,
};
use crate::model::{
    AgentPrediction, Clock, ConfigError, ExperimentConfig, FinalDecision, LabelSet, Policy, PredictionRef, RunPolicy,
    Sample, Stage,
};
use crate::runlog::{write_truth, LogError, LogRecord, RunLog, RunLogWriter, RUN_LOG_FILE, TRUTH_FILE};
use crate::trust::{trust_score, TrustProfile};
use crate::vector_store::{format_votes, weighted_vote, ClassVote, QueryEmbeddings, RetrievalHit, VectorError, VectorIndex};

/// Minimum top-vote confidence for retrieval evidence to override a
/// low-trust agent in [`rule_arbitrate`].
pub const VOTE_OVERRIDE_MIN: f64 = 0.5;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("no predictions to arbitrate")]
    NoPredictions,
    #[error("re-evaluation requires a vector index but none is configured")]
    IndexUnavailable,
    #[error("re-evaluation requires query embeddings but none are configured")]
    EmbeddingsUnavailable,
    #[error("trust-aware policy requires trust profiles for every agent; missing `{0}`")]
    MissingProfile(String),
    #[error("no samples to run")]
    NoSamples,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("cannot read {path}: {reason}")]
    BadInput { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrace {
    pub agent_id: String,
    pub initial: AgentPrediction,
    pub revised: Option<AgentPrediction>,
    pub changed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentFailure {
    pub agent_id: String,
    pub stage: Stage,
    pub kind: String,
    pub message: String,
}

/// Record of a call to the remote arbiter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArbiterCall {
    pub agent_id: String,
    pub prompt: String,
    pub image_attached: bool,
    pub attempts: Option<u32>,
    pub error: Option<String>,
}

/// Full account of one image's trip through the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReEvalTrace {
    pub image_id: String,
    pub triggered: bool,
    pub trust_scores: BTreeMap<String, f64>,
    pub tau_used: f64,
    pub votes: Vec<ClassVote>,
    pub exemplars: Vec<RetrievalHit>,
    pub agents: Vec<AgentTrace>,
    pub failures: Vec<AgentFailure>,
    pub arbiter: Option<ArbiterCall>,
    pub undecided: bool,
}

/// What the arbiter sees for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ArbitrationInput {
    pub image_id: String,
    /// Latest-stage prediction per agent.
    pub predictions: Vec<AgentPrediction>,
    /// Empty when arbitrating on confidence alone.
    pub profiles: BTreeMap<String, TrustProfile>,
    pub votes: Vec<ClassVote>,
    pub tau: f64,
}

/// Trust score per profile. A profile missing a required metric scores 0.
pub fn trust_scores(profiles: &BTreeMap<String, TrustProfile>) -> BTreeMap<String, f64> {
    profiles
        .iter()
        .map(|(id, p)| {
            let score = trust_score(p).unwrap_or_else(|e| {
                log::warn!("agent {id}: {e}; trust score taken as 0");
                0.0
            });
            (id.clone(), score)
        })
        .collect()
}

/// True iff some score is below `tau`.
pub fn should_reevaluate<'a>(scores: impl IntoIterator<Item = &'a f64>, tau: f64) -> bool {
    scores.into_iter().any(|&s| s < tau)
}

/// Text-only arbitration prompt. Never carries image content.
pub fn render_orchestrator_prompt(input: &ArbitrationInput, labels: &LabelSet) -> String {
    let scores = trust_scores(&input.profiles);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "You are the orchestrator of a team of image classification agents. You cannot see the image. \
         Decide the final category using the agents' answers, their confidence, and the evidence below."
    );
    let _ = writeln!(out);
    for p in &input.predictions {
        let _ = writeln!(out, "Agent {} ({} answer):", p.agent_id, p.stage);
        let _ = writeln!(out, "  category: {}", p.category);
        let _ = writeln!(out, "  confidence: {}", p.confidence);
        let _ = writeln!(out, "  justification: {}", p.justification);
        if let Some(profile) = input.profiles.get(&p.agent_id) {
            let f = |x: Option<f64>| x.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into());
            let _ = writeln!(
                out,
                "  trust profile: accuracy {:.3}, avg confidence {:.3}, ECE {}, OCR {}, CCC {}, CWA {}, trust score {:.3}",
                profile.accuracy,
                profile.avg_conf,
                f(profile.ece),
                f(profile.ocr),
                f(profile.ccc),
                f(profile.cwa),
                scores.get(&p.agent_id).copied().unwrap_or(0.0),
            );
        }
    }
    if !input.votes.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(out, "Similarity-weighted votes from retrieved reference images:");
        let _ = writeln!(out, "{}", format_votes(&input.votes));
    }
    let _ = writeln!(out);
    let _ = write!(
        out,
        "Allowed categories: {}.\nRespond with a single JSON object and nothing else:\n\
         {{\"category\": <one allowed category>, \"rationale\": <why>, \"confidence\": <number in [0, 1]>}}",
        labels.labels().join(", ")
    );
    out
}

fn supporters(predictions: &[AgentPrediction], category: &str) -> Vec<PredictionRef> {
    let mut refs: Vec<PredictionRef> = predictions
        .iter()
        .filter(|p| p.category == category)
        .map(|p| PredictionRef { agent_id: p.agent_id.clone(), stage: p.stage })
        .collect();
    refs.sort();
    refs
}

/// Deterministic arbiter.
///
/// Picks the prediction with the highest confidence, weighted by trust score
/// when profiles are present. Ties go to the earlier label in `labels`, then
/// the smaller agent id, so input order never matters. When votes are present
/// and the pick disagrees with a top vote of at least 0.5 while the picked
/// agent's trust is below `tau`, the vote wins.
pub fn rule_arbitrate(input: &ArbitrationInput, labels: &LabelSet) -> Result<FinalDecision, OrchestratorError> {
    if input.predictions.is_empty() {
        return Err(OrchestratorError::NoPredictions);
    }
    let weighted = !input.profiles.is_empty();
    let scores = trust_scores(&input.profiles);
    let score_of = |agent: &str| scores.get(agent).copied().unwrap_or(0.0);
    let weight = |p: &AgentPrediction| if weighted { p.confidence * score_of(&p.agent_id) } else { p.confidence };

    let pick = input
        .predictions
        .iter()
        .min_by(|a, b| {
            weight(b)
                .total_cmp(&weight(a))
                .then_with(|| labels.rank(&a.category).cmp(&labels.rank(&b.category)))
                .then_with(|| a.agent_id.cmp(&b.agent_id))
        })
        .expect("non-empty");

    if let Some(top) = input.votes.first() {
        let pick_trust = score_of(&pick.agent_id);
        if weighted && top.category != pick.category && top.confidence >= VOTE_OVERRIDE_MIN && pick_trust < input.tau {
            return Ok(FinalDecision {
                image_id: input.image_id.clone(),
                category: top.category.clone(),
                confidence: top.confidence,
                rationale: format!(
                    "retrieval vote {} ({:.4}) overrides {} from agent {} (trust {:.3} < {:.3})",
                    top.category, top.confidence, pick.category, pick.agent_id, pick_trust, input.tau
                ),
                policy: Policy::RuleFallback,
                reeval_triggered: false,
                contributing: supporters(&input.predictions, &top.category),
            });
        }
    }

    let rationale = if weighted {
        format!(
            "agent {} has the highest trust-weighted confidence ({:.4} x {:.3})",
            pick.agent_id,
            pick.confidence,
            score_of(&pick.agent_id)
        )
    } else {
        format!("agent {} has the highest confidence ({:.4})", pick.agent_id, pick.confidence)
    };
    Ok(FinalDecision {
        image_id: input.image_id.clone(),
        category: pick.category.clone(),
        confidence: pick.confidence,
        rationale,
        policy: Policy::RuleFallback,
        reeval_triggered: false,
        contributing: supporters(&input.predictions, &pick.category),
    })
}

/// An agent plus its effective retry cap.
pub struct AgentHandle {
    pub agent: Box<dyn Agent>,
    pub retry_cap: u32,
}

impl AgentHandle {
    pub fn new(agent: Box<dyn Agent>, retry_cap: u32) -> Self {
        Self { agent, retry_cap }
    }

    pub fn id(&self) -> &str {
        self.agent.id()
    }
}

/// Everything produced for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageOutcome {
    pub predictions: Vec<AgentPrediction>,
    pub trace: ReEvalTrace,
    pub decision: Option<FinalDecision>,
}

impl ImageOutcome {
    pub fn records(&self) -> Vec<LogRecord> {
        let mut out: Vec<LogRecord> = self.predictions.iter().cloned().map(LogRecord::Prediction).collect();
        out.push(LogRecord::Trace(self.trace.clone()));
        if let Some(d) = &self.decision {
            out.push(LogRecord::Decision(d.clone()));
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub total: usize,
    pub skipped: usize,
    pub decided: usize,
    pub undecided: usize,
    pub reeval_triggered: usize,
    pub format_exhausted: usize,
    pub agent_unreachable: usize,
    pub other_failures: usize,
}

impl RunSummary {
    pub fn partial_failure(&self) -> bool {
        self.undecided > 0
    }
}

/// The decision engine for one experiment.
pub struct Orchestrator {
    config: ExperimentConfig,
    agents: Vec<AgentHandle>,
    arbiter: Option<AgentHandle>,
    profiles: BTreeMap<String, TrustProfile>,
    index: Option<Arc<VectorIndex>>,
    queries: Option<Arc<QueryEmbeddings>>,
    clock: Arc<dyn Clock>,
}

impl Orchestrator {
    pub fn new(config: ExperimentConfig, agents: Vec<AgentHandle>, clock: Arc<dyn Clock>) -> Self {
        Self {
            config,
            agents,
            arbiter: None,
            profiles: BTreeMap::new(),
            index: None,
            queries: None,
            clock,
        }
    }

    /// Builds agents, arbiter, index, embeddings and profiles from the paths in
    /// `config`, resolving relative paths against `base_dir`.
    pub fn from_config(
        config: ExperimentConfig,
        base_dir: &Path,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, OrchestratorError> {
        config.validate()?;
        let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base_dir.join(p) };
        let agents = config
            .agents
            .iter()
            .map(|spec| Ok(AgentHandle::new(build_agent(spec, base_dir)?, config.retry_cap_for(spec))))
            .collect::<Result<Vec<_>, GatewayError>>()?;
        let arbiter = config
            .orchestrator
            .as_ref()
            .map(|spec| Ok::<_, GatewayError>(AgentHandle::new(build_agent(spec, base_dir)?, config.retry_cap_for(spec))))
            .transpose()?;
        let mut orch = Orchestrator::new(config.clone(), agents, clock);
        orch.arbiter = arbiter;
        if let Some(path) = &config.profiles {
            orch.profiles = load_profiles(&resolve(path))?;
        }
        if let Some(path) = &config.index {
            orch.index = Some(Arc::new(VectorIndex::load(&resolve(path))?));
        }
        if let Some(path) = &config.query_embeddings {
            orch.queries = Some(Arc::new(QueryEmbeddings::load(&resolve(path))?));
        }
        Ok(orch)
    }

    pub fn with_arbiter(mut self, arbiter: AgentHandle) -> Self {
        self.arbiter = Some(arbiter);
        self
    }

    pub fn with_profiles(mut self, profiles: impl IntoIterator<Item = TrustProfile>) -> Self {
        self.profiles = profiles.into_iter().map(|p| (p.agent_id.clone(), p)).collect();
        self
    }

    pub fn with_index(mut self, index: Arc<VectorIndex>, queries: Arc<QueryEmbeddings>) -> Self {
        self.index = Some(index);
        self.queries = Some(queries);
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    /// Fail-fast checks that need no agent call.
    pub fn preflight(&self) -> Result<(), OrchestratorError> {
        self.config.validate_params()?;
        if self.agents.is_empty() {
            return Err(ConfigError::NoAgents.into());
        }
        if self.config.policy == RunPolicy::TrustAwareRag {
            if self.index.is_none() {
                return Err(OrchestratorError::IndexUnavailable);
            }
            if self.queries.is_none() {
                return Err(OrchestratorError::EmbeddingsUnavailable);
            }
            for handle in &self.agents {
                if !self.profiles.contains_key(handle.id()) {
                    return Err(OrchestratorError::MissingProfile(handle.id().to_string()));
                }
            }
        }
        Ok(())
    }

    fn load_image(&self, sample: &Sample) -> Result<Option<ImagePayload>, GatewayError> {
        if !self.agents.iter().any(|h| h.agent.wants_image()) {
            return Ok(None);
        }
        ImagePayload::from_file(&sample.image_ref).map(Some).map_err(|e| GatewayError::ImageUnavailable {
            image_id: sample.image_id.clone(),
            reason: e.to_string(),
        })
    }

    /// Fans one stage out to the given agents and joins in agent order.
    fn query_stage(
        &self,
        sample: &Sample,
        image: &Result<Option<ImagePayload>, GatewayError>,
        stage: Stage,
        prompts: Vec<(usize, String)>,
    ) -> Vec<(usize, Result<AgentPrediction, GatewayError>)> {
        let labels = &self.config.labels;
        let correction = correction_message(KEY_JUSTIFICATION, labels);
        prompts
            .into_par_iter()
            .map(|(i, prompt)| {
                let handle = &self.agents[i];
                let image = match (handle.agent.wants_image(), image) {
                    (false, _) => None,
                    (true, Ok(img)) => img.clone(),
                    (true, Err(e)) => {
                        return (
                            i,
                            Err(GatewayError::ImageUnavailable { image_id: sample.image_id.clone(), reason: e.to_string() }),
                        )
                    }
                };
                let request = AgentRequest { image_id: sample.image_id.clone(), image, prompt, stage };
                let result = invoke_with_retries(
                    handle.agent.as_ref(),
                    &request,
                    handle.retry_cap,
                    &correction,
                    |t| parse_agent_reply(t, labels),
                    self.clock.as_ref(),
                )
                .map(|inv| inv.into_prediction(handle.id(), &sample.image_id, stage));
                (i, result)
            })
            .collect()
    }

    fn retrieve(&self, image_id: &str) -> Result<(Vec<RetrievalHit>, Vec<ClassVote>), OrchestratorError> {
        let index = self.index.as_ref().ok_or(OrchestratorError::IndexUnavailable)?;
        let queries = self.queries.as_ref().ok_or(OrchestratorError::EmbeddingsUnavailable)?;
        let query = queries.get(image_id).ok_or_else(|| OrchestratorError::BadInput {
            path: "query embeddings".into(),
            reason: format!("no embedding for image `{image_id}`"),
        })?;
        let hits = index.knn_query(query, self.config.k)?;
        let votes = weighted_vote(&hits, &self.config.labels)?;
        Ok((hits, votes))
    }

    /// Runs one image through the configured policy.
    pub fn process(&self, sample: &Sample) -> Result<ImageOutcome, OrchestratorError> {
        let trust_mode = self.config.policy == RunPolicy::TrustAwareRag;
        let labels = &self.config.labels;
        let image = self.load_image(sample);

        let mut trace = ReEvalTrace {
            image_id: sample.image_id.clone(),
            triggered: false,
            trust_scores: BTreeMap::new(),
            tau_used: self.config.tau,
            votes: Vec::new(),
            exemplars: Vec::new(),
            agents: Vec::new(),
            failures: Vec::new(),
            arbiter: None,
            undecided: false,
        };
        let mut predictions = Vec::new();

        // stage 1
        let prompt = render_agent_prompt(labels);
        let initial_prompts = (0..self.agents.len()).map(|i| (i, prompt.clone())).collect();
        let mut initial: Vec<Option<AgentPrediction>> = vec![None; self.agents.len()];
        for (i, result) in self.query_stage(sample, &image, Stage::Initial, initial_prompts) {
            match result {
                Ok(p) => {
                    predictions.push(p.clone());
                    initial[i] = Some(p);
                }
                Err(e) => trace.failures.push(failure(self.agents[i].id(), Stage::Initial, &e)),
            }
        }

        // stage 2
        let mut revised: Vec<Option<AgentPrediction>> = vec![None; self.agents.len()];
        if trust_mode {
            trace.trust_scores = trust_scores(&self.profiles);
            trace.triggered = should_reevaluate(trace.trust_scores.values(), self.config.tau);
        }
        if trace.triggered {
            match self.retrieve(&sample.image_id) {
                Ok((hits, votes)) => {
                    trace.exemplars = hits;
                    trace.votes = votes;
                }
                Err(OrchestratorError::BadInput { reason, .. }) => trace.failures.push(AgentFailure {
                    agent_id: "retrieval".into(),
                    stage: Stage::Reeval,
                    kind: "missing_embedding".into(),
                    message: reason,
                }),
                Err(e) => return Err(e),
            }
            if !trace.votes.is_empty() {
                let mut prompts = Vec::new();
                for (i, prior) in initial.iter().enumerate() {
                    if let Some(prior) = prior {
                        prompts.push((i, render_reeval_prompt(prior, &trace.votes, &trace.exemplars, labels)?));
                    }
                }
                for (i, result) in self.query_stage(sample, &image, Stage::Reeval, prompts) {
                    match result {
                        Ok(p) => {
                            predictions.push(p.clone());
                            revised[i] = Some(p);
                        }
                        Err(e) => trace.failures.push(failure(self.agents[i].id(), Stage::Reeval, &e)),
                    }
                }
            }
        }
        for (i, init) in initial.iter().enumerate() {
            if let Some(init) = init {
                let rev = revised[i].clone();
                trace.agents.push(AgentTrace {
                    agent_id: self.agents[i].id().to_string(),
                    changed: rev.as_ref().is_some_and(|r| r.category != init.category),
                    initial: init.clone(),
                    revised: rev,
                });
            }
        }

        // stage 3
        let latest: Vec<AgentPrediction> = initial
            .iter()
            .zip(&revised)
            .filter_map(|(init, rev)| rev.clone().or_else(|| init.clone()))
            .collect();
        let input = ArbitrationInput {
            image_id: sample.image_id.clone(),
            predictions: latest,
            profiles: if trust_mode { self.profiles.clone() } else { BTreeMap::new() },
            votes: trace.votes.clone(),
            tau: self.config.tau,
        };
        let decision = self.arbitrate(&input, &mut trace)?;
        let decision = decision.map(|mut d| {
            d.reeval_triggered = trace.triggered;
            d
        });
        trace.undecided = decision.is_none();
        Ok(ImageOutcome { predictions, trace, decision })
    }

    fn arbitrate(
        &self,
        input: &ArbitrationInput,
        trace: &mut ReEvalTrace,
    ) -> Result<Option<FinalDecision>, OrchestratorError> {
        let labels = &self.config.labels;
        if input.predictions.is_empty() {
            // no agent answered: fall back on retrieval if we can
            let votes = if !input.votes.is_empty() {
                input.votes.clone()
            } else {
                match self.retrieve(&input.image_id) {
                    Ok((_, votes)) => votes,
                    Err(_) => return Ok(None),
                }
            };
            let top = &votes[0];
            return Ok(Some(FinalDecision {
                image_id: input.image_id.clone(),
                category: top.category.clone(),
                confidence: top.confidence,
                rationale: "no agent produced a usable answer; top retrieval vote".into(),
                policy: Policy::RuleFallback,
                reeval_triggered: false,
                contributing: Vec::new(),
            }));
        }

        if let Some(handle) = &self.arbiter {
            let prompt = render_orchestrator_prompt(input, labels);
            let request = AgentRequest {
                image_id: input.image_id.clone(),
                image: None,
                prompt: prompt.clone(),
                stage: Stage::Initial,
            };
            let result = invoke_with_retries(
                handle.agent.as_ref(),
                &request,
                handle.retry_cap,
                &correction_message(KEY_RATIONALE, labels),
                |t| parse_structured_reply(t, labels, KEY_RATIONALE),
                self.clock.as_ref(),
            );
            let mut call = ArbiterCall {
                agent_id: handle.id().to_string(),
                prompt,
                image_attached: request.image.is_some(),
                attempts: None,
                error: None,
            };
            match result {
                Ok(inv) => {
                    call.attempts = Some(inv.attempts);
                    trace.arbiter = Some(call);
                    let policy = match self.config.policy {
                        RunPolicy::ConfidenceAware => Policy::ConfidenceAware,
                        RunPolicy::TrustAwareRag => Policy::TrustAwareRag,
                    };
                    return Ok(Some(FinalDecision {
                        image_id: input.image_id.clone(),
                        contributing: supporters(&input.predictions, &inv.reply.category),
                        category: inv.reply.category,
                        confidence: inv.reply.confidence,
                        rationale: inv.reply.justification,
                        policy,
                        reeval_triggered: false,
                    }));
                }
                Err(e) => {
                    log::warn!("image {}: arbiter failed ({e}); using rule fallback", input.image_id);
                    call.error = Some(e.to_string());
                    trace.arbiter = Some(call);
                }
            }
        }
        rule_arbitrate(input, labels).map(Some)
    }

    /// Runs every sample not yet present in `out_dir`'s run log, appending
    /// predictions, traces and decisions in sample order.
    pub fn run_experiment(&self, samples: &[Sample], out_dir: &Path) -> Result<RunSummary, OrchestratorError> {
        self.preflight()?;
        if samples.is_empty() {
            return Err(OrchestratorError::NoSamples);
        }
        fs::create_dir_all(out_dir)?;
        fs::write(
            out_dir.join("config.json"),
            serde_json::to_string_pretty(&self.config).expect("config serializes") + "\n",
        )?;
        let truth: BTreeMap<String, String> = samples
            .iter()
            .filter_map(|s| s.true_label.clone().map(|l| (s.image_id.clone(), l)))
            .collect();
        write_truth(&out_dir.join(TRUTH_FILE), &truth)?;

        let log_path = out_dir.join(RUN_LOG_FILE);
        let done = if log_path.exists() {
            let mut writer = RunLogWriter::open(&log_path)?;
            writer.flush()?;
            RunLog::read(&log_path)?.completed_images()
        } else {
            Default::default()
        };
        let pending: Vec<&Sample> = samples.iter().filter(|s| !done.contains(&s.image_id)).collect();
        let mut summary = RunSummary { total: samples.len(), skipped: samples.len() - pending.len(), ..Default::default() };

        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.parallelism)
            .build()
            .map_err(|e| OrchestratorError::BadInput { path: "thread pool".into(), reason: e.to_string() })?;
        let mut writer = RunLogWriter::open(&log_path)?;
        for chunk in pending.chunks(self.config.parallelism.max(1) * 4) {
            let outcomes: Vec<Result<ImageOutcome, OrchestratorError>> =
                pool.install(|| chunk.par_iter().map(|s| self.process(s)).collect());
            for outcome in outcomes {
                let outcome = outcome?;
                tally(&mut summary, &outcome);
                for record in outcome.records() {
                    writer.append(&record)?;
                }
            }
            writer.flush()?;
        }
        Ok(summary)
    }
}

fn failure(agent_id: &str, stage: Stage, err: &GatewayError) -> AgentFailure {
    AgentFailure { agent_id: agent_id.to_string(), stage, kind: err.kind().to_string(), message: err.to_string() }
}

fn tally(summary: &mut RunSummary, outcome: &ImageOutcome) {
    if outcome.decision.is_some() {
        summary.decided += 1;
    } else {
        summary.undecided += 1;
    }
    if outcome.trace.triggered {
        summary.reeval_triggered += 1;
    }
    for f in &outcome.trace.failures {
        match f.kind.as_str() {
            "format_exhausted" => summary.format_exhausted += 1,
            "agent_unreachable" => summary.agent_unreachable += 1,
            _ => summary.other_failures += 1,
        }
    }
}

/// Reads a JSON array of trust profiles keyed by agent id.
pub fn load_profiles(path: &Path) -> Result<BTreeMap<String, TrustProfile>, OrchestratorError> {
    let raw = fs::read_to_string(path)
        .map_err(|e| OrchestratorError::BadInput { path: path.display().to_string(), reason: e.to_string() })?;
    let profiles: Vec<TrustProfile> = serde_json::from_str(&raw)
        .map_err(|e| OrchestratorError::BadInput { path: path.display().to_string(), reason: e.to_string() })?;
    Ok(profiles.into_iter().map(|p| (p.agent_id.clone(), p)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{FixtureEntry, ScriptedAgent};
    use crate::model::FixedClock;
    use crate::vector_store::EmbeddingRecord;
    use proptest::prelude::*;

    fn labels() -> LabelSet {
        LabelSet::apple_leaf()
    }

    fn pred(agent: &str, category: &str, confidence: f64) -> AgentPrediction {
        AgentPrediction {
            image_id: "img".into(),
            agent_id: agent.into(),
            stage: Stage::Initial,
            category: category.into(),
            confidence,
            justification: format!("{agent} says {category}"),
            latency_ms: 0.0,
            cost_usd: 0.0,
            attempts: 1,
            ts: 0,
        }
    }

    /// Profile whose metrics reproduce a given trust score pattern.
    pub(crate) fn profile(agent: &str, ece: f64, ocr: f64, ccc: f64, cwa: f64) -> TrustProfile {
        TrustProfile {
            agent_id: agent.into(),
            n: 512,
            accuracy: 0.5,
            avg_conf: 0.9,
            conf_correct: None,
            conf_incorrect: None,
            confidence_gap: None,
            consistency_gap: None,
            ocr: Some(ocr),
            hcw: 0,
            thc: 0,
            ccc: Some(ccc),
            ccc_p_value: None,
            ece: Some(ece),
            cwa: Some(cwa),
        }
    }

    fn qwen(agent: &str) -> TrustProfile {
        profile(agent, 0.453, 0.508, 0.126, 0.495)
    }

    fn gpt(agent: &str) -> TrustProfile {
        profile(agent, 0.293, 0.416, 0.361, 0.592)
    }

    fn input(predictions: Vec<AgentPrediction>) -> ArbitrationInput {
        ArbitrationInput { image_id: "img".into(), predictions, profiles: BTreeMap::new(), votes: vec![], tau: 0.7 }
    }

    #[test]
    fn rule_argmax_without_profiles() {
        let d = rule_arbitrate(&input(vec![pred("A", "scab", 0.9), pred("B", "rust", 0.8)]), &labels()).unwrap();
        assert_eq!(d.category, "scab");
        assert_eq!(d.confidence, 0.9);
        assert_eq!(d.policy, Policy::RuleFallback);
        assert_eq!(d.contributing, vec![PredictionRef { agent_id: "A".into(), stage: Stage::Initial }]);
    }

    #[test]
    fn rule_trust_weighted() {
        let mut inp = input(vec![pred("A", "scab", 0.9), pred("B", "rust", 0.8)]);
        inp.profiles = [("A".to_string(), qwen("A")), ("B".to_string(), gpt("B"))].into();
        let d = rule_arbitrate(&inp, &labels()).unwrap();
        assert_eq!(d.category, "rust");
    }

    #[test]
    fn rule_label_tie_break() {
        let d = rule_arbitrate(&input(vec![pred("A", "scab", 0.8), pred("B", "black-rot", 0.8)]), &labels()).unwrap();
        assert_eq!(d.category, "black-rot");
        assert!(matches!(rule_arbitrate(&input(vec![]), &labels()), Err(OrchestratorError::NoPredictions)));
    }

    #[test]
    fn rule_vote_override() {
        let mut inp = input(vec![pred("A", "scab", 0.9)]);
        inp.profiles = [("A".to_string(), qwen("A"))].into();
        inp.votes = vec![
            ClassVote { category: "rust".into(), confidence: 0.6 },
            ClassVote { category: "scab".into(), confidence: 0.4 },
        ];
        let d = rule_arbitrate(&inp, &labels()).unwrap();
        assert_eq!(d.category, "rust");
        assert_eq!(d.confidence, 0.6);
        assert!(d.contributing.is_empty());

        // weak vote does not override
        inp.votes[0].confidence = 0.45;
        assert_eq!(rule_arbitrate(&inp, &labels()).unwrap().category, "scab");

        // trusted agent is not overridden
        inp.votes[0].confidence = 0.9;
        inp.profiles = [("A".to_string(), profile("A", 0.0, 0.0, 1.0, 1.0))].into();
        assert_eq!(rule_arbitrate(&inp, &labels()).unwrap().category, "scab");
    }

    #[test]
    fn single_agent_identity() {
        let p = pred("solo", "healthy", 0.42);
        let d = rule_arbitrate(&input(vec![p.clone()]), &labels()).unwrap();
        assert_eq!((d.category.as_str(), d.confidence), (p.category.as_str(), p.confidence));
    }

    #[test]
    fn trigger_rule() {
        let scores = trust_scores(&[("q".to_string(), qwen("q")), ("g".to_string(), gpt("g"))].into());
        assert!((scores["q"] - 0.415).abs() < 1e-12);
        assert!((scores["g"] - 0.561).abs() < 1e-12);
        assert!(should_reevaluate(scores.values(), 0.7));
        assert!(!should_reevaluate(&[0.86, 0.9], 0.7));
        assert!(!should_reevaluate(&[0.0, 0.1], 0.0));
    }

    #[test]
    fn orchestrator_prompt_contents() {
        let mut inp = input(vec![pred("gpt-4o", "scab", 0.9), pred("qwen-vl", "rust", 0.8)]);
        let p = render_orchestrator_prompt(&inp, &labels());
        assert!(p.contains("gpt-4o") && p.contains("qwen-vl"));
        assert!(!p.contains("ECE"));
        inp.profiles = [("gpt-4o".to_string(), gpt("gpt-4o")), ("qwen-vl".to_string(), qwen("qwen-vl"))].into();
        inp.votes = vec![ClassVote { category: "scab".into(), confidence: 1.0 }];
        let p = render_orchestrator_prompt(&inp, &labels());
        assert_eq!(p.matches("ECE").count(), 2);
        assert!(p.contains("ECE 0.293") && p.contains("ECE 0.453"));
        assert!(p.contains("\"rationale\""));
        assert!(!p.contains("data:") && !p.contains("base64") && !p.contains("image_url"));
    }

    const A_SCAB: &str = r#"{"category":"scab","justification":"olive spots","confidence":0.9}"#;
    const B_RUST: &str = r#"{"category":"rust","justification":"orange","confidence":0.8}"#;

    fn scripted(id: &str, initial: &str, reeval: &str) -> AgentHandle {
        AgentHandle::new(
            Box::new(ScriptedAgent::new(
                id,
                [
                    FixtureEntry::single("img", Stage::Initial, initial),
                    FixtureEntry::single("img", Stage::Reeval, reeval),
                ],
            )),
            2,
        )
    }

    fn sample() -> Sample {
        Sample { image_id: "img".into(), image_ref: "img.jpg".into(), true_label: Some("scab".into()) }
    }

    fn index() -> (Arc<VectorIndex>, Arc<QueryEmbeddings>) {
        let rec = |id: &str, label: &str, v: Vec<f64>| EmbeddingRecord {
            id: id.into(),
            label: Some(label.into()),
            vector: v,
            meta: BTreeMap::new(),
        };
        let idx = VectorIndex::build(
            vec![
                rec("r1", "scab", vec![1.0, 0.0]),
                rec("r2", "scab", vec![0.9, 0.1]),
                rec("r3", "rust", vec![0.0, 1.0]),
            ],
            2,
        )
        .unwrap()
        .index;
        let q = QueryEmbeddings::from_map(2, [("img".to_string(), vec![1.0, 0.0])].into());
        (Arc::new(idx), Arc::new(q))
    }

    fn config(policy: RunPolicy) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(labels(), vec![]);
        c.policy = policy;
        c.k = 2;
        c
    }

    #[test]
    fn trust_pipeline_triggers_and_traces() {
        let (idx, q) = index();
        let orch = Orchestrator::new(
            config(RunPolicy::TrustAwareRag),
            vec![scripted("A", A_SCAB, A_SCAB), scripted("B", B_RUST, r#"{"category":"scab","justification":"vote","confidence":0.7}"#)],
            Arc::new(FixedClock(0)),
        )
        .with_profiles([qwen("A"), gpt("B")])
        .with_index(idx, q);
        let out = orch.process(&sample()).unwrap();
        assert!(out.trace.triggered);
        assert_eq!(out.trace.votes[0].category, "scab");
        assert_eq!(out.trace.votes[0].confidence, 1.0);
        assert_eq!(out.predictions.len(), 4);
        assert!(!out.trace.agents[0].changed);
        assert!(out.trace.agents[1].changed);
        let d = out.decision.unwrap();
        assert!(d.reeval_triggered);
        assert_eq!(d.category, "scab");
    }

    #[test]
    fn trusted_agents_skip_reevaluation() {
        let (idx, q) = index();
        let good = |id: &str| profile(id, 0.02, 0.03, 0.7, 0.95);
        let orch = Orchestrator::new(
            config(RunPolicy::TrustAwareRag),
            vec![scripted("A", A_SCAB, A_SCAB), scripted("B", B_RUST, B_RUST)],
            Arc::new(FixedClock(0)),
        )
        .with_profiles([good("A"), good("B")])
        .with_index(idx, q);
        let out = orch.process(&sample()).unwrap();
        assert!(!out.trace.triggered);
        assert!(out.trace.votes.is_empty());
        assert_eq!(out.predictions.len(), 2);
        assert_eq!(out.decision.unwrap().category, "scab");
    }

    #[test]
    fn missing_index_fails_fast() {
        let orch = Orchestrator::new(config(RunPolicy::TrustAwareRag), vec![scripted("A", A_SCAB, A_SCAB)], Arc::new(FixedClock(0)))
            .with_profiles([qwen("A")]);
        assert!(matches!(orch.preflight(), Err(OrchestratorError::IndexUnavailable)));
    }

    #[test]
    fn all_agents_failing_falls_back_to_votes_or_undecided() {
        let (idx, q) = index();
        let orch = Orchestrator::new(
            config(RunPolicy::TrustAwareRag),
            vec![scripted("A", "garbage", "garbage")],
            Arc::new(FixedClock(0)),
        )
        .with_profiles([qwen("A")])
        .with_index(idx, q);
        let out = orch.process(&sample()).unwrap();
        assert_eq!(out.trace.failures.len(), 1);
        assert_eq!(out.trace.failures[0].kind, "format_exhausted");
        let d = out.decision.unwrap();
        assert_eq!(d.category, "scab");
        assert_eq!(d.policy, Policy::RuleFallback);

        let orch = Orchestrator::new(config(RunPolicy::ConfidenceAware), vec![scripted("A", "garbage", "garbage")], Arc::new(FixedClock(0)));
        let out = orch.process(&sample()).unwrap();
        assert!(out.decision.is_none());
        assert!(out.trace.undecided);
    }

    #[test]
    fn remote_arbiter_failure_uses_rule() {
        let arbiter = AgentHandle::new(
            Box::new(ScriptedAgent::new("o3", [FixtureEntry::single("img", Stage::Initial, "I refuse")])),
            1,
        );
        let orch = Orchestrator::new(
            config(RunPolicy::ConfidenceAware),
            vec![scripted("A", A_SCAB, A_SCAB), scripted("B", B_RUST, B_RUST)],
            Arc::new(FixedClock(0)),
        )
        .with_arbiter(arbiter);
        let out = orch.process(&sample()).unwrap();
        let d = out.decision.unwrap();
        assert_eq!(d.policy, Policy::RuleFallback);
        let call = out.trace.arbiter.unwrap();
        assert!(!call.image_attached);
        assert!(call.error.unwrap().contains("2 attempts"));
    }

    #[test]
    fn remote_arbiter_decides() {
        let arbiter = AgentHandle::new(
            Box::new(ScriptedAgent::new(
                "o3",
                [FixtureEntry::single("img", Stage::Initial, r#"{"category":"Rust","rationale":"B is specific","confidence":0.7}"#)],
            )),
            1,
        );
        let orch = Orchestrator::new(
            config(RunPolicy::ConfidenceAware),
            vec![scripted("A", A_SCAB, A_SCAB), scripted("B", B_RUST, B_RUST)],
            Arc::new(FixedClock(0)),
        )
        .with_arbiter(arbiter);
        let d = orch.process(&sample()).unwrap().decision.unwrap();
        assert_eq!(d.policy, Policy::ConfidenceAware);
        assert!(!d.reeval_triggered);
        assert_eq!(d.category, "rust");
        assert_eq!(d.rationale, "B is specific");
    }

    fn prediction_strategy() -> impl Strategy<Value = Vec<AgentPrediction>> {
        prop::collection::vec((0usize..4, prop::sample::select(vec![0.5, 0.7, 0.8, 0.9, 0.95])), 1..6).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (l, c))| pred(&format!("agent{i}"), &LabelSet::apple_leaf().labels()[l], c))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn rule_is_order_independent(preds in prediction_strategy(), with_profiles in any::<bool>(), rot in 0usize..6) {
            let mut inp = input(preds.clone());
            if with_profiles {
                inp.profiles = preds.iter().enumerate()
                    .map(|(i, p)| (p.agent_id.clone(), if i % 2 == 0 { qwen(&p.agent_id) } else { gpt(&p.agent_id) }))
                    .collect();
            }
            let d1 = rule_arbitrate(&inp, &labels()).unwrap();
            let mut permuted = inp.clone();
            let n = permuted.predictions.len();
            permuted.predictions.rotate_left(rot % n);
            permuted.predictions.reverse();
            let d2 = rule_arbitrate(&permuted, &labels()).unwrap();
            prop_assert_eq!(d1, d2);
        }
    }
}
