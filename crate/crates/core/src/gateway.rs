//! Uniform access to classification agents: prompt rendering, structured
//! reply parsing, the capped re-prompt loop, and the two transports
//! (fixture-driven scripted agents and chat-completion endpoints).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::model::{canonicalize_label, AgentPrediction, Clock, LabelSet, ModelError, Stage};
use crate::vector_store::{format_votes, ClassVote, RetrievalHit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Remote,
    Scripted,
}

fn default_timeout_ms() -> u64 {
    60_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub agent_id: String,
    pub kind: AgentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_url: Option<String>,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script_path: Option<PathBuf>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Overrides the experiment-wide retry cap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retry_cap: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_limit_rpm: Option<u32>,
}

impl AgentSpec {
    pub fn scripted(agent_id: impl Into<String>, script_path: impl Into<PathBuf>) -> Self {
        Self {
            agent_id: agent_id.into(),
            kind: AgentKind::Scripted,
            endpoint_url: None,
            api_key_env: None,
            model_name: None,
            script_path: Some(script_path.into()),
            timeout_ms: default_timeout_ms(),
            retry_cap: None,
            rate_limit_rpm: None,
        }
    }

    pub fn remote(agent_id: impl Into<String>, endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            agent_id: agent_id.into(),
            kind: AgentKind::Remote,
            endpoint_url: Some(endpoint_url.into()),
            api_key_env: None,
            model_name: Some(model_name.into()),
            script_path: None,
            timeout_ms: default_timeout_ms(),
            retry_cap: None,
            rate_limit_rpm: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.agent_id.trim().is_empty() {
            return Err("empty agent_id".into());
        }
        match self.kind {
            AgentKind::Remote if self.endpoint_url.is_none() => Err("remote agent needs endpoint_url".into()),
            AgentKind::Scripted if self.script_path.is_none() => Err("scripted agent needs script_path".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePayload {
    pub media_type: String,
    pub bytes: Vec<u8>,
}

impl ImagePayload {
    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        let media_type = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("jpg") | Some("jpeg") => "image/jpeg",
            Some("png") => "image/png",
            Some("webp") => "image/webp",
            Some("gif") => "image/gif",
            _ => "application/octet-stream",
        };
        Ok(Self { media_type: media_type.to_string(), bytes: fs::read(path)? })
    }

    pub fn data_url(&self) -> String {
        format!(
            "data:{};base64,{}",
            self.media_type,
            base64::engine::general_purpose::STANDARD.encode(&self.bytes)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentRequest {
    pub image_id: String,
    /// `None` for text-only requests, e.g. to the orchestrator.
    pub image: Option<ImagePayload>,
    pub prompt: String,
    pub stage: Stage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

/// A follow-up turn after the initial prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

/// What a transport returns for one attempt.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawAgentReply {
    pub text: String,
    pub parsed: Option<ParsedReply>,
    /// Transport-reported latency, if any (scripted fixtures).
    pub latency_ms: Option<f64>,
    pub cost_usd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedReply {
    pub category: String,
    /// The free-text field: `justification` for agents, `rationale` for the
    /// orchestrator.
    pub justification: String,
    pub confidence: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("empty reply")]
    Empty,
    #[error("no JSON object found in reply")]
    NoJsonFound,
    #[error("missing key `{0}`")]
    MissingKey(String),
    #[error("key `{0}` has the wrong type")]
    WrongType(String),
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("confidence {0} outside [0, 1]")]
    ConfidenceOutOfRange(f64),
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("agent `{agent}` unreachable: {reason}")]
    AgentUnreachable { agent: String, reason: String },
    #[error("agent `{agent}` gave no parseable reply after {attempts} attempts: {last}")]
    FormatExhausted { agent: String, attempts: u32, last: ParseError },
    #[error("no fixture entry for image `{image_id}` at stage {stage}")]
    MissingFixtureEntry { image_id: String, stage: Stage },
    #[error("fixture {path} line {line}: {reason}")]
    BadFixture { path: String, line: usize, reason: String },
    #[error("environment variable `{0}` is not set")]
    MissingApiKey(String),
    #[error("agent spec `{0}` is invalid: {1}")]
    InvalidSpec(String, String),
    #[error("cannot read image for `{image_id}`: {reason}")]
    ImageUnavailable { image_id: String, reason: String },
    #[error("prior prediction must come from the initial stage")]
    NotInitialStage,
    #[error("re-evaluation needs at least one class vote")]
    EmptyVotes,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GatewayError {
    /// Short machine-readable tag used in run logs.
    pub fn kind(&self) -> &'static str {
        match self {
            GatewayError::AgentUnreachable { .. } => "agent_unreachable",
            GatewayError::FormatExhausted { .. } => "format_exhausted",
            GatewayError::MissingFixtureEntry { .. } => "missing_fixture_entry",
            GatewayError::BadFixture { .. } => "bad_fixture",
            GatewayError::MissingApiKey(_) => "missing_api_key",
            GatewayError::InvalidSpec(..) => "invalid_spec",
            GatewayError::ImageUnavailable { .. } => "image_unavailable",
            GatewayError::NotInitialStage => "not_initial_stage",
            GatewayError::EmptyVotes => "empty_votes",
            GatewayError::Io(_) => "io",
        }
    }
}

/// A classification endpoint. `history` holds the follow-up turns issued so
/// far (one assistant reply plus one correction per failed attempt).
pub trait Agent: Send + Sync {
    fn id(&self) -> &str;

    /// Whether requests to this agent should carry the image bytes.
    fn wants_image(&self) -> bool {
        false
    }

    fn complete(&self, request: &AgentRequest, history: &[Turn]) -> Result<RawAgentReply, GatewayError>;
}

pub const KEY_CATEGORY: &str = "category";
pub const KEY_JUSTIFICATION: &str = "justification";
pub const KEY_CONFIDENCE: &str = "confidence";
pub const KEY_RATIONALE: &str = "rationale";

fn label_list(labels: &LabelSet) -> String {
    labels.labels().join(", ")
}

fn schema_block(text_key: &str, labels: &LabelSet) -> String {
    format!(
        "{{\n  \"{KEY_CATEGORY}\": one of [{}],\n  \"{text_key}\": a short natural-language explanation,\n  \"{KEY_CONFIDENCE}\": a number between 0 and 1 inclusive\n}}",
        label_list(labels)
    )
}

/// Zero-shot classification prompt sent with a single image.
pub fn render_agent_prompt(labels: &LabelSet) -> String {
    format!(
        "You are a vision expert. Classify the attached image into exactly one of these categories: {}.\n\
         Describe the visual evidence behind your choice and report how confident you are.\n\
         The confidence score must be a number in the range [0, 1], where 1 means certain.\n\
         Respond with a single JSON object and nothing else, using this schema:\n{}",
        label_list(labels),
        schema_block(KEY_JUSTIFICATION, labels)
    )
}

/// Second-round prompt: the agent's own prior answer plus retrieval
/// evidence, asking it to revise or reaffirm.
pub fn render_reeval_prompt(
    prior: &AgentPrediction,
    votes: &[ClassVote],
    exemplars: &[RetrievalHit],
    labels: &LabelSet,
) -> Result<String, GatewayError> {
    if prior.stage != Stage::Initial {
        return Err(GatewayError::NotInitialStage);
    }
    if votes.is_empty() {
        return Err(GatewayError::EmptyVotes);
    }
    let mut out = String::new();
    let _ = writeln!(out, "You previously classified this image.");
    let _ = writeln!(out, "Your previous category: {}", prior.category);
    let _ = writeln!(out, "Your previous confidence: {}", prior.confidence);
    let _ = writeln!(out, "Your previous justification: {}", prior.justification);
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "A retrieval system compared the image against labeled reference images and produced these similarity-weighted category confidences:"
    );
    let _ = writeln!(out, "{}", format_votes(votes));
    if !exemplars.is_empty() {
        let _ = writeln!(out, "Most similar reference images:");
        for hit in exemplars {
            let _ = writeln!(out, "- {}: {} (similarity {:.4})", hit.record_id, hit.label, hit.similarity);
        }
    }
    let _ = writeln!(out);
    let _ = write!(
        out,
        "Re-examine the image in light of this evidence. Either revise your prediction or reaffirm it.\n\
         Allowed categories: {}. The confidence must lie in [0, 1].\n\
         Respond with a single JSON object and nothing else, using this schema:\n{}",
        label_list(labels),
        schema_block(KEY_JUSTIFICATION, labels)
    );
    Ok(out)
}

/// Follow-up turn sent after an unparseable reply.
pub fn correction_message(text_key: &str, labels: &LabelSet) -> String {
    format!(
        "Your previous reply did not follow the required format. Reply again with only a JSON object, \
         no other text, using exactly this schema:\n{}",
        schema_block(text_key, labels)
    )
}

/// Returns the first syntactically valid JSON object embedded in `text`.
pub fn extract_first_json_object(text: &str) -> Option<serde_json::Map<String, Value>> {
    text.match_indices('{').find_map(|(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => Some(map),
            _ => None,
        }
    })
}

fn confidence_value(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

/// Parses a structured reply whose free-text field is named `text_key`.
/// Checks run in the order category, confidence, free text.
pub fn parse_structured_reply(text: &str, labels: &LabelSet, text_key: &str) -> Result<ParsedReply, ParseError> {
    if text.trim().is_empty() {
        return Err(ParseError::Empty);
    }
    let obj = extract_first_json_object(text).ok_or(ParseError::NoJsonFound)?;

    let raw_category = obj
        .get(KEY_CATEGORY)
        .ok_or_else(|| ParseError::MissingKey(KEY_CATEGORY.into()))?
        .as_str()
        .ok_or_else(|| ParseError::WrongType(KEY_CATEGORY.into()))?;
    let category = canonicalize_label(raw_category, labels).map_err(|e| match e {
        ModelError::UnknownLabel(l) => ParseError::UnknownLabel(l),
        _ => ParseError::UnknownLabel(raw_category.to_string()),
    })?;

    let confidence = obj
        .get(KEY_CONFIDENCE)
        .ok_or_else(|| ParseError::MissingKey(KEY_CONFIDENCE.into()))
        .and_then(|v| confidence_value(v).ok_or_else(|| ParseError::WrongType(KEY_CONFIDENCE.into())))?;
    if !(0.0..=1.0).contains(&confidence) {
        return Err(ParseError::ConfidenceOutOfRange(confidence));
    }

    let justification = match obj.get(text_key) {
        None => return Err(ParseError::MissingKey(text_key.into())),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(ParseError::WrongType(text_key.into())),
    };

    Ok(ParsedReply { category, justification, confidence })
}

pub fn parse_agent_reply(text: &str, labels: &LabelSet) -> Result<ParsedReply, ParseError> {
    parse_structured_reply(text, labels, KEY_JUSTIFICATION)
}

/// Result of a successful (possibly retried) call.
#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub reply: ParsedReply,
    pub raw_text: String,
    pub attempts: u32,
    pub latency_ms: f64,
    pub cost_usd: f64,
    pub ts: u64,
}

impl Invocation {
    pub fn into_prediction(self, agent_id: &str, image_id: &str, stage: Stage) -> AgentPrediction {
        AgentPrediction {
            image_id: image_id.to_string(),
            agent_id: agent_id.to_string(),
            stage,
            category: self.reply.category,
            confidence: self.reply.confidence,
            justification: self.reply.justification,
            latency_ms: self.latency_ms,
            cost_usd: self.cost_usd,
            attempts: self.attempts,
            ts: self.ts,
        }
    }
}

/// Issues `request`, re-prompting with `correction` after each unparseable
/// reply, for at most `retry_cap + 1` attempts in total.
///
/// Latency is the sum of transport-reported latencies when every attempt
/// reports one, otherwise the elapsed time on `clock`.
pub fn invoke_with_retries<P>(
    agent: &dyn Agent,
    request: &AgentRequest,
    retry_cap: u32,
    correction: &str,
    parser: P,
    clock: &dyn Clock,
) -> Result<Invocation, GatewayError>
where
    P: Fn(&str) -> Result<ParsedReply, ParseError>,
{
    let started = clock.now_ms();
    let mut history: Vec<Turn> = Vec::new();
    let mut reported_latency = Some(0.0);
    let mut cost = 0.0;
    let mut attempts = 0u32;
    loop {
        attempts += 1;
        let reply = agent.complete(request, &history)?;
        reported_latency = reported_latency.zip(reply.latency_ms).map(|(a, b)| a + b);
        cost += reply.cost_usd.unwrap_or(0.0);
        let parsed = reply.parsed.clone().map(Ok).unwrap_or_else(|| parser(&reply.text));
        match parsed {
            Ok(parsed) => {
                let ts = clock.now_ms();
                let elapsed = ts.saturating_sub(started) as f64;
                return Ok(Invocation {
                    reply: parsed,
                    raw_text: reply.text,
                    attempts,
                    latency_ms: reported_latency.unwrap_or(elapsed),
                    cost_usd: cost,
                    ts,
                });
            }
            Err(err) => {
                log::debug!("agent {} attempt {attempts}: {err}", agent.id());
                if attempts > retry_cap {
                    return Err(GatewayError::FormatExhausted {
                        agent: agent.id().to_string(),
                        attempts,
                        last: err,
                    });
                }
                history.push(Turn { role: Role::Assistant, text: reply.text });
                history.push(Turn { role: Role::User, text: correction.to_string() });
            }
        }
    }
}

/// One scripted reply sequence. Attempt i receives `replies[min(i, len-1)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub image_id: String,
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub replies: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<f64>,
}

impl FixtureEntry {
    pub fn single(image_id: impl Into<String>, stage: Stage, reply: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            stage,
            reply: Some(reply.into()),
            replies: Vec::new(),
            latency_ms: None,
        }
    }

    fn sequence(&self) -> Vec<String> {
        self.reply.iter().cloned().chain(self.replies.iter().cloned()).collect()
    }
}

/// Deterministic agent that replays a JSONL fixture keyed by image and
/// stage. Zero cost.
#[derive(Debug, Clone)]
pub struct ScriptedAgent {
    id: String,
    script: BTreeMap<(String, Stage), (Vec<String>, Option<f64>)>,
}

impl ScriptedAgent {
    pub fn new(id: impl Into<String>, entries: impl IntoIterator<Item = FixtureEntry>) -> Self {
        let script = entries
            .into_iter()
            .map(|e| {
                let seq = e.sequence();
                ((e.image_id, e.stage), (seq, e.latency_ms))
            })
            .collect();
        Self { id: id.into(), script }
    }

    pub fn from_file(id: impl Into<String>, path: &Path) -> Result<Self, GatewayError> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: FixtureEntry = serde_json::from_str(&line).map_err(|e| GatewayError::BadFixture {
                path: path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            if entry.reply.is_none() && entry.replies.is_empty() {
                return Err(GatewayError::BadFixture {
                    path: path.display().to_string(),
                    line: i + 1,
                    reason: "entry has no reply".into(),
                });
            }
            entries.push(entry);
        }
        Ok(Self::new(id, entries))
    }
}

impl Agent for ScriptedAgent {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &AgentRequest, history: &[Turn]) -> Result<RawAgentReply, GatewayError> {
        let (seq, latency) = self
            .script
            .get(&(request.image_id.clone(), request.stage))
            .ok_or_else(|| GatewayError::MissingFixtureEntry {
                image_id: request.image_id.clone(),
                stage: request.stage,
            })?;
        let attempt = history.iter().filter(|t| t.role == Role::User).count();
        let text = seq[attempt.min(seq.len() - 1)].clone();
        Ok(RawAgentReply {
            text,
            parsed: None,
            latency_ms: Some(latency.unwrap_or(0.0)),
            cost_usd: Some(0.0),
        })
    }
}

#[derive(Debug)]
struct TokenBucket {
    capacity: f64,
    per_sec: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    fn per_minute(rpm: u32) -> Self {
        let capacity = rpm.max(1) as f64;
        Self { capacity, per_sec: capacity / 60.0, state: Mutex::new((capacity, Instant::now())) }
    }

    fn acquire(&self) {
        loop {
            let wait = {
                let mut guard = self.state.lock().expect("token bucket poisoned");
                let (tokens, last) = &mut *guard;
                let now = Instant::now();
                *tokens = (*tokens + now.duration_since(*last).as_secs_f64() * self.per_sec).min(self.capacity);
                *last = now;
                if *tokens >= 1.0 {
                    *tokens -= 1.0;
                    return;
                }
                (1.0 - *tokens) / self.per_sec
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

/// Chat-completion-style HTTP endpoint.
#[derive(Debug)]
pub struct RemoteAgent {
    id: String,
    url: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    limiter: Option<TokenBucket>,
}

impl RemoteAgent {
    pub fn new(spec: &AgentSpec) -> Result<Self, GatewayError> {
        let url = spec
            .endpoint_url
            .clone()
            .ok_or_else(|| GatewayError::InvalidSpec(spec.agent_id.clone(), "missing endpoint_url".into()))?;
        let api_key = match &spec.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| GatewayError::MissingApiKey(var.clone()))?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(spec.timeout_ms))
            .build()
            .map_err(|e| GatewayError::InvalidSpec(spec.agent_id.clone(), e.to_string()))?;
        Ok(Self {
            id: spec.agent_id.clone(),
            url,
            model: spec.model_name.clone().unwrap_or_else(|| spec.agent_id.clone()),
            api_key,
            client,
            limiter: spec.rate_limit_rpm.map(TokenBucket::per_minute),
        })
    }

    fn unreachable(&self, reason: impl ToString) -> GatewayError {
        GatewayError::AgentUnreachable { agent: self.id.clone(), reason: reason.to_string() }
    }
}

/// Request body for a chat-completion endpoint. The image, when present,
/// rides on the first user message as a base64 data URL.
pub fn chat_request_body(model: &str, request: &AgentRequest, history: &[Turn]) -> Value {
    let mut content = vec![json!({"type": "text", "text": request.prompt})];
    if let Some(image) = &request.image {
        content.push(json!({"type": "image_url", "image_url": {"url": image.data_url()}}));
    }
    let mut messages = vec![json!({"role": "user", "content": content})];
    for turn in history {
        messages.push(json!({
            "role": turn.role,
            "content": [{"type": "text", "text": turn.text}],
        }));
    }
    json!({"model": model, "messages": messages})
}

/// Reads the first choice's message content from a chat-completion reply.
pub fn chat_reply_text(body: &Value) -> Option<String> {
    let content = body.pointer("/choices/0/message/content")?;
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join(""),
        ),
        _ => None,
    }
}

impl Agent for RemoteAgent {
    fn id(&self) -> &str {
        &self.id
    }

    fn wants_image(&self) -> bool {
        true
    }

    fn complete(&self, request: &AgentRequest, history: &[Turn]) -> Result<RawAgentReply, GatewayError> {
        if let Some(limiter) = &self.limiter {
            limiter.acquire();
        }
        let body = chat_request_body(&self.model, request, history);
        let mut req = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| self.unreachable(e))?;
        let status = resp.status();
        let value: Value = resp.json().map_err(|e| self.unreachable(format!("bad response body: {e}")))?;
        if !status.is_success() {
            return Err(self.unreachable(format!("HTTP {status}: {value}")));
        }
        let text = chat_reply_text(&value).ok_or_else(|| self.unreachable("response has no message content"))?;
        Ok(RawAgentReply { text, parsed: None, latency_ms: None, cost_usd: None })
    }
}

/// Instantiates the transport an agent spec names. Relative fixture paths
/// resolve against `base_dir`.
pub fn build_agent(spec: &AgentSpec, base_dir: &Path) -> Result<Box<dyn Agent>, GatewayError> {
    spec.validate().map_err(|reason| GatewayError::InvalidSpec(spec.agent_id.clone(), reason))?;
    match spec.kind {
        AgentKind::Scripted => {
            let path = spec.script_path.as_ref().expect("validated");
            let path = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
            Ok(Box::new(ScriptedAgent::from_file(spec.agent_id.clone(), &path)?))
        }
        AgentKind::Remote => Ok(Box::new(RemoteAgent::new(spec)?)),
    }
}
