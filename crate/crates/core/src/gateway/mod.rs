//! Provider-agnostic access to text generation and embeddings.
//!
//! [`Gateway`] wraps any [`Provider`] with bounded concurrency, retries with
//! exponential backoff, a call transcript and optional audit log. Concrete
//! providers live in [`openai`] (HTTP) and [`mock`] (deterministic, offline).

pub mod backoff;
pub mod extract;
pub mod limiter;
pub mod mock;
pub mod openai;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use backoff::Backoff;
pub use extract::{extract_structured, ExtractError, SchemaId, StructuredPayload};
pub use limiter::Limiter;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self { temperature: 0.7, max_tokens: 2048 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Generate,
    Embed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestBody {
    Generate { prompt: String },
    Embed { inputs: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProviderRequest {
    pub body: RequestBody,
    pub params: SamplingParams,
    pub schema: Option<SchemaId>,
    /// Template variables the prompt was rendered from. Offline providers
    /// read these; they are never sent on the wire.
    pub vars: BTreeMap<String, String>,
}

impl ProviderRequest {
    pub fn generate(prompt: impl Into<String>, params: SamplingParams) -> Self {
        Self {
            body: RequestBody::Generate { prompt: prompt.into() },
            params,
            schema: None,
            vars: BTreeMap::new(),
        }
    }

    pub fn embed(inputs: Vec<String>) -> Self {
        Self {
            body: RequestBody::Embed { inputs },
            params: SamplingParams { temperature: 0.0, max_tokens: 1 },
            schema: None,
            vars: BTreeMap::new(),
        }
    }

    pub fn with_schema(mut self, schema: SchemaId) -> Self {
        self.schema = Some(schema);
        self
    }

    pub fn with_vars(mut self, vars: BTreeMap<String, String>) -> Self {
        self.vars = vars;
        self
    }

    pub fn kind(&self) -> RequestKind {
        match self.body {
            RequestBody::Generate { .. } => RequestKind::Generate,
            RequestBody::Embed { .. } => RequestKind::Embed,
        }
    }

    pub fn prompt(&self) -> Option<&str> {
        match &self.body {
            RequestBody::Generate { prompt } => Some(prompt),
            RequestBody::Embed { .. } => None,
        }
    }

    pub fn var(&self, key: &str) -> Option<&str> {
        self.vars.get(key).map(String::as_str)
    }

    /// Content hash shared by every attempt of this request.
    pub fn idempotency_key(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.body).expect("request body serializes"));
        hasher.update(self.params.temperature.to_bits().to_le_bytes());
        hasher.update(self.params.max_tokens.to_le_bytes());
        if let Some(schema) = self.schema {
            hasher.update(schema.as_str().as_bytes());
        }
        hex::encode(hasher.finalize())
    }

    /// The same request with a parse error appended so the model can fix its reply.
    pub fn corrective(&self, error: &str) -> Self {
        let mut next = self.clone();
        if let RequestBody::Generate { prompt } = &mut next.body {
            prompt.push_str(&format!(
                "\n\nYour previous reply could not be used: {error}\n\
                 Reply again with exactly one fenced ```json block that fixes this problem."
            ));
        }
        next.vars.insert("feedback".into(), error.to_string());
        next
    }

    fn validate(&self) -> Result<(), GatewayError> {
        match &self.body {
            RequestBody::Generate { prompt } if prompt.is_empty() => {
                Err(GatewayError::InvalidRequest("empty prompt".into()))
            }
            RequestBody::Embed { inputs } if inputs.is_empty() => Err(GatewayError::EmptyInput),
            _ if self.params.temperature < 0.0 || !self.params.temperature.is_finite() => Err(
                GatewayError::InvalidRequest(format!("temperature {}", self.params.temperature)),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReplyBody {
    Text(String),
    Vectors(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderReply {
    pub body: ReplyBody,
    pub usage: Usage,
    pub latency: Duration,
    /// Provider attempts spent on this reply (filled in by the gateway).
    pub attempts: u32,
}

impl ProviderReply {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            body: ReplyBody::Text(text.into()),
            usage: Usage::default(),
            latency: Duration::ZERO,
            attempts: 1,
        }
    }

    pub fn vectors(vectors: Vec<Vec<f64>>) -> Self {
        Self {
            body: ReplyBody::Vectors(vectors),
            usage: Usage::default(),
            latency: Duration::ZERO,
            attempts: 1,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match &self.body {
            ReplyBody::Text(t) => Some(t),
            ReplyBody::Vectors(_) => None,
        }
    }
}

/// Failure of one provider attempt.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("rate limited")]
    RateLimited { retry_after: Option<Duration> },
    #[error("provider returned status {status}: {message}")]
    Status { status: u16, message: String },
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("unusable reply: {0}")]
    InvalidReply(String),
    #[error("no scripted reply for request: {0}")]
    Unscripted(String),
}

impl ProviderError {
    pub fn is_transient(&self) -> bool {
        match self {
            ProviderError::RateLimited { .. } | ProviderError::Timeout | ProviderError::Transport(_) => true,
            ProviderError::Status { status, .. } => *status == 408 || *status >= 500,
            ProviderError::InvalidReply(_) | ProviderError::Unscripted(_) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("request timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("provider error{}: {message}", status.map(|s| format!(" (status {s})")).unwrap_or_default())]
    ProviderError { status: Option<u16>, message: String },
    #[error("embedding input is empty")]
    EmptyInput,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed reply: no parseable structured block")]
    Malformed,
    #[error("schema violation: {0}")]
    SchemaViolation(String),
}

impl From<ExtractError> for GatewayError {
    fn from(err: ExtractError) -> Self {
        match err {
            ExtractError::Malformed => GatewayError::Malformed,
            other @ ExtractError::SchemaViolation { .. } => GatewayError::SchemaViolation(other.to_string()),
        }
    }
}

/// A provider backend: one call, one attempt.
pub trait Provider: Send + Sync {
    fn model_id(&self) -> &str;
    fn embedding_model_id(&self) -> &str;
    fn call(&self, request: &ProviderRequest) -> Result<ProviderReply, ProviderError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub key: String,
    pub kind: RequestKind,
    pub schema: Option<SchemaId>,
    pub attempt: u32,
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inputs: Option<Vec<String>>,
    pub outcome: TranscriptOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranscriptOutcome {
    Text(String),
    Vectors { count: usize, dim: usize },
    Error(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageTotals {
    pub generate_calls: u64,
    pub embed_calls: u64,
    pub attempts: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

/// Outcome of a structured call: the validated value and how many
/// generation calls (including a corrective reprompt) it took.
#[derive(Debug, Clone, PartialEq)]
pub struct Validated<T> {
    pub value: T,
    pub calls: u32,
}

pub struct Gateway {
    provider: Arc<dyn Provider>,
    limiter: Limiter,
    backoff: Backoff,
    retry_limit: u32,
    sleeper: Sleeper,
    transcript: Mutex<Vec<TranscriptEntry>>,
    log: Option<Mutex<BufWriter<File>>>,
    generate_calls: AtomicU64,
    embed_calls: AtomicU64,
    attempts: AtomicU64,
    prompt_tokens: AtomicU64,
    completion_tokens: AtomicU64,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("model", &self.provider.model_id())
            .field("max_inflight", &self.limiter.capacity())
            .field("retry_limit", &self.retry_limit)
            .finish()
    }
}

/// Embedding requests are split into chunks of this many inputs.
const EMBED_CHUNK: usize = 128;

impl Gateway {
    pub fn new(provider: Arc<dyn Provider>, retry_limit: u32, max_inflight: usize) -> Self {
        Self {
            provider,
            limiter: Limiter::new(max_inflight.max(1)),
            backoff: Backoff::default(),
            retry_limit,
            sleeper: Arc::new(std::thread::sleep),
            transcript: Mutex::new(Vec::new()),
            log: None,
            generate_calls: AtomicU64::new(0),
            embed_calls: AtomicU64::new(0),
            attempts: AtomicU64::new(0),
            prompt_tokens: AtomicU64::new(0),
            completion_tokens: AtomicU64::new(0),
        }
    }

    pub fn with_backoff(mut self, backoff: Backoff) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn with_sleeper(mut self, sleeper: Sleeper) -> Self {
        self.sleeper = sleeper;
        self
    }

    /// Appends every attempt as one JSON line to `path`.
    pub fn with_log_file(mut self, path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        self.log = Some(Mutex::new(BufWriter::new(file)));
        Ok(self)
    }

    pub fn model_id(&self) -> &str {
        self.provider.model_id()
    }

    pub fn embedding_model_id(&self) -> &str {
        self.provider.embedding_model_id()
    }

    pub fn retry_limit(&self) -> u32 {
        self.retry_limit
    }

    pub fn limiter(&self) -> &Limiter {
        &self.limiter
    }

    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.transcript.lock().unwrap().clone()
    }

    pub fn usage(&self) -> UsageTotals {
        UsageTotals {
            generate_calls: self.generate_calls.load(Ordering::Relaxed),
            embed_calls: self.embed_calls.load(Ordering::Relaxed),
            attempts: self.attempts.load(Ordering::Relaxed),
            prompt_tokens: self.prompt_tokens.load(Ordering::Relaxed),
            completion_tokens: self.completion_tokens.load(Ordering::Relaxed),
        }
    }

    /// One logical generation call, retried on transient failures.
    pub fn generate(&self, request: &ProviderRequest) -> Result<ProviderReply, GatewayError> {
        if request.kind() != RequestKind::Generate {
            return Err(GatewayError::InvalidRequest("generate needs a prompt".into()));
        }
        request.validate()?;
        self.generate_calls.fetch_add(1, Ordering::Relaxed);
        let reply = self.call_with_retry(request)?;
        if reply.as_text().is_none() {
            return Err(GatewayError::ProviderError {
                status: None,
                message: "generation returned vectors".into(),
            });
        }
        Ok(reply)
    }

    /// Embeds `texts`, one vector per input in order.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::EmptyInput);
        }
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(EMBED_CHUNK) {
            let request = ProviderRequest::embed(chunk.to_vec());
            self.embed_calls.fetch_add(1, Ordering::Relaxed);
            let reply = self.call_with_retry(&request)?;
            let ReplyBody::Vectors(vectors) = reply.body else {
                return Err(GatewayError::ProviderError {
                    status: None,
                    message: "embedding returned text".into(),
                });
            };
            if vectors.len() != chunk.len() {
                return Err(GatewayError::ProviderError {
                    status: None,
                    message: format!("{} vectors for {} inputs", vectors.len(), chunk.len()),
                });
            }
            out.extend(vectors);
        }
        let dim = out[0].len();
        if dim == 0 || out.iter().any(|v| v.len() != dim) {
            return Err(GatewayError::ProviderError {
                status: None,
                message: "embedding dimensionality is zero or inconsistent".into(),
            });
        }
        Ok(out)
    }

    /// Generates, then runs `check` on the reply text. A failed check earns
    /// one corrective reprompt carrying the error before it is returned.
    pub fn generate_validated<T, E>(
        &self,
        request: &ProviderRequest,
        mut check: impl FnMut(&str) -> Result<T, E>,
    ) -> Result<Validated<T>, E>
    where
        E: From<GatewayError> + fmt::Display,
    {
        let reply = self.generate(request)?;
        match check(reply.as_text().unwrap_or_default()) {
            Ok(value) => Ok(Validated { value, calls: 1 }),
            Err(first) => {
                let retry = request.corrective(&first.to_string());
                let reply = self.generate(&retry)?;
                let value = check(reply.as_text().unwrap_or_default())?;
                Ok(Validated { value, calls: 2 })
            }
        }
    }

    fn call_with_retry(&self, request: &ProviderRequest) -> Result<ProviderReply, GatewayError> {
        let key = request.idempotency_key();
        let mut schedule = self.backoff.schedule(&key);
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.attempts.fetch_add(1, Ordering::Relaxed);
            let started = Instant::now();
            let result = {
                let _permit = self.limiter.acquire();
                self.provider.call(request)
            };
            self.record(&key, request, attempt, &result);
            match result {
                Ok(mut reply) => {
                    reply.attempts = attempt;
                    if reply.latency.is_zero() {
                        reply.latency = started.elapsed();
                    }
                    self.prompt_tokens.fetch_add(reply.usage.prompt_tokens, Ordering::Relaxed);
                    self.completion_tokens.fetch_add(reply.usage.completion_tokens, Ordering::Relaxed);
                    return Ok(reply);
                }
                Err(err) if err.is_transient() && attempt <= self.retry_limit => {
                    let floor = match &err {
                        ProviderError::RateLimited { retry_after } => *retry_after,
                        _ => None,
                    };
                    let delay = schedule.next_delay(floor);
                    log::debug!("attempt {attempt} failed ({err}); retrying in {delay:?}");
                    (self.sleeper)(delay);
                }
                Err(err) => return Err(exhausted(err, attempt)),
            }
        }
    }

    fn record(
        &self,
        key: &str,
        request: &ProviderRequest,
        attempt: u32,
        result: &Result<ProviderReply, ProviderError>,
    ) {
        let (prompt, inputs) = match &request.body {
            RequestBody::Generate { prompt } => (Some(prompt.clone()), None),
            RequestBody::Embed { inputs } => (None, Some(inputs.clone())),
        };
        let outcome = match result {
            Ok(reply) => match &reply.body {
                ReplyBody::Text(t) => TranscriptOutcome::Text(t.clone()),
                ReplyBody::Vectors(v) => TranscriptOutcome::Vectors {
                    count: v.len(),
                    dim: v.first().map_or(0, Vec::len),
                },
            },
            Err(e) => TranscriptOutcome::Error(e.to_string()),
        };
        let entry = TranscriptEntry {
            key: key.to_string(),
            kind: request.kind(),
            schema: request.schema,
            attempt,
            temperature: request.params.temperature,
            prompt,
            inputs,
            outcome,
        };
        if let Some(log) = &self.log {
            let mut writer = log.lock().unwrap();
            let line = serde_json::to_string(&entry).expect("transcript entry serializes");
            if let Err(err) = writeln!(writer, "{line}").and_then(|_| writer.flush()) {
                log::warn!("failed to append to request log: {err}");
            }
        }
        self.transcript.lock().unwrap().push(entry);
    }
}

fn exhausted(err: ProviderError, attempts: u32) -> GatewayError {
    match err {
        ProviderError::RateLimited { .. } => GatewayError::RateLimited { attempts },
        ProviderError::Timeout => GatewayError::Timeout { attempts },
        ProviderError::Status { status, message } => {
            GatewayError::ProviderError { status: Some(status), message }
        }
        other => GatewayError::ProviderError { status: None, message: other.to_string() },
    }
}

#[cfg(test)]
mod tests {
    use super::mock::{HashEmbedder, MockProvider, Scripted, ScriptedResponder};
    use super::*;

    fn recording_sleeper() -> (Sleeper, Arc<Mutex<Vec<Duration>>>) {
        let slept = Arc::new(Mutex::new(Vec::new()));
        let sink = slept.clone();
        (Arc::new(move |d| sink.lock().unwrap().push(d)), slept)
    }

    fn scripted(outcomes: Vec<Scripted>) -> Arc<MockProvider> {
        let responder = ScriptedResponder::new();
        for o in outcomes {
            responder.push_any(o);
        }
        Arc::new(MockProvider::new(Box::new(responder)))
    }

    fn rate_limited() -> Scripted {
        Scripted::Fail(ProviderError::RateLimited { retry_after: None })
    }

    #[test]
    fn two_rate_limits_then_success() {
        let (sleeper, slept) = recording_sleeper();
        let gw = Gateway::new(scripted(vec![rate_limited(), rate_limited(), Scripted::Reply("ok".into())]), 3, 4)
            .with_sleeper(sleeper);
        let reply = gw.generate(&ProviderRequest::generate("hi", SamplingParams::default())).unwrap();
        assert_eq!(reply.as_text(), Some("ok"));
        assert_eq!(reply.attempts, 3);
        let slept = slept.lock().unwrap();
        assert_eq!(slept.len(), 2);
        assert!(slept[0] <= slept[1]);
        let keys: Vec<_> = gw.transcript().into_iter().map(|e| e.key).collect();
        assert_eq!(keys.len(), 3);
        assert!(keys.iter().all(|k| k == &keys[0]), "retries reuse the idempotency key");
    }

    #[test]
    fn rate_limit_exhaustion() {
        let (sleeper, slept) = recording_sleeper();
        let gw = Gateway::new(scripted(vec![rate_limited(); 5]), 2, 1).with_sleeper(sleeper);
        let err = gw.generate(&ProviderRequest::generate("hi", SamplingParams::default())).unwrap_err();
        assert_eq!(err, GatewayError::RateLimited { attempts: 3 });
        assert_eq!(slept.lock().unwrap().len(), 2);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let gw = Gateway::new(
            scripted(vec![Scripted::Fail(ProviderError::Status { status: 400, message: "bad".into() })]),
            5,
            1,
        );
        let err = gw.generate(&ProviderRequest::generate("hi", SamplingParams::default())).unwrap_err();
        assert_eq!(err, GatewayError::ProviderError { status: Some(400), message: "bad".into() });
        assert_eq!(gw.usage().attempts, 1);
    }

    #[test]
    fn timeouts_surface_after_retries() {
        let (sleeper, _) = recording_sleeper();
        let gw = Gateway::new(scripted(vec![Scripted::Fail(ProviderError::Timeout); 3]), 1, 1)
            .with_sleeper(sleeper);
        let err = gw.generate(&ProviderRequest::generate("hi", SamplingParams::default())).unwrap_err();
        assert_eq!(err, GatewayError::Timeout { attempts: 2 });
    }

    #[test]
    fn empty_embed_input() {
        let gw = Gateway::new(Arc::new(MockProvider::uniform(3)), 0, 1);
        assert_eq!(gw.embed(&[]), Err(GatewayError::EmptyInput));
    }

    #[test]
    fn embeddings_preserve_order_and_dimension() {
        let gw = Gateway::new(Arc::new(MockProvider::uniform(3)), 0, 1);
        let texts: Vec<String> = (0..300).map(|i| format!("text number {i}")).collect();
        let vectors = gw.embed(&texts).unwrap();
        assert_eq!(vectors.len(), 300);
        let embedder = HashEmbedder::default();
        assert_eq!(vectors[299], embedder.embed("text number 299"));
        assert!(vectors.iter().all(|v| v.len() == 256));
    }

    #[test]
    fn validated_call_reprompts_once_with_feedback() {
        let responder = ScriptedResponder::new();
        responder.push_any(Scripted::Reply("no json here".into()));
        responder.push_any(Scripted::Reply("{\"answer\": \"fixed\"}".into()));
        let gw = Gateway::new(Arc::new(MockProvider::new(Box::new(responder))), 0, 1);
        let req = ProviderRequest::generate("q", SamplingParams::default()).with_schema(SchemaId::Answer);
        let out = gw
            .generate_validated(&req, |raw| {
                extract_structured(raw, SchemaId::Answer)
                    .map(|p| p.str_field("answer").unwrap().to_string())
                    .map_err(GatewayError::from)
            })
            .unwrap();
        assert_eq!(out, Validated { value: "fixed".to_string(), calls: 2 });
        let transcript = gw.transcript();
        assert!(transcript[1].prompt.as_ref().unwrap().contains("could not be used"));
    }

    #[test]
    fn log_file_gets_one_line_per_attempt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("requests.jsonl");
        let (sleeper, _) = recording_sleeper();
        let gw = Gateway::new(scripted(vec![rate_limited(), Scripted::Reply("ok".into())]), 2, 1)
            .with_sleeper(sleeper)
            .with_log_file(&path)
            .unwrap();
        gw.generate(&ProviderRequest::generate("hi", SamplingParams::default())).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<TranscriptEntry> =
            text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines, gw.transcript());
    }

    #[test]
    fn negative_temperature_is_rejected() {
        let gw = Gateway::new(Arc::new(MockProvider::uniform(3)), 0, 1);
        let req = ProviderRequest::generate("x", SamplingParams { temperature: -1.0, max_tokens: 5 });
        assert!(matches!(gw.generate(&req), Err(GatewayError::InvalidRequest(_))));
    }
}
