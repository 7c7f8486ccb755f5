//! Offline providers whose replies depend only on request content.
//!
//! Responders read the template variables attached to each request (the
//! `stage` variable names the pipeline step) and answer with well-formed
//! fenced JSON. Embeddings come from a seeded hashed bag of tokens.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{Provider, ProviderError, ProviderReply, ProviderRequest, RequestBody};
use crate::quality::tokenize;
use crate::templates::vars;

pub const MOCK_EMBEDDING_DIM: usize = 256;

fn digest(parts: &[&[u8]]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    hasher.finalize().into()
}

fn hash64(parts: &[&[u8]]) -> u64 {
    let d = digest(parts);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn rng_for(parts: &[&[u8]]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(digest(parts))
}

/// Seeded hashed bag-of-tokens embedder, L2-normalized.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    pub seed: u64,
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { seed: 0, dim: MOCK_EMBEDDING_DIM }
    }
}

impl HashEmbedder {
    pub fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let mut tokens = tokenize(text);
        if tokens.is_empty() {
            tokens.push(String::new());
        }
        let seed = self.seed.to_le_bytes();
        for token in &tokens {
            let h = hash64(&[&seed, token.as_bytes()]);
            let idx = (h % self.dim as u64) as usize;
            let sign = if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
            v[idx] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

/// Produces the raw reply text for a generation request.
pub trait Responder: Send + Sync {
    fn respond(&self, request: &ProviderRequest) -> Result<String, ProviderError>;
}

fn fenced(value: Value) -> String {
    format!("```json\n{}\n```", serde_json::to_string_pretty(&value).unwrap())
}

fn var<'a>(request: &'a ProviderRequest, key: &str) -> &'a str {
    request.var(key).unwrap_or("")
}

fn count_var(request: &ProviderRequest) -> usize {
    var(request, vars::COUNT).parse().unwrap_or(1)
}

fn depth_var(request: &ProviderRequest) -> usize {
    var(request, vars::DEPTH).parse().unwrap_or(0)
}

fn constraint_pairs(description: &str) -> Vec<(String, String)> {
    let Some((_, tail)) = description.split_once("; constrained by: ") else {
        return Vec::new();
    };
    tail.split("; ")
        .filter_map(|part| part.split_once(" = "))
        .map(|(d, v)| (d.to_string(), v.to_string()))
        .collect()
}

/// Splits every node into the same `branching` values, one fresh dimension
/// per depth.
#[derive(Debug, Clone)]
pub struct UniformResponder {
    pub branching: usize,
}

impl UniformResponder {
    pub fn new(branching: usize) -> Self {
        Self { branching }
    }

    fn labels(&self) -> Vec<String> {
        (0..self.branching).map(|k| format!("value {k}")).collect()
    }
}

fn dimension_reply(name: String, labels: &[String], pivots: usize) -> String {
    let observed = pivots.min(labels.len());
    let assignment: Vec<Value> = (0..pivots)
        .map(|i| json!({"sample": i + 1, "values": [labels[i % observed]]}))
        .collect();
    fenced(json!({
        "dimension": name,
        "rationale": "separates the pivot samples",
        "values": labels[..observed],
        "assignment": assignment,
    }))
}

impl Responder for UniformResponder {
    fn respond(&self, request: &ProviderRequest) -> Result<String, ProviderError> {
        let description = var(request, vars::DESCRIPTION);
        let reply = match var(request, vars::STAGE) {
            "pivot" => {
                let samples: Vec<String> = (0..count_var(request))
                    .map(|i| format!("pivot {i} of [{description}]"))
                    .collect();
                fenced(json!({ "samples": samples }))
            }
            "dimension" => dimension_reply(
                format!("axis {}", depth_var(request)),
                &self.labels(),
                count_var(request),
            ),
            "coverage" => fenced(json!({ "values": self.labels(), "unbounded": false })),
            "draw" => {
                let values: Vec<String> =
                    (0..count_var(request)).map(|i| format!("drawn {i}")).collect();
                fenced(json!({ "values": values }))
            }
            "sample" => {
                let batch = var(request, vars::BATCH);
                let samples: Vec<String> = (0..count_var(request))
                    .map(|i| format!("{description} | batch {batch} | sample {i}"))
                    .collect();
                fenced(json!({ "samples": samples }))
            }
            "answer" => fenced(json!({
                "answer": format!("Answer for: {}", var(request, vars::INSTRUCTION))
            })),
            other => return Err(ProviderError::Unscripted(format!("unknown stage `{other}`"))),
        };
        Ok(reply)
    }
}

/// Mock whose leaf samples cluster around their subspace while unconstrained
/// samples all come from one shared mode.
#[derive(Debug, Clone)]
pub struct SubspaceResponder {
    pub branching: usize,
    pub seed: u64,
}

impl SubspaceResponder {
    pub fn new(branching: usize, seed: u64) -> Self {
        Self { branching, seed }
    }

    fn word(&self, parts: &[&[u8]]) -> String {
        let seed = self.seed.to_le_bytes();
        let mut all: Vec<&[u8]> = vec![&seed];
        all.extend_from_slice(parts);
        format!("w{:x}", hash64(&all) & 0xff_ffff)
    }

    fn pool(&self, tag: &str, size: usize) -> Vec<String> {
        (0..size).map(|j| self.word(&[tag.as_bytes(), &(j as u64).to_le_bytes()])).collect()
    }

    fn sample_text(&self, description: &str, rng: &mut ChaCha8Rng) -> String {
        let constraints = constraint_pairs(description);
        let mut words: Vec<String> = Vec::new();
        if constraints.is_empty() {
            let mode = self.pool("global-mode", 10);
            words.extend(mode.choose_multiple(rng, 8).cloned());
        } else {
            for (dim, value) in &constraints {
                let pool = self.pool(&format!("{dim}={value}"), 6);
                words.extend(pool.choose_multiple(rng, 4).cloned());
            }
            let task = self.pool("task", 4);
            words.extend(task.choose_multiple(rng, 2).cloned());
        }
        for _ in 0..2 {
            words.push(format!("n{:x}", rng.gen::<u32>()));
        }
        words.shuffle(rng);
        words.join(" ")
    }
}

impl Responder for SubspaceResponder {
    fn respond(&self, request: &ProviderRequest) -> Result<String, ProviderError> {
        let description = var(request, vars::DESCRIPTION);
        let labels = |depth: usize| -> Vec<String> {
            (0..self.branching).map(|k| format!("facet {depth} option {k}")).collect()
        };
        let reply = match var(request, vars::STAGE) {
            "pivot" => {
                let mut rng = rng_for(&[b"pivot", description.as_bytes()]);
                let samples: Vec<String> =
                    (0..count_var(request)).map(|_| self.sample_text(description, &mut rng)).collect();
                fenced(json!({ "samples": samples }))
            }
            "dimension" => {
                let depth = depth_var(request);
                dimension_reply(format!("facet {depth}"), &labels(depth), count_var(request))
            }
            "coverage" => {
                let depth = var(request, vars::DIMENSION)
                    .trim_start_matches("facet ")
                    .parse()
                    .unwrap_or(0);
                fenced(json!({ "values": labels(depth), "unbounded": false }))
            }
            "draw" => {
                let dim = var(request, vars::DIMENSION);
                let values: Vec<String> =
                    (0..count_var(request)).map(|i| format!("{dim} draw {i}")).collect();
                fenced(json!({ "values": values }))
            }
            "sample" => {
                let batch = var(request, vars::BATCH);
                let mut rng = rng_for(&[b"sample", description.as_bytes(), batch.as_bytes()]);
                let samples: Vec<String> =
                    (0..count_var(request)).map(|_| self.sample_text(description, &mut rng)).collect();
                fenced(json!({ "samples": samples }))
            }
            "answer" => fenced(json!({
                "answer": format!("Worked solution: {}", var(request, vars::INSTRUCTION))
            })),
            other => return Err(ProviderError::Unscripted(format!("unknown stage `{other}`"))),
        };
        Ok(reply)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scripted {
    Reply(String),
    Fail(ProviderError),
}

#[derive(Default)]
struct ScriptState {
    by_prompt: HashMap<String, String>,
    by_stage: HashMap<String, VecDeque<Scripted>>,
    any: VecDeque<Scripted>,
    rules: Vec<(String, Scripted)>,
}

/// Replays scripted outcomes.
///
/// Lookup order: standing rules matched on a prompt substring, exact prompt
/// hash, the per-stage queue, the shared queue, then the fallback responder.
#[derive(Default)]
pub struct ScriptedResponder {
    state: Mutex<ScriptState>,
    fallback: Option<Box<dyn Responder>>,
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

impl ScriptedResponder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fallback(mut self, fallback: Box<dyn Responder>) -> Self {
        self.fallback = Some(fallback);
        self
    }

    pub fn reply_to_prompt(&self, prompt: &str, reply: impl Into<String>) {
        self.state.lock().unwrap().by_prompt.insert(prompt_hash(prompt), reply.into());
    }

    pub fn push_stage(&self, stage: &str, outcome: Scripted) {
        self.state
            .lock()
            .unwrap()
            .by_stage
            .entry(stage.to_string())
            .or_default()
            .push_back(outcome);
    }

    pub fn push_any(&self, outcome: Scripted) {
        self.state.lock().unwrap().any.push_back(outcome);
    }

    /// Every prompt containing `needle` gets `outcome`, indefinitely.
    pub fn rule(&self, needle: impl Into<String>, outcome: Scripted) {
        self.state.lock().unwrap().rules.push((needle.into(), outcome));
    }
}

impl Responder for ScriptedResponder {
    fn respond(&self, request: &ProviderRequest) -> Result<String, ProviderError> {
        let prompt = request.prompt().unwrap_or_default();
        let scripted = {
            let mut state = self.state.lock().unwrap();
            let stage = request.var(vars::STAGE).unwrap_or_default().to_string();
            if let Some((_, o)) = state.rules.iter().find(|(needle, _)| prompt.contains(needle.as_str())) {
                Some(o.clone())
            } else if let Some(reply) = state.by_prompt.get(&prompt_hash(prompt)) {
                Some(Scripted::Reply(reply.clone()))
            } else if let Some(o) = state.by_stage.get_mut(&stage).and_then(VecDeque::pop_front) {
                Some(o)
            } else {
                state.any.pop_front()
            }
        };
        match scripted {
            Some(Scripted::Reply(text)) => Ok(text),
            Some(Scripted::Fail(err)) => Err(err),
            None => match &self.fallback {
                Some(fallback) => fallback.respond(request),
                None => Err(ProviderError::Unscripted(prompt_hash(prompt))),
            },
        }
    }
}

/// Provider backed by a [`Responder`] and a [`HashEmbedder`]. Tracks
/// concurrent calls so tests can assert admission bounds.
pub struct MockProvider {
    responder: Box<dyn Responder>,
    embedder: HashEmbedder,
    model: String,
    latency: Duration,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

impl MockProvider {
    pub fn new(responder: Box<dyn Responder>) -> Self {
        Self {
            responder,
            embedder: HashEmbedder::default(),
            model: "mock".into(),
            latency: Duration::ZERO,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }

    pub fn uniform(branching: usize) -> Self {
        Self::new(Box::new(UniformResponder::new(branching))).named("mock-uniform")
    }

    pub fn subspace(branching: usize, seed: u64) -> Self {
        Self::new(Box::new(SubspaceResponder::new(branching, seed))).named("mock-subspace")
    }

    pub fn named(mut self, model: impl Into<String>) -> Self {
        self.model = model.into();
        self
    }

    /// Each call sleeps this long while counted as in flight.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn with_embedder(mut self, embedder: HashEmbedder) -> Self {
        self.embedder = embedder;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

impl Provider for MockProvider {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn embedding_model_id(&self) -> &str {
        "mock-hash-bag-256"
    }

    fn call(&self, request: &ProviderRequest) -> Result<ProviderReply, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        let result = match &request.body {
            RequestBody::Generate { .. } => self.responder.respond(request).map(ProviderReply::text),
            RequestBody::Embed { inputs } => Ok(ProviderReply::vectors(
                inputs.iter().map(|t| self.embedder.embed(t)).collect(),
            )),
        };
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }
}
