//! OpenAI-compatible chat-completions and embeddings over HTTP.

use std::time::{Duration, Instant};

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{Provider, ProviderError, ProviderReply, ProviderRequest, ReplyBody, RequestBody, Usage};

#[derive(Debug, Clone)]
pub struct OpenAiConfig {
    /// Base URL, e.g. `https://api.openai.com/v1`.
    pub endpoint: String,
    pub model: String,
    pub embedding_model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

pub struct OpenAiProvider {
    config: OpenAiConfig,
    client: Client,
}

impl OpenAiProvider {
    pub fn new(config: OpenAiConfig) -> Result<Self, ProviderError> {
        let client = Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(Self { config, client })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.config.endpoint.trim_end_matches('/'))
    }
}

/// JSON body for a request, as sent on the wire.
pub fn wire_payload(model: &str, embedding_model: &str, request: &ProviderRequest) -> Value {
    match &request.body {
        RequestBody::Generate { prompt } => json!({
            "model": model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": request.params.temperature,
            "max_tokens": request.params.max_tokens,
        }),
        RequestBody::Embed { inputs } => json!({
            "model": embedding_model,
            "input": inputs,
        }),
    }
}

fn parse_chat(body: &Value) -> Result<(String, Usage), ProviderError> {
    let text = body
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| ProviderError::InvalidReply("missing choices[0].message.content".into()))?;
    Ok((text.to_string(), parse_usage(body)))
}

fn parse_embeddings(body: &Value) -> Result<(Vec<Vec<f64>>, Usage), ProviderError> {
    let data = body
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| ProviderError::InvalidReply("missing data array".into()))?;
    let mut indexed = Vec::with_capacity(data.len());
    for (pos, item) in data.iter().enumerate() {
        let index = item.get("index").and_then(Value::as_u64).map_or(pos, |i| i as usize);
        let vector = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::InvalidReply("missing embedding".into()))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| ProviderError::InvalidReply("non-numeric embedding".into())))
            .collect::<Result<Vec<f64>, _>>()?;
        indexed.push((index, vector));
    }
    indexed.sort_by_key(|(i, _)| *i);
    Ok((indexed.into_iter().map(|(_, v)| v).collect(), parse_usage(body)))
}

fn parse_usage(body: &Value) -> Usage {
    let field = |k: &str| body.pointer(&format!("/usage/{k}")).and_then(Value::as_u64).unwrap_or(0);
    Usage { prompt_tokens: field("prompt_tokens"), completion_tokens: field("completion_tokens") }
}

impl Provider for OpenAiProvider {
    fn model_id(&self) -> &str {
        &self.config.model
    }

    fn embedding_model_id(&self) -> &str {
        &self.config.embedding_model
    }

    fn call(&self, request: &ProviderRequest) -> Result<ProviderReply, ProviderError> {
        let path = match request.body {
            RequestBody::Generate { .. } => "chat/completions",
            RequestBody::Embed { .. } => "embeddings",
        };
        let payload = wire_payload(&self.config.model, &self.config.embedding_model, request);
        let mut http = self
            .client
            .post(self.url(path))
            .header("Idempotency-Key", request.idempotency_key())
            .json(&payload);
        if let Some(key) = &self.config.api_key {
            http = http.bearer_auth(key);
        }
        let started = Instant::now();
        let response = http.send().map_err(|e| {
            if e.is_timeout() {
                ProviderError::Timeout
            } else {
                ProviderError::Transport(e.to_string())
            }
        })?;
        let status = response.status();
        if status == StatusCode::TOO_MANY_REQUESTS {
            let retry_after = response
                .headers()
                .get("retry-after")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<f64>().ok())
                .map(Duration::from_secs_f64);
            return Err(ProviderError::RateLimited { retry_after });
        }
        let text = response.text().map_err(|e| {
            if e.is_timeout() {
                ProviderError::Timeout
            } else {
                ProviderError::Transport(e.to_string())
            }
        })?;
        if !status.is_success() {
            return Err(ProviderError::Status { status: status.as_u16(), message: text });
        }
        let body: Value = serde_json::from_str(&text)
            .map_err(|e| ProviderError::InvalidReply(format!("reply is not JSON: {e}")))?;
        let (reply_body, usage) = match request.body {
            RequestBody::Generate { .. } => {
                let (text, usage) = parse_chat(&body)?;
                (ReplyBody::Text(text), usage)
            }
            RequestBody::Embed { .. } => {
                let (vectors, usage) = parse_embeddings(&body)?;
                (ReplyBody::Vectors(vectors), usage)
            }
        };
        Ok(ProviderReply { body: reply_body, usage, latency: started.elapsed(), attempts: 1 })
    }
}
