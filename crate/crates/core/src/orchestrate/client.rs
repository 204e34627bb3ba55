//! Chat-completions client with bounded retries, a concurrency cap and an
//! optional request journal.

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use super::journal::Journal;
use crate::sha256_hex;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

/// One logical model call: the conversation plus per-call options.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChatCall {
    pub messages: Vec<ChatMessage>,
    pub seed: Option<u64>,
    /// Stop sequences added on top of the client's configured ones.
    pub extra_stop: Vec<String>,
}

impl ChatCall {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            ..Default::default()
        }
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_stop(mut self, stop: &str) -> Self {
        self.extra_stop.push(stop.to_string());
        self
    }
}

/// Request body on the wire. Field order is fixed, so its JSON encoding is
/// also the request's identity (see [`request_hash`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stop: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

pub fn request_hash(request: &ChatRequest) -> String {
    sha256_hex(serde_json::to_vec(request).expect("request serializes"))
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Debug, Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("invalid client configuration: {0}")]
    Config(String),
    #[error("endpoint unreachable after {attempts} attempt(s): {detail}")]
    Transport { attempts: u32, detail: String },
    #[error("endpoint answered HTTP {status} after {attempts} attempt(s): {body}")]
    Status { status: u16, attempts: u32, body: String },
    #[error("malformed chat-completions response: {0}")]
    Decode(String),
    #[error("request journal: {0}")]
    Journal(#[from] std::io::Error),
}

fn default_max_tokens() -> u32 {
    2048
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff() -> f64 {
    0.5
}
fn default_concurrency() -> usize {
    4
}
fn default_timeout() -> f64 {
    120.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatClientConfig {
    /// Base URL (`http://host:port/v1`) or the full `/chat/completions` URL.
    pub endpoint_url: String,
    pub model_name: String,
    /// Name of the environment variable holding a bearer token, if any.
    #[serde(default)]
    pub api_key_env_var: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_base_seconds: f64,
    #[serde(default = "default_concurrency")]
    pub concurrency_limit: usize,
    #[serde(default = "default_timeout")]
    pub request_timeout_seconds: f64,
}

impl ChatClientConfig {
    pub fn new(endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            endpoint_url: endpoint_url.into(),
            model_name: model_name.into(),
            api_key_env_var: None,
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            stop_sequences: Vec::new(),
            max_retries: default_max_retries(),
            backoff_base_seconds: default_backoff(),
            concurrency_limit: default_concurrency(),
            request_timeout_seconds: default_timeout(),
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        let fail = |m: &str| Err(ClientError::Config(m.to_string()));
        if self.endpoint_url.is_empty() || self.model_name.is_empty() {
            return fail("endpoint_url and model_name are required");
        }
        if !(self.temperature >= 0.0) {
            return fail("temperature must be >= 0");
        }
        if self.max_tokens == 0 {
            return fail("max_tokens must be positive");
        }
        if !(self.backoff_base_seconds > 0.0) {
            return fail("backoff_base_seconds must be positive");
        }
        if self.concurrency_limit == 0 {
            return fail("concurrency_limit must be >= 1");
        }
        if !(self.request_timeout_seconds > 0.0) {
            return fail("request_timeout_seconds must be positive");
        }
        Ok(())
    }

    pub fn completions_url(&self) -> String {
        let base = self.endpoint_url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }

    /// Wire request for `call` under this configuration.
    pub fn build_request(&self, call: &ChatCall) -> ChatRequest {
        let mut stop = self.stop_sequences.clone();
        for s in &call.extra_stop {
            if !stop.contains(s) {
                stop.push(s.clone());
            }
        }
        ChatRequest {
            model: self.model_name.clone(),
            messages: call.messages.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            stop,
            seed: call.seed,
        }
    }
}

/// Anything that turns a conversation into a completion text.
#[async_trait]
pub trait ChatModel: Send + Sync {
    async fn complete(&self, call: &ChatCall) -> Result<String, ClientError>;
}

/// Chat-completions over HTTP.
pub struct HttpChatClient {
    config: ChatClientConfig,
    http: reqwest::Client,
    api_key: Option<String>,
    permits: Arc<Semaphore>,
    journal: Option<Arc<Journal>>,
}

impl HttpChatClient {
    pub fn new(config: ChatClientConfig) -> Result<Self, ClientError> {
        config.validate()?;
        let api_key = match &config.api_key_env_var {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| ClientError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(config.request_timeout_seconds))
            .build()
            .map_err(|e| ClientError::Config(e.to_string()))?;
        Ok(Self {
            permits: Arc::new(Semaphore::new(config.concurrency_limit)),
            config,
            http,
            api_key,
            journal: None,
        })
    }

    /// Serves previously completed requests from `journal` and records new ones.
    pub fn with_journal(mut self, journal: Arc<Journal>) -> Self {
        self.journal = Some(journal);
        self
    }

    pub fn config(&self) -> &ChatClientConfig {
        &self.config
    }

    async fn send_once(&self, request: &ChatRequest) -> Result<String, Attempt> {
        let _permit = self.permits.acquire().await.expect("semaphore never closed");
        let mut builder = self.http.post(self.config.completions_url()).json(request);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().await.map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().await.unwrap_or_default();
            let code = status.as_u16();
            return Err(if code == 408 || code == 429 || status.is_server_error() {
                Attempt::RetryStatus(code, body)
            } else {
                Attempt::Fatal(code, body)
            });
        }
        let parsed: ChatResponse = response.json().await.map_err(|e| Attempt::Decode(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Attempt::Decode("response has no message content".into()))
    }
}

enum Attempt {
    Retry(String),
    RetryStatus(u16, String),
    Fatal(u16, String),
    Decode(String),
}

#[async_trait]
impl ChatModel for HttpChatClient {
    async fn complete(&self, call: &ChatCall) -> Result<String, ClientError> {
        let request = self.config.build_request(call);
        let hash = request_hash(&request);
        if let Some(reply) = self.journal.as_ref().and_then(|j| j.get(&hash)) {
            tracing::debug!(%hash, "served from journal");
            return Ok(reply);
        }

        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let outcome = self.send_once(&request).await;
            let retryable = match &outcome {
                Ok(reply) => {
                    if let Some(journal) = &self.journal {
                        journal.record(&hash, &request, reply)?;
                    }
                    return Ok(reply.clone());
                }
                Err(Attempt::Retry(_) | Attempt::RetryStatus(..)) => attempt <= self.config.max_retries,
                Err(_) => false,
            };
            if !retryable {
                return Err(match outcome {
                    Err(Attempt::Retry(detail)) => ClientError::Transport {
                        attempts: attempt,
                        detail,
                    },
                    Err(Attempt::RetryStatus(status, body) | Attempt::Fatal(status, body)) => ClientError::Status {
                        status,
                        attempts: attempt,
                        body,
                    },
                    Err(Attempt::Decode(detail)) => ClientError::Decode(detail),
                    Ok(_) => unreachable!("success returns early"),
                });
            }
            let delay = self.config.backoff_base_seconds * 2f64.powi(attempt as i32 - 1);
            tracing::warn!(attempt, delay, model = %self.config.model_name, "retrying chat request");
            tokio::time::sleep(Duration::from_secs_f64(delay)).await;
        }
    }
}
