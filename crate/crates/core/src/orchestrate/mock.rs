//! Deterministic local chat-completions server for offline runs and tests.
//!
//! Replies come from an ordered rule list; the first rule whose matchers all
//! hold answers the request. Rules can inject transient failures
//! (`fail_first`, counted per request hash), fixed HTTP errors and latency.
//! Stop sequences are honoured the way hosted providers do it: the reply is
//! cut before the first stop string and the stop string itself is dropped.
//!
//! The server tracks how many requests are in flight at once so tests can
//! assert client-side concurrency limits.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use super::client::{request_hash, ChatRequest};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    /// Matches the request's `model` exactly.
    #[serde(default)]
    pub model: Option<String>,
    /// Substring that must occur in the concatenated message contents.
    #[serde(default)]
    pub contains: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub request_hash: Option<String>,
    #[serde(default)]
    pub reply: String,
    /// Answer with this HTTP status instead of a completion.
    #[serde(default)]
    pub status: Option<u16>,
    /// Answer 503 to the first N attempts of each distinct request.
    #[serde(default)]
    pub fail_first: u32,
    #[serde(default)]
    pub delay_ms: u64,
}

impl MockRule {
    pub fn reply(text: impl Into<String>) -> Self {
        Self {
            reply: text.into(),
            ..Default::default()
        }
    }

    pub fn model(mut self, model: &str) -> Self {
        self.model = Some(model.to_string());
        self
    }

    pub fn containing(mut self, needle: &str) -> Self {
        self.contains = Some(needle.to_string());
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    fn matches(&self, request: &ChatRequest, hash: &str) -> bool {
        let text_ok = self
            .contains
            .as_ref()
            .is_none_or(|needle| request.messages.iter().any(|m| m.content.contains(needle.as_str())));
        self.model.as_ref().is_none_or(|m| *m == request.model)
            && self.seed.is_none_or(|s| Some(s) == request.seed)
            && self.request_hash.as_ref().is_none_or(|h| h == hash)
            && text_ok
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockConfig {
    pub rules: Vec<MockRule>,
    /// Used when no rule matches; without it the server answers 404.
    #[serde(default)]
    pub default_reply: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MockExchange {
    pub request_hash: String,
    pub model: String,
    pub seed: Option<u64>,
    pub status: u16,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MockStats {
    pub requests: usize,
    pub max_in_flight: usize,
}

#[derive(Default)]
struct MockState {
    config: MockConfig,
    attempts: Mutex<HashMap<String, u32>>,
    transcript: Mutex<Vec<MockExchange>>,
    // model of every request, recorded on arrival
    arrivals: Mutex<Vec<String>>,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

struct InFlight<'a>(&'a MockState);

impl<'a> InFlight<'a> {
    fn enter(state: &'a MockState) -> Self {
        let now = state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        state.max_in_flight.fetch_max(now, Ordering::SeqCst);
        InFlight(state)
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

fn apply_stop(reply: &str, stop: &[String]) -> String {
    let cut = stop
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| reply.find(s.as_str()))
        .min()
        .unwrap_or(reply.len());
    reply[..cut].to_string()
}

fn error_body(status: StatusCode, message: &str) -> Response {
    (status, Json(serde_json::json!({"error": {"message": message}}))).into_response()
}

async fn completions(State(state): State<Arc<MockState>>, Json(request): Json<ChatRequest>) -> Response {
    let _guard = InFlight::enter(&state);
    state.arrivals.lock().expect("mock lock").push(request.model.clone());
    let hash = request_hash(&request);
    let attempt = {
        let mut attempts = state.attempts.lock().expect("mock lock");
        let n = attempts.entry(hash.clone()).or_insert(0);
        *n += 1;
        *n
    };

    let rule = state.config.rules.iter().find(|r| r.matches(&request, &hash));
    if let Some(delay) = rule.map(|r| r.delay_ms).filter(|d| *d > 0) {
        tokio::time::sleep(Duration::from_millis(delay)).await;
    }

    let (status, response) = match rule {
        Some(r) if attempt <= r.fail_first => (503, error_body(StatusCode::SERVICE_UNAVAILABLE, "injected failure")),
        Some(r) if r.status.is_some() => {
            let code = StatusCode::from_u16(r.status.unwrap_or(500)).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            (code.as_u16(), error_body(code, "injected status"))
        }
        Some(r) => (200, completion_body(&request, &hash, &r.reply)),
        None => match &state.config.default_reply {
            Some(reply) => (200, completion_body(&request, &hash, reply)),
            None => (404, error_body(StatusCode::NOT_FOUND, "no canned reply for request")),
        },
    };
    state.transcript.lock().expect("mock lock").push(MockExchange {
        request_hash: hash,
        model: request.model.clone(),
        seed: request.seed,
        status,
    });
    response
}

fn completion_body(request: &ChatRequest, hash: &str, reply: &str) -> Response {
    let content = apply_stop(reply, &request.stop);
    Json(serde_json::json!({
        "id": format!("mock-{}", &hash[..16]),
        "object": "chat.completion",
        "model": request.model,
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": content},
            "finish_reason": "stop"
        }]
    }))
    .into_response()
}

async fn stats(State(state): State<Arc<MockState>>) -> Json<MockStats> {
    Json(snapshot(&state))
}

fn snapshot(state: &MockState) -> MockStats {
    MockStats {
        requests: state.transcript.lock().expect("mock lock").len(),
        max_in_flight: state.max_in_flight.load(Ordering::SeqCst),
    }
}

fn router(state: Arc<MockState>) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(completions))
        .route("/chat/completions", post(completions))
        .route("/stats", get(stats))
        .with_state(state)
}

/// A running mock server. Dropping it shuts the server down.
pub struct MockServer {
    addr: SocketAddr,
    state: Arc<MockState>,
    shutdown: Option<oneshot::Sender<()>>,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Binds `127.0.0.1` on an ephemeral port.
    pub async fn start(config: MockConfig) -> std::io::Result<Self> {
        Self::bind(config, SocketAddr::from(([127, 0, 0, 1], 0))).await
    }

    pub async fn bind(config: MockConfig, addr: SocketAddr) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let state = Arc::new(MockState {
            config,
            ..Default::default()
        });
        let (tx, rx) = oneshot::channel();
        let app = router(state.clone());
        let handle = tokio::spawn(async move {
            let server = axum::serve(listener, app).with_graceful_shutdown(async {
                let _ = rx.await;
            });
            if let Err(e) = server.await {
                tracing::error!(error = %e, "mock server stopped");
            }
        });
        Ok(Self {
            addr,
            state,
            shutdown: Some(tx),
            handle: Some(handle),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL suitable for `ChatClientConfig::endpoint_url`.
    pub fn url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn stats(&self) -> MockStats {
        snapshot(&self.state)
    }

    pub fn transcript(&self) -> Vec<MockExchange> {
        self.state.transcript.lock().expect("mock lock").clone()
    }

    /// Number of requests seen for `model` (all attempts, all statuses).
    pub fn requests_for_model(&self, model: &str) -> usize {
        self.transcript().iter().filter(|e| e.model == model).count()
    }

    /// Requests for `model` that have arrived, including ones still being
    /// answered.
    pub fn received_for_model(&self, model: &str) -> usize {
        self.state
            .arrivals
            .lock()
            .expect("mock lock")
            .iter()
            .filter(|m| *m == model)
            .count()
    }

    /// Runs until the server task ends (used by the CLI's foreground mode).
    pub async fn wait(mut self) {
        if let Some(handle) = self.handle.take() {
            let _ = handle.await;
        }
    }

    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(handle) = self.handle.take() {
            let _ = handle.await;
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}
