//! Blocking batch client for chat-completions HTTP endpoints.
//!
//! Requests use the common `{model, messages, temperature, max_tokens,
//! stream}` shape. Streaming responses are server-sent event lines whose
//! `data:` payloads carry `choices[0].delta.content`. Timeouts, 429 and 5xx
//! responses and connection failures are retried with exponential backoff
//! and jitter. The batch runner keeps at most `max_parallel_requests`
//! requests in flight and returns transcripts in input order.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::BriefingRecord;
use crate::eval::RawOutput;
use crate::promptkit::{few_shot_augment, render_user_prompt, ChatMessage, Exemplar, PromptError, PromptTemplates, Role};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InferError {
    #[error("request has no messages")]
    EmptyMessages,
    #[error("unknown message role {0:?}")]
    UnknownRole(String),
    #[error("environment variable {0} holding the api key is not set")]
    AuthMissing(String),
    #[error("invalid endpoint config: {0}")]
    InvalidConfig(String),
    #[error("request timed out")]
    Timeout,
    #[error("http status {status}")]
    HttpError { status: u16 },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("completion is empty")]
    EmptyCompletion,
    #[error("gave up after {attempts} attempts: {last}")]
    ExhaustedRetries { attempts: u32, last: Box<InferError> },
}

impl InferError {
    pub fn is_retryable(&self) -> bool {
        match self {
            InferError::Timeout | InferError::Transport(_) => true,
            InferError::HttpError { status } => *status == 429 || (500..600).contains(status),
            _ => false,
        }
    }
}

fn default_temperature() -> f64 {
    0.0
}
fn default_max_output_tokens() -> u32 {
    1024
}
fn default_timeout() -> f64 {
    120.0
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff() -> f64 {
    1.0
}
fn default_backoff_cap() -> f64 {
    30.0
}
fn default_parallel() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// Base URL up to and including the API version, e.g. `http://localhost:11434/v1`.
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token. No
    /// `Authorization` header is sent when unset.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    #[serde(default)]
    pub stream: bool,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_base_secs: f64,
    #[serde(default = "default_backoff_cap")]
    pub backoff_max_secs: f64,
    #[serde(default = "default_parallel")]
    pub max_parallel_requests: usize,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key_env: None,
            temperature: default_temperature(),
            max_output_tokens: default_max_output_tokens(),
            stream: false,
            timeout_secs: default_timeout(),
            max_retries: default_max_retries(),
            backoff_base_secs: default_backoff(),
            backoff_max_secs: default_backoff_cap(),
            max_parallel_requests: default_parallel(),
        }
    }

    pub fn check(&self) -> Result<(), InferError> {
        let bad = |m: &str| Err(InferError::InvalidConfig(m.to_string()));
        if self.max_parallel_requests < 1 {
            return bad("max_parallel_requests must be at least 1");
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad("temperature must be a non-negative number");
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return bad("timeout_secs must be positive");
        }
        if !(self.backoff_base_secs.is_finite() && self.backoff_base_secs >= 0.0 && self.backoff_max_secs >= 0.0) {
            return bad("backoff must be non-negative");
        }
        if self.base_url.trim().is_empty() {
            return bad("base_url is empty");
        }
        Ok(())
    }

    pub fn endpoint_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }

    /// Backoff before retry number `retry` (1-based), without jitter.
    pub fn backoff(&self, retry: u32) -> Duration {
        let secs = self.backoff_base_secs * 2f64.powi(retry.saturating_sub(1).min(30) as i32);
        Duration::from_secs_f64(secs.min(self.backoff_max_secs))
    }
}

/// Builds the wire document. `messages` are (role, content) pairs.
pub fn build_request<R: AsRef<str>, C: AsRef<str>>(
    messages: &[(R, C)],
    cfg: &EndpointConfig,
    stream: bool,
) -> Result<Value, InferError> {
    if messages.is_empty() {
        return Err(InferError::EmptyMessages);
    }
    let msgs = messages
        .iter()
        .map(|(role, content)| {
            let role = Role::parse(role.as_ref()).ok_or_else(|| InferError::UnknownRole(role.as_ref().to_string()))?;
            Ok(json!({"role": role.as_str(), "content": content.as_ref()}))
        })
        .collect::<Result<Vec<_>, InferError>>()?;
    Ok(json!({
        "model": cfg.model_name,
        "messages": msgs,
        "temperature": cfg.temperature,
        "max_tokens": cfg.max_output_tokens,
        "stream": stream,
    }))
}

pub fn chat_pairs(messages: &[ChatMessage]) -> Vec<(&'static str, &str)> {
    messages.iter().map(|m| (m.role.as_str(), m.content.as_str())).collect()
}

struct ApiKey(String);

impl fmt::Debug for ApiKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ApiKey(<redacted>)")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatOutcome {
    pub result: Result<String, InferError>,
    pub attempts: u32,
}

#[derive(Debug)]
pub struct ChatClient {
    config: EndpointConfig,
    agent: ureq::Agent,
    api_key: Option<ApiKey>,
}

impl ChatClient {
    /// Reads the api key from the configured environment variable.
    pub fn new(config: EndpointConfig) -> Result<Self, InferError> {
        let key = match &config.api_key_env {
            Some(var) => match std::env::var(var) {
                Ok(v) if !v.is_empty() => Some(v),
                _ => return Err(InferError::AuthMissing(var.clone())),
            },
            None => None,
        };
        ChatClient::with_api_key(config, key)
    }

    pub fn with_api_key(config: EndpointConfig, api_key: Option<String>) -> Result<Self, InferError> {
        config.check()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(ChatClient { config, agent, api_key: api_key.map(ApiKey) })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    /// One request with retries.
    pub fn chat(&self, request: &Value) -> ChatOutcome {
        let max_attempts = 1 + self.config.max_retries;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.send_once(request) {
                Ok(text) => return ChatOutcome { result: Ok(text), attempts },
                Err(e) if e.is_retryable() && attempts < max_attempts => {
                    let base = self.config.backoff(attempts);
                    let jitter = rand::rng().random_range(0.0..=1.0) * base.as_secs_f64();
                    log::debug!("attempt {attempts} failed ({e}); retrying");
                    std::thread::sleep(base + Duration::from_secs_f64(jitter.min(self.config.backoff_max_secs)));
                }
                Err(e) if e.is_retryable() => {
                    return ChatOutcome {
                        result: Err(InferError::ExhaustedRetries { attempts, last: Box::new(e) }),
                        attempts,
                    }
                }
                Err(e) => return ChatOutcome { result: Err(e), attempts },
            }
        }
    }

    fn send_once(&self, request: &Value) -> Result<String, InferError> {
        let mut req = self.agent.post(&self.config.endpoint_url()).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {}", key.0));
        }
        let mut resp = req.send_json(request).map_err(map_ureq)?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(InferError::HttpError { status });
        }
        let streaming = request.get("stream").and_then(Value::as_bool).unwrap_or(false);
        if streaming {
            read_stream(BufReader::new(resp.body_mut().as_reader()))
        } else {
            let body = resp.body_mut().read_to_string().map_err(map_ureq)?;
            parse_completion(&body)
        }
    }
}

fn map_ureq(e: ureq::Error) -> InferError {
    match e {
        ureq::Error::Timeout(_) => InferError::Timeout,
        ureq::Error::StatusCode(status) => InferError::HttpError { status },
        ureq::Error::Io(io) => map_io(io),
        ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => InferError::Transport(e.to_string()),
        other => InferError::Transport(other.to_string()),
    }
}

fn map_io(e: std::io::Error) -> InferError {
    match e.kind() {
        std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock => InferError::Timeout,
        _ => {
            // ureq wraps its own errors (timeouts included) in io errors on body reads.
            match e.get_ref().and_then(|inner| inner.downcast_ref::<ureq::Error>()) {
                Some(ureq::Error::Timeout(_)) => InferError::Timeout,
                _ => InferError::Transport(e.to_string()),
            }
        }
    }
}

/// `choices[0].message.content` of a non-streaming response.
pub fn parse_completion(body: &str) -> Result<String, InferError> {
    let v: Value = serde_json::from_str(body).map_err(|e| InferError::InvalidResponse(e.to_string()))?;
    let content = v
        .pointer("/choices/0/message/content")
        .ok_or_else(|| InferError::InvalidResponse("no choices[0].message.content".into()))?;
    match content {
        Value::Null => Err(InferError::EmptyCompletion),
        Value::String(s) if s.is_empty() => Err(InferError::EmptyCompletion),
        Value::String(s) => Ok(s.clone()),
        _ => Err(InferError::InvalidResponse("content is not a string".into())),
    }
}

/// Concatenates `choices[0].delta.content` over `data:` lines until `[DONE]`.
pub fn read_stream<R: BufRead>(reader: R) -> Result<String, InferError> {
    let mut out = String::new();
    for line in reader.lines() {
        let line = line.map_err(map_io)?;
        let Some(payload) = line.trim().strip_prefix("data:") else { continue };
        let payload = payload.trim();
        if payload == "[DONE]" {
            break;
        }
        if payload.is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(payload).map_err(|e| InferError::InvalidResponse(e.to_string()))?;
        if let Some(delta) = v.pointer("/choices/0/delta/content").and_then(Value::as_str) {
            out.push_str(delta);
        }
    }
    if out.is_empty() {
        return Err(InferError::EmptyCompletion);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TranscriptStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub record_id: String,
    pub messages: Vec<ChatMessage>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub response: Option<String>,
    pub latency_ms: u64,
    pub attempts: u32,
    pub status: TranscriptStatus,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub record_id: String,
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub transcripts: Vec<Transcript>,
    pub ok: usize,
    pub failed: usize,
}

impl BatchOutcome {
    /// One raw output per input; failed records yield empty text.
    pub fn raw_outputs(&self) -> Vec<RawOutput> {
        self.transcripts
            .iter()
            .map(|t| RawOutput { record_id: t.record_id.clone(), text: t.response.clone().unwrap_or_default() })
            .collect()
    }

    pub fn summary(&self) -> String {
        format!("{} ok, {} failed of {}", self.ok, self.failed, self.transcripts.len())
    }
}

/// System prompt plus rendered (optionally few-shot augmented) user prompt
/// per briefing.
pub fn briefing_requests(
    briefings: &[BriefingRecord],
    templates: &PromptTemplates,
    exemplars: &[Exemplar],
    k: usize,
) -> Result<Vec<BatchItem>, PromptError> {
    briefings
        .iter()
        .map(|b| {
            let user = few_shot_augment(&render_user_prompt(templates, b)?, exemplars, k)?;
            Ok(BatchItem {
                record_id: b.record_id.clone(),
                messages: vec![
                    ChatMessage::new(Role::System, templates.system_template.clone()),
                    ChatMessage::new(Role::User, user),
                ],
            })
        })
        .collect()
}

fn run_item(client: &ChatClient, item: &BatchItem) -> Transcript {
    let started = Instant::now();
    let outcome = match build_request(&chat_pairs(&item.messages), client.config(), client.config().stream) {
        Ok(request) => client.chat(&request),
        Err(e) => ChatOutcome { result: Err(e), attempts: 0 },
    };
    let latency_ms = started.elapsed().as_millis() as u64;
    let (response, status, error) = match outcome.result {
        Ok(text) => (Some(text), TranscriptStatus::Ok, None),
        Err(e) => (None, TranscriptStatus::Failed, Some(e.to_string())),
    };
    Transcript {
        record_id: item.record_id.clone(),
        messages: item.messages.clone(),
        response,
        latency_ms,
        attempts: outcome.attempts,
        status,
        error,
    }
}

/// Runs every item through a bounded worker pool. Per-record failures are
/// recorded in transcripts and never abort the batch.
pub fn run_batch(client: &ChatClient, items: &[BatchItem]) -> BatchOutcome {
    let workers = client.config().max_parallel_requests.min(items.len()).max(1);
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Transcript)>();
    let mut slots: Vec<Option<Transcript>> = vec![None; items.len()];
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else { break };
                if tx.send((i, run_item(client, item))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, t) in rx {
            log::info!("{}: {:?} after {} attempt(s)", t.record_id, t.status, t.attempts);
            slots[i] = Some(t);
        }
    });
    let transcripts: Vec<Transcript> = slots.into_iter().map(|t| t.expect("every item reports")).collect();
    let ok = transcripts.iter().filter(|t| t.status == TranscriptStatus::Ok).count();
    let failed = transcripts.len() - ok;
    BatchOutcome { transcripts, ok, failed }
}

pub fn write_jsonl<T: Serialize>(rows: &[T], path: &Path) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

#[cfg(feature = "mock-server")]
pub mod mock {
    //! A scripted chat-completions server on a local TCP port.

    use std::collections::HashMap;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::{SocketAddr, TcpListener, TcpStream};
    use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
    use std::sync::{Arc, Mutex};
    use std::thread::JoinHandle;
    use std::time::{Duration, Instant};

    use serde_json::{json, Value};

    #[derive(Debug, Clone, PartialEq)]
    pub enum MockReply {
        Text(String),
        /// Emitted as one SSE `data:` line per chunk, then `[DONE]`.
        Stream(Vec<String>),
        Status(u16),
        Delay(Duration, Box<MockReply>),
    }

    #[derive(Debug, Clone, PartialEq)]
    pub struct MockRequest {
        pub body: Value,
        pub authorization: Option<String>,
        /// How many earlier requests carried the same last user message.
        pub repeat: usize,
        pub started: Instant,
        pub finished: Option<Instant>,
    }

    impl MockRequest {
        pub fn last_user_text(&self) -> &str {
            last_user_text(&self.body)
        }
    }

    fn last_user_text(body: &Value) -> &str {
        body["messages"]
            .as_array()
            .into_iter()
            .flatten().rfind(|m| m["role"] == "user")
            .and_then(|m| m["content"].as_str())
            .unwrap_or("")
    }

    type Responder = dyn Fn(&MockRequest) -> MockReply + Send + Sync;

    struct Shared {
        responder: Box<Responder>,
        in_flight: AtomicUsize,
        peak: AtomicUsize,
        log: Mutex<Vec<MockRequest>>,
        repeats: Mutex<HashMap<String, usize>>,
        stop: AtomicBool,
    }

    pub struct MockServer {
        addr: SocketAddr,
        shared: Arc<Shared>,
        accept: Option<JoinHandle<()>>,
    }

    impl MockServer {
        pub fn start<F>(responder: F) -> std::io::Result<MockServer>
        where
            F: Fn(&MockRequest) -> MockReply + Send + Sync + 'static,
        {
            let listener = TcpListener::bind("127.0.0.1:0")?;
            let addr = listener.local_addr()?;
            let shared = Arc::new(Shared {
                responder: Box::new(responder),
                in_flight: AtomicUsize::new(0),
                peak: AtomicUsize::new(0),
                log: Mutex::new(Vec::new()),
                repeats: Mutex::new(HashMap::new()),
                stop: AtomicBool::new(false),
            });
            let s = Arc::clone(&shared);
            let accept = std::thread::spawn(move || {
                for stream in listener.incoming() {
                    if s.stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let s = Arc::clone(&s);
                    std::thread::spawn(move || {
                        let _ = handle(stream, &s);
                    });
                }
            });
            Ok(MockServer { addr, shared, accept: Some(accept) })
        }

        /// Replies with the same text to everything.
        pub fn echo(text: impl Into<String>) -> std::io::Result<MockServer> {
            let text = text.into();
            MockServer::start(move |_| MockReply::Text(text.clone()))
        }

        pub fn base_url(&self) -> String {
            format!("http://{}/v1", self.addr)
        }

        pub fn peak_in_flight(&self) -> usize {
            self.shared.peak.load(Ordering::SeqCst)
        }

        pub fn requests(&self) -> Vec<MockRequest> {
            self.shared.log.lock().expect("mock log").clone()
        }

        pub fn request_count(&self) -> usize {
            self.shared.log.lock().expect("mock log").len()
        }

        pub fn reset_counters(&self) {
            self.shared.peak.store(0, Ordering::SeqCst);
            self.shared.log.lock().expect("mock log").clear();
            self.shared.repeats.lock().expect("mock repeats").clear();
        }
    }

    impl Drop for MockServer {
        fn drop(&mut self) {
            self.shared.stop.store(true, Ordering::SeqCst);
            let _ = TcpStream::connect(self.addr);
            if let Some(h) = self.accept.take() {
                let _ = h.join();
            }
        }
    }

    fn read_request(stream: &TcpStream) -> std::io::Result<(Option<String>, Vec<u8>)> {
        let mut reader = BufReader::new(stream);
        let mut line = String::new();
        let mut content_length = 0usize;
        let mut authorization = None;
        reader.read_line(&mut line)?;
        loop {
            line.clear();
            if reader.read_line(&mut line)? == 0 || line == "\r\n" || line == "\n" {
                break;
            }
            if let Some((name, value)) = line.split_once(':') {
                let value = value.trim();
                match name.trim().to_ascii_lowercase().as_str() {
                    "content-length" => content_length = value.parse().unwrap_or(0),
                    "authorization" => authorization = Some(value.to_string()),
                    _ => {}
                }
            }
        }
        let mut body = vec![0; content_length];
        reader.read_exact(&mut body)?;
        Ok((authorization, body))
    }

    fn reason(status: u16) -> &'static str {
        match status {
            200 => "OK",
            400 => "Bad Request",
            401 => "Unauthorized",
            429 => "Too Many Requests",
            500 => "Internal Server Error",
            502 => "Bad Gateway",
            503 => "Service Unavailable",
            _ => "Status",
        }
    }

    fn write_response(stream: &mut TcpStream, status: u16, content_type: &str, body: &str) -> std::io::Result<()> {
        write!(
            stream,
            "HTTP/1.1 {status} {}\r\nContent-Type: {content_type}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            reason(status),
            body.len()
        )?;
        stream.flush()
    }

    fn send(stream: &mut TcpStream, reply: MockReply) -> std::io::Result<()> {
        match reply {
            MockReply::Delay(d, inner) => {
                std::thread::sleep(d);
                send(stream, *inner)
            }
            MockReply::Status(status) => {
                write_response(stream, status, "application/json", &json!({"error": {"code": status}}).to_string())
            }
            MockReply::Text(text) => {
                let body = json!({
                    "id": "mock",
                    "object": "chat.completion",
                    "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
                });
                write_response(stream, 200, "application/json", &body.to_string())
            }
            MockReply::Stream(chunks) => {
                let mut body = String::new();
                for c in chunks {
                    let event = json!({"choices": [{"index": 0, "delta": {"content": c}}]});
                    body.push_str(&format!("data: {event}\n\n"));
                }
                body.push_str("data: [DONE]\n\n");
                write_response(stream, 200, "text/event-stream", &body)
            }
        }
    }

    fn handle(mut stream: TcpStream, shared: &Shared) -> std::io::Result<()> {
        let (authorization, body) = read_request(&stream)?;
        let started = Instant::now();
        let now = shared.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        shared.peak.fetch_max(now, Ordering::SeqCst);
        let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
        let repeat = {
            let mut repeats = shared.repeats.lock().expect("mock repeats");
            let n = repeats.entry(last_user_text(&body).to_string()).or_insert(0);
            *n += 1;
            *n - 1
        };
        let mut request = MockRequest { body, authorization, repeat, started, finished: None };
        let reply = (shared.responder)(&request);
        let result = send(&mut stream, reply);
        shared.in_flight.fetch_sub(1, Ordering::SeqCst);
        request.finished = Some(Instant::now());
        shared.log.lock().expect("mock log").push(request);
        result
    }
}

#[cfg(test)]
mod tests {
    use super::mock::{MockReply, MockServer};
    use super::*;

    fn cfg(server: &MockServer) -> EndpointConfig {
        EndpointConfig { backoff_base_secs: 0.01, backoff_max_secs: 0.05, timeout_secs: 5.0, ..EndpointConfig::new(server.base_url(), "m") }
    }

    fn pair() -> Vec<(&'static str, &'static str)> {
        vec![("system", "s"), ("user", "u")]
    }

    #[test]
    fn request_shape() {
        let c = EndpointConfig::new("http://x/v1", "qwen");
        let doc = build_request(&pair(), &c, true).unwrap();
        assert_eq!(doc["messages"].as_array().unwrap().len(), 2);
        assert_eq!(doc["messages"][0]["role"], "system");
        assert_eq!(doc["messages"][1]["content"], "u");
        assert_eq!(doc["stream"], true);
        assert_eq!(doc["model"], "qwen");
        assert_eq!(doc["temperature"], 0.0);
        assert_eq!(build_request(&[("tool", "x")], &c, false), Err(InferError::UnknownRole("tool".into())));
        let none: [(&str, &str); 0] = [];
        assert_eq!(build_request(&none, &c, false), Err(InferError::EmptyMessages));
    }

    #[test]
    fn config_invariants() {
        let mut c = EndpointConfig::new("http://x/v1", "m");
        c.max_parallel_requests = 0;
        assert!(c.check().is_err());
        let mut c = EndpointConfig::new("http://x/v1", "m");
        c.temperature = -0.1;
        assert!(c.check().is_err());
        let c = EndpointConfig::new("http://x/v1/", "m");
        assert_eq!(c.endpoint_url(), "http://x/v1/chat/completions");
        assert_eq!(c.backoff(1), Duration::from_secs(1));
        assert_eq!(c.backoff(3), Duration::from_secs(4));
        assert_eq!(c.backoff(20), Duration::from_secs(30));
    }

    #[test]
    fn auth_missing() {
        let mut c = EndpointConfig::new("http://x/v1", "m");
        c.api_key_env = Some("BRIEFX_TEST_KEY_THAT_IS_NOT_SET".into());
        assert_eq!(ChatClient::new(c).unwrap_err(), InferError::AuthMissing("BRIEFX_TEST_KEY_THAT_IS_NOT_SET".into()));
    }

    #[test]
    fn fixed_completion() {
        let server = MockServer::echo("{\"a\":1}").unwrap();
        let client = ChatClient::with_api_key(cfg(&server), Some("sk-test".into())).unwrap();
        let out = client.chat(&build_request(&pair(), client.config(), false).unwrap());
        assert_eq!(out.result.unwrap(), "{\"a\":1}");
        assert_eq!(out.attempts, 1);
        assert_eq!(server.requests()[0].authorization.as_deref(), Some("Bearer sk-test"));
        assert!(!format!("{client:?}").contains("sk-test"));
    }

    #[test]
    fn streaming_concatenates() {
        let server = MockServer::start(|_| MockReply::Stream(vec!["a".into(), "b".into(), "c".into()])).unwrap();
        let client = ChatClient::with_api_key(cfg(&server), None).unwrap();
        let out = client.chat(&build_request(&pair(), client.config(), true).unwrap());
        assert_eq!(out.result.unwrap(), "abc");
    }

    #[test]
    fn retries_then_succeeds() {
        let server = MockServer::start(|r| if r.repeat < 2 { MockReply::Status(500) } else { MockReply::Text("ok".into()) }).unwrap();
        let client = ChatClient::with_api_key(cfg(&server), None).unwrap();
        let out = client.chat(&build_request(&pair(), client.config(), false).unwrap());
        assert_eq!(out.result.unwrap(), "ok");
        assert_eq!(out.attempts, 3);
        assert_eq!(server.request_count(), 3);
    }

    #[test]
    fn non_retryable_and_exhausted() {
        let server = MockServer::start(|_| MockReply::Status(400)).unwrap();
        let client = ChatClient::with_api_key(cfg(&server), None).unwrap();
        let out = client.chat(&build_request(&pair(), client.config(), false).unwrap());
        assert_eq!(out.result, Err(InferError::HttpError { status: 400 }));
        assert_eq!(out.attempts, 1);

        let server = MockServer::start(|_| MockReply::Status(429)).unwrap();
        let client = ChatClient::with_api_key(cfg(&server), None).unwrap();
        let out = client.chat(&build_request(&pair(), client.config(), false).unwrap());
        assert_eq!(out.attempts, 4);
        assert!(matches!(out.result, Err(InferError::ExhaustedRetries { attempts: 4, .. })));
    }

    #[test]
    fn timeout_is_retried() {
        let server = MockServer::start(|r| {
            if r.repeat == 0 {
                MockReply::Delay(Duration::from_millis(800), Box::new(MockReply::Text("late".into())))
            } else {
                MockReply::Text("fast".into())
            }
        })
        .unwrap();
        let client = ChatClient::with_api_key(EndpointConfig { timeout_secs: 0.3, ..cfg(&server) }, None).unwrap();
        let out = client.chat(&build_request(&pair(), client.config(), false).unwrap());
        assert_eq!(out.result.unwrap(), "fast");
        assert_eq!(out.attempts, 2);
    }

    #[test]
    fn parse_completion_edges() {
        assert_eq!(parse_completion(r#"{"choices":[{"message":{"content":""}}]}"#), Err(InferError::EmptyCompletion));
        assert_eq!(parse_completion(r#"{"choices":[{"message":{"content":null}}]}"#), Err(InferError::EmptyCompletion));
        assert!(matches!(parse_completion(r#"{"choices":[]}"#), Err(InferError::InvalidResponse(_))));
        assert_eq!(parse_completion(r#"{"choices":[{"message":{"content":"x"}}]}"#).unwrap(), "x");
        let sse = "data: {\"choices\":[{\"delta\":{\"content\":\"a\"}}]}\n\n: ping\ndata: {\"choices\":[{\"delta\":{}}]}\ndata: {\"choices\":[{\"delta\":{\"content\":\"b\"}}]}\ndata: [DONE]\ndata: {\"choices\":[{\"delta\":{\"content\":\"z\"}}]}\n";
        assert_eq!(read_stream(sse.as_bytes()).unwrap(), "ab");
    }

    fn items(n: usize) -> Vec<BatchItem> {
        (0..n)
            .map(|i| BatchItem {
                record_id: format!("b{i}"),
                messages: vec![ChatMessage::new(Role::System, "s"), ChatMessage::new(Role::User, format!("briefing {i}"))],
            })
            .collect()
    }

    #[test]
    fn batch_order_and_partial_failure() {
        let server = MockServer::start(|r| {
            let text = r.last_user_text().to_string();
            if text == "briefing 3" {
                MockReply::Status(500)
            } else {
                let wait = 30 - text.len() as u64 % 7 * 4;
                MockReply::Delay(Duration::from_millis(wait), Box::new(MockReply::Text(format!("echo {text}"))))
            }
        })
        .unwrap();
        let client = ChatClient::with_api_key(EndpointConfig { max_retries: 1, ..cfg(&server) }, None).unwrap();
        let out = run_batch(&client, &items(10));
        assert_eq!((out.ok, out.failed), (9, 1));
        for (i, t) in out.transcripts.iter().enumerate() {
            assert_eq!(t.record_id, format!("b{i}"));
            if i == 3 {
                assert_eq!(t.status, TranscriptStatus::Failed);
                assert!(t.error.is_some());
                assert_eq!(t.attempts, 2);
            } else {
                assert_eq!(t.response.as_deref(), Some(format!("echo briefing {i}").as_str()));
            }
        }
        assert!(server.peak_in_flight() <= 4);
        assert_eq!(out.raw_outputs()[3].text, "");
    }

    #[test]
    fn serial_when_one_worker() {
        let server = MockServer::start(|_| MockReply::Delay(Duration::from_millis(5), Box::new(MockReply::Text("x".into())))).unwrap();
        let client = ChatClient::with_api_key(EndpointConfig { max_parallel_requests: 1, ..cfg(&server) }, None).unwrap();
        let out = run_batch(&client, &items(6));
        assert_eq!(out.ok, 6);
        assert_eq!(server.peak_in_flight(), 1);
        let reqs = server.requests();
        for w in reqs.windows(2) {
            assert!(w[0].started <= w[1].started);
        }
    }
}
