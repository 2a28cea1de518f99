//! Uniform access to every model role over the chat-completions protocol.
//!
//! A [`Gateway`] pairs a [`ModelHandle`] (decoding and transport settings)
//! with a [`ChatBackend`]: either [`HttpBackend`] for a live endpoint or one
//! of the deterministic mocks in [`mock`]. The gateway owns retries, think
//! block stripping, the per-handle concurrency cap and the call log.

pub mod mock;

use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;

/// Default completion cap for the insight miner.
pub const MINER_MAX_TOKENS: u32 = 100;
const DEFAULT_MAX_TOKENS: u32 = 1024;
const MAX_BACKOFF: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Identifier,
    Miner,
    Generator,
    Extractor,
    Qgen,
    Judge,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Identifier => "identifier",
            Role::Miner => "miner",
            Role::Generator => "generator",
            Role::Extractor => "extractor",
            Role::Qgen => "qgen",
            Role::Judge => "judge",
        }
    }
}

/// Per-role model settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHandle {
    pub role: Role,
    /// Base URL of a chat-completions server, or `"mock"`.
    pub endpoint: String,
    #[serde(default)]
    pub model_name: String,
    #[serde(default)]
    pub temperature: f64,
    /// Used instead of `temperature` when several samples are requested.
    #[serde(default = "default_sample_temperature")]
    pub sample_temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub strip_think_blocks: bool,
    #[serde(default = "default_retry_limit")]
    pub retry_limit: u32,
    #[serde(default = "default_parallelism")]
    pub parallelism_cap: usize,
    /// First retry delay; doubles on each further attempt.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    /// Environment variable holding the bearer token.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
}

fn default_sample_temperature() -> f64 {
    0.7
}
fn default_retry_limit() -> u32 {
    3
}
fn default_parallelism() -> usize {
    4
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_api_key_env() -> String {
    "OPENAI_API_KEY".into()
}

impl ModelHandle {
    /// Defaults for `role`: greedy decoding, 100 tokens for the miner.
    pub fn new(role: Role, endpoint: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            role,
            endpoint: endpoint.into(),
            model_name: model_name.into(),
            temperature: 0.0,
            sample_temperature: default_sample_temperature(),
            max_tokens: if role == Role::Miner {
                MINER_MAX_TOKENS
            } else {
                DEFAULT_MAX_TOKENS
            },
            strip_think_blocks: false,
            retry_limit: default_retry_limit(),
            parallelism_cap: default_parallelism(),
            backoff_ms: default_backoff_ms(),
            api_key_env: default_api_key_env(),
        }
    }

    pub fn mock(role: Role) -> Self {
        let mut handle = Self::new(role, "mock", "mock");
        handle.backoff_ms = 0;
        handle
    }

    pub fn is_mock(&self) -> bool {
        self.endpoint == "mock"
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_tokens == 0 {
            return Err(GatewayError::Config(format!(
                "{}: max_tokens must be positive",
                self.role.as_str()
            )));
        }
        if self.parallelism_cap == 0 {
            return Err(GatewayError::Config(format!(
                "{}: parallelism_cap must be positive",
                self.role.as_str()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn last_user_message(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }

    /// Number of user turns, so mocks can tell a reprompt from a first try.
    pub fn user_turns(&self) -> usize {
        self.messages.iter().filter(|m| m.role == "user").count()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl std::ops::AddAssign for Usage {
    fn add_assign(&mut self, rhs: Self) {
        self.prompt_tokens += rhs.prompt_tokens;
        self.completion_tokens += rhs.completion_tokens;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Status {
        status: u16,
        body: String,
        retry_after: Option<Duration>,
    },
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl BackendError {
    pub fn retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status { status, .. } => *status == 408 || *status == 429 || *status >= 500,
            BackendError::Malformed(_) => false,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("{role} call failed after {attempts} attempt(s): {last}")]
    Exhausted {
        role: &'static str,
        attempts: u32,
        last: BackendError,
    },
    #[error("{role} call rejected: {error}")]
    Rejected {
        role: &'static str,
        error: BackendError,
    },
    #[error("invalid model configuration: {0}")]
    Config(String),
}

/// Something that answers chat-completions requests.
pub trait ChatBackend: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;

    fn name(&self) -> String;
}

/// Client for a live chat-completions server.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(handle: &ModelHandle) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        let base = handle.endpoint.trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        };
        Ok(Self {
            client,
            url,
            api_key: std::env::var(&handle.api_key_env).ok(),
        })
    }
}

impl ChatBackend for HttpBackend {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let started = Instant::now();
        let body = json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let mut builder = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let retry_after = response
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<f64>().ok())
                .map(Duration::from_secs_f64);
            let body = response.text().unwrap_or_default();
            return Err(BackendError::Status {
                status: status.as_u16(),
                body,
                retry_after,
            });
        }
        let value: serde_json::Value = response
            .json()
            .map_err(|e| BackendError::Malformed(e.to_string()))?;
        parse_completion(&value, started.elapsed())
    }

    fn name(&self) -> String {
        self.url.clone()
    }
}

fn parse_completion(value: &serde_json::Value, elapsed: Duration) -> Result<ChatResponse, BackendError> {
    let text = value["choices"][0]["message"]["content"]
        .as_str()
        .ok_or_else(|| BackendError::Malformed("missing choices[0].message.content".into()))?
        .to_string();
    let usage = Usage {
        prompt_tokens: value["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
        completion_tokens: value["usage"]["completion_tokens"].as_u64().unwrap_or(0),
    };
    Ok(ChatResponse {
        text,
        usage,
        latency_ms: elapsed.as_millis() as u64,
    })
}

/// Removes `<think>...</think>` spans, including an unterminated trailing one
/// and a dangling close tag whose opener was part of the chat template.
pub fn strip_think_blocks(text: &str) -> String {
    static BLOCK: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    let block = BLOCK.get_or_init(|| Regex::new(r"(?s)<think>.*?</think>").unwrap());
    let mut out = block.replace_all(text, "").into_owned();
    if let Some(pos) = out.find("</think>") {
        out = out[pos + "</think>".len()..].to_string();
    }
    if let Some(pos) = out.find("<think>") {
        out.truncate(pos);
    }
    out.trim().to_string()
}

/// One entry per gateway call, successful or not.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub role: Role,
    pub model: String,
    pub attempts: u32,
    pub ok: bool,
    pub usage: Usage,
    pub latency_ms: u64,
}

/// Shared, append-only log of gateway calls.
#[derive(Debug, Clone, Default)]
pub struct CallLog(Arc<Mutex<Vec<CallRecord>>>);

impl CallLog {
    pub fn push(&self, record: CallRecord) {
        self.0.lock().unwrap().push(record);
    }

    pub fn len(&self) -> usize {
        self.0.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> Vec<CallRecord> {
        self.0.lock().unwrap().clone()
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cond: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self {
            free: Mutex::new(permits),
            cond: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cond.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cond.notify_one();
    }
}

/// The answer to one gateway call after post-processing.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatOutput {
    pub text: String,
    pub usage: Usage,
    pub latency_ms: u64,
}

pub struct Gateway {
    handle: ModelHandle,
    backend: Arc<dyn ChatBackend>,
    permits: Semaphore,
    log: CallLog,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("handle", &self.handle)
            .field("backend", &self.backend.name())
            .finish()
    }
}

impl Gateway {
    pub fn new(handle: ModelHandle, backend: Arc<dyn ChatBackend>) -> Result<Self, GatewayError> {
        handle.validate()?;
        Ok(Self {
            permits: Semaphore::new(handle.parallelism_cap),
            handle,
            backend,
            log: CallLog::default(),
        })
    }

    /// Connects to the handle's HTTP endpoint.
    pub fn http(handle: ModelHandle) -> Result<Self, GatewayError> {
        let backend = HttpBackend::new(&handle)?;
        Self::new(handle, Arc::new(backend))
    }

    pub fn with_log(mut self, log: CallLog) -> Self {
        self.log = log;
        self
    }

    pub fn handle(&self) -> &ModelHandle {
        &self.handle
    }

    pub fn log(&self) -> &CallLog {
        &self.log
    }

    /// Sends a conversation at the handle's default temperature.
    pub fn chat(&self, messages: &[ChatMessage]) -> Result<ChatOutput, GatewayError> {
        self.chat_at(messages, self.handle.temperature)
    }

    /// Sends a single user prompt.
    pub fn ask(&self, prompt: &str) -> Result<ChatOutput, GatewayError> {
        self.chat(&[ChatMessage::user(prompt)])
    }

    fn chat_at(&self, messages: &[ChatMessage], temperature: f64) -> Result<ChatOutput, GatewayError> {
        let request = ChatRequest {
            model: self.handle.model_name.clone(),
            messages: messages.to_vec(),
            temperature,
            max_tokens: self.handle.max_tokens,
        };
        let _permit = self.permits.acquire();
        let role = self.handle.role;
        let mut attempts = 0;
        let result = loop {
            attempts += 1;
            match self.backend.send(&request) {
                Ok(response) => break Ok(response),
                Err(error) if !error.retryable() => {
                    break Err(GatewayError::Rejected {
                        role: role.as_str(),
                        error,
                    })
                }
                Err(error) if attempts > self.handle.retry_limit => {
                    break Err(GatewayError::Exhausted {
                        role: role.as_str(),
                        attempts,
                        last: error,
                    })
                }
                Err(error) => {
                    let delay = match &error {
                        BackendError::Status {
                            retry_after: Some(wait),
                            ..
                        } => *wait,
                        _ => self.backoff(attempts),
                    };
                    log::debug!("{} attempt {attempts} failed ({error}); retrying in {delay:?}", role.as_str());
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                }
            }
        };
        let mut record = CallRecord {
            role,
            model: self.handle.model_name.clone(),
            attempts,
            ok: result.is_ok(),
            usage: Usage::default(),
            latency_ms: 0,
        };
        let output = result.map(|response| {
            record.usage = response.usage;
            record.latency_ms = response.latency_ms;
            let text = if self.handle.strip_think_blocks {
                strip_think_blocks(&response.text)
            } else {
                response.text
            };
            ChatOutput {
                text,
                usage: response.usage,
                latency_ms: response.latency_ms,
            }
        });
        self.log.push(record);
        output
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let base = Duration::from_millis(self.handle.backoff_ms);
        let factor = 1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX);
        base.saturating_mul(factor).min(MAX_BACKOFF)
    }

    /// Asks the miner to complete `fragment` `n_samples` times.
    ///
    /// A single sample is decoded at the handle temperature; several samples
    /// use the sampling temperature so they can differ.
    pub fn complete_insight(&self, fragment: &str, n_samples: usize) -> Result<Vec<ChatOutput>, GatewayError> {
        let n = n_samples.max(1);
        let temperature = if n > 1 {
            self.handle.sample_temperature
        } else {
            self.handle.temperature
        };
        let messages = [ChatMessage::user(fragment)];
        (0..n).map(|_| self.chat_at(&messages, temperature)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::mock::{CannedMock, FailingMock, MockKb};
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn canned_reply_is_returned_and_logged() {
        let gateway = Gateway::new(
            ModelHandle::mock(Role::Generator),
            Arc::new(CannedMock::fixed("Paris").with_latency(7)),
        )
        .unwrap();
        let out = gateway.ask("Where?").unwrap();
        assert_eq!(out.text, "Paris");
        assert_eq!(out.latency_ms, 7);
        assert_eq!(gateway.log().len(), 1);
        assert_eq!(gateway.log().snapshot()[0].latency_ms, 7);
    }

    #[test]
    fn think_blocks_are_stripped_when_enabled() {
        let mut handle = ModelHandle::mock(Role::Generator);
        handle.strip_think_blocks = true;
        let gateway = Gateway::new(handle, Arc::new(CannedMock::fixed("<think>x</think>Paris"))).unwrap();
        assert_eq!(gateway.ask("q").unwrap().text, "Paris");

        let raw = Gateway::new(
            ModelHandle::mock(Role::Generator),
            Arc::new(CannedMock::fixed("<think>x</think>Paris")),
        )
        .unwrap();
        assert_eq!(raw.ask("q").unwrap().text, "<think>x</think>Paris");
    }

    #[test]
    fn strip_handles_partial_blocks() {
        assert_eq!(strip_think_blocks("reasoning</think> Yes"), "Yes");
        assert_eq!(strip_think_blocks("A<think>never closed"), "A");
        assert_eq!(strip_think_blocks("<think>a</think>B<think>c</think>D"), "BD");
    }

    #[test]
    fn transport_failure_retries_then_errors() {
        let mut handle = ModelHandle::mock(Role::Generator);
        handle.retry_limit = 2;
        let backend = Arc::new(FailingMock::transport());
        let gateway = Gateway::new(handle, backend.clone()).unwrap();
        let err = gateway.ask("q").unwrap_err();
        assert_eq!(backend.attempts(), 3);
        assert!(matches!(err, GatewayError::Exhausted { attempts: 3, .. }));
        let log = gateway.log().snapshot();
        assert_eq!(log.len(), 1);
        assert!(!log[0].ok);
        assert_eq!(log[0].attempts, 3);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let backend = Arc::new(FailingMock::status(400));
        let gateway = Gateway::new(ModelHandle::mock(Role::Judge), backend.clone()).unwrap();
        assert!(matches!(gateway.ask("q"), Err(GatewayError::Rejected { .. })));
        assert_eq!(backend.attempts(), 1);
    }

    #[test]
    fn rate_limit_is_retried() {
        let backend = Arc::new(FailingMock::status(429).then_succeed_after(2, "ok"));
        let gateway = Gateway::new(ModelHandle::mock(Role::Judge), backend.clone()).unwrap();
        assert_eq!(gateway.ask("q").unwrap().text, "ok");
        assert_eq!(backend.attempts(), 3);
        assert_eq!(gateway.log().len(), 1);
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let mut handle = ModelHandle::mock(Role::Judge);
        handle.backoff_ms = 100;
        let gateway = Gateway::new(handle, Arc::new(CannedMock::fixed(""))).unwrap();
        assert_eq!(gateway.backoff(1), Duration::from_millis(100));
        assert_eq!(gateway.backoff(3), Duration::from_millis(400));
        assert_eq!(gateway.backoff(40), MAX_BACKOFF);
    }

    #[test]
    fn miner_defaults_to_one_hundred_tokens() {
        assert_eq!(ModelHandle::new(Role::Miner, "mock", "m").max_tokens, 100);
        let mut handle = ModelHandle::mock(Role::Miner);
        handle.max_tokens = 0;
        assert!(handle.validate().is_err());
    }

    #[test]
    fn complete_insight_uses_kb() {
        let kb = MockKb::new()
            .with_entry("person x was born in", ["Paris"])
            .with_entry("X cites", ["Paris", "Lyon"]);
        let gateway = Gateway::new(ModelHandle::mock(Role::Miner), Arc::new(kb)).unwrap();
        let texts = |frag: &str, n| -> Vec<String> {
            gateway
                .complete_insight(frag, n)
                .unwrap()
                .into_iter()
                .map(|o| o.text)
                .collect()
        };
        assert_eq!(texts("Person X  was born in", 1), ["Paris"]);
        assert_eq!(texts("unknown", 1), [""]);
        assert_eq!(texts("x cites", 1), ["Paris; Lyon"]);
        assert_eq!(texts("x cites", 3), ["Paris; Lyon"; 3]);
        assert_eq!(gateway.log().len(), 6);
    }

    #[test]
    fn mock_completions_respect_max_tokens() {
        let long = (0..300).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let kb = MockKb::new().with_entry("frag", [long]);
        let gateway = Gateway::new(ModelHandle::mock(Role::Miner), Arc::new(kb)).unwrap();
        let out = gateway.complete_insight("frag", 1).unwrap();
        assert_eq!(crate::text::token_count(&out[0].text), 100);
        assert_eq!(out[0].usage.completion_tokens, 100);
    }

    struct Tracking {
        live: AtomicUsize,
        peak: AtomicUsize,
    }

    impl ChatBackend for Tracking {
        fn send(&self, _request: &ChatRequest) -> Result<ChatResponse, BackendError> {
            let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(5));
            self.live.fetch_sub(1, Ordering::SeqCst);
            Ok(ChatResponse {
                text: String::new(),
                usage: Usage::default(),
                latency_ms: 0,
            })
        }

        fn name(&self) -> String {
            "tracking".into()
        }
    }

    #[test]
    fn parallelism_cap_bounds_in_flight_requests() {
        let backend = Arc::new(Tracking {
            live: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        let mut handle = ModelHandle::mock(Role::Generator);
        handle.parallelism_cap = 2;
        let gateway = Gateway::new(handle, backend.clone()).unwrap();
        std::thread::scope(|scope| {
            for _ in 0..8 {
                scope.spawn(|| gateway.ask("q").unwrap());
            }
        });
        assert!(backend.peak.load(Ordering::SeqCst) <= 2);
        assert_eq!(gateway.log().len(), 8);
    }

    #[test]
    fn parses_wire_completion() {
        let value = json!({
            "choices": [{"message": {"role": "assistant", "content": "hi"}}],
            "usage": {"prompt_tokens": 3, "completion_tokens": 1}
        });
        let resp = parse_completion(&value, Duration::from_millis(2)).unwrap();
        assert_eq!(resp.text, "hi");
        assert_eq!(resp.usage.prompt_tokens, 3);
        assert!(parse_completion(&json!({}), Duration::ZERO).is_err());
    }
}
