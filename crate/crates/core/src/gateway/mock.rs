//! Deterministic stand-ins for chat-completions servers.
//!
//! Every mock honors `max_tokens` by truncating its reply to that many
//! whitespace tokens and reports whitespace token counts as usage.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, Usage};
use crate::text::{fold, token_count, truncate_tokens};

/// Builds the response a server honoring `max_tokens` would send.
pub fn mock_response(request: &ChatRequest, text: &str, latency_ms: u64) -> ChatResponse {
    let text = truncate_tokens(text, request.max_tokens as usize);
    let prompt_tokens = request
        .messages
        .iter()
        .map(|m| token_count(&m.content) as u64)
        .sum();
    ChatResponse {
        usage: Usage {
            prompt_tokens,
            completion_tokens: token_count(&text) as u64,
        },
        text,
        latency_ms,
    }
}

/// Replies from a fixed list, cycling; with one reply it is fully deterministic.
#[derive(Debug)]
pub struct CannedMock {
    replies: Vec<String>,
    cursor: AtomicUsize,
    latency_ms: u64,
}

impl CannedMock {
    pub fn new(replies: impl IntoIterator<Item = impl Into<String>>) -> Self {
        let replies: Vec<String> = replies.into_iter().map(Into::into).collect();
        assert!(!replies.is_empty(), "CannedMock needs at least one reply");
        Self {
            replies,
            cursor: AtomicUsize::new(0),
            latency_ms: 0,
        }
    }

    pub fn fixed(reply: impl Into<String>) -> Self {
        Self::new([reply.into()])
    }

    pub fn with_latency(mut self, latency_ms: u64) -> Self {
        self.latency_ms = latency_ms;
        self
    }
}

impl ChatBackend for CannedMock {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let idx = self.cursor.fetch_add(1, Ordering::Relaxed) % self.replies.len();
        Ok(mock_response(request, &self.replies[idx], self.latency_ms))
    }

    fn name(&self) -> String {
        "mock:canned".into()
    }
}

/// Lookup table from prompt to completion, keyed on the folded last user message.
///
/// List values are joined with `"; "`; unknown keys yield the default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockKb {
    completions: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    default: String,
}

impl MockKb {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_entry(
        mut self,
        key: &str,
        values: impl IntoIterator<Item = impl Into<String>>,
    ) -> Self {
        self.insert(key, values);
        self
    }

    pub fn with_default(mut self, default: impl Into<String>) -> Self {
        self.default = default.into();
        self
    }

    pub fn insert(&mut self, key: &str, values: impl IntoIterator<Item = impl Into<String>>) {
        self.completions
            .insert(fold(key), values.into_iter().map(Into::into).collect());
    }

    pub fn lookup(&self, key: &str) -> String {
        self.completions
            .get(&fold(key))
            .map(|v| v.join("; "))
            .unwrap_or_else(|| self.default.clone())
    }

    pub fn len(&self) -> usize {
        self.completions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.completions.is_empty()
    }
}

impl ChatBackend for MockKb {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        Ok(mock_response(request, &self.lookup(request.last_user_message()), 0))
    }

    fn name(&self) -> String {
        "mock:kb".into()
    }
}

type ReplyFn = dyn Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync;

/// Computes each reply from the request.
pub struct FnMock {
    name: String,
    reply: Box<ReplyFn>,
}

impl FnMock {
    pub fn new(
        name: impl Into<String>,
        reply: impl Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            reply: Box::new(reply),
        }
    }
}

impl ChatBackend for FnMock {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let text = (self.reply)(request)?;
        Ok(mock_response(request, &text, 0))
    }

    fn name(&self) -> String {
        format!("mock:{}", self.name)
    }
}

/// Fails with a fixed error, optionally succeeding after some attempts.
#[derive(Debug)]
pub struct FailingMock {
    error: BackendError,
    attempts: AtomicUsize,
    succeed_after: Option<(usize, String)>,
}

impl FailingMock {
    pub fn transport() -> Self {
        Self::with_error(BackendError::Transport("connection refused".into()))
    }

    pub fn status(status: u16) -> Self {
        Self::with_error(BackendError::Status {
            status,
            body: String::new(),
            retry_after: None,
        })
    }

    pub fn with_error(error: BackendError) -> Self {
        Self {
            error,
            attempts: AtomicUsize::new(0),
            succeed_after: None,
        }
    }

    /// The first `failures` attempts fail, later ones reply `reply`.
    pub fn then_succeed_after(mut self, failures: usize, reply: impl Into<String>) -> Self {
        self.succeed_after = Some((failures, reply.into()));
        self
    }

    pub fn attempts(&self) -> usize {
        self.attempts.load(Ordering::SeqCst)
    }
}

impl ChatBackend for FailingMock {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let attempt = self.attempts.fetch_add(1, Ordering::SeqCst);
        match &self.succeed_after {
            Some((failures, reply)) if attempt >= *failures => Ok(mock_response(request, reply, 0)),
            _ => Err(self.error.clone()),
        }
    }

    fn name(&self) -> String {
        "mock:failing".into()
    }
}
