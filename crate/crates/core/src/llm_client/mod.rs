//! Chat-completion backends.
//!
//! [`ChatClient`] wraps a single-attempt [`Transport`] with message validation,
//! exponential backoff on transient failures, a global in-flight bound and an
//! optional requests-per-minute ceiling. Two transports ship: [`HttpTransport`]
//! for chat-completions compatible endpoints and [`MockTransport`] for offline
//! runs driven by a JSON script.

mod http;
mod mock;

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{Mutex, Semaphore};
use tokio::time::Instant;

pub use http::{HttpTransport, TOKEN_ENV};
pub use mock::{MockAction, MockEntry, MockFailure, MockScript, MockTransport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatParams {
    pub model_id: String,
    pub temperature: f32,
    pub max_output_units: Option<u32>,
}

impl Default for ChatParams {
    fn default() -> Self {
        Self { model_id: "default".to_string(), temperature: 0.7, max_output_units: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_units: u64,
    pub completion_units: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub usage: Option<Usage>,
    pub attempts: u32,
}

/// What one transport attempt produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawCompletion {
    pub text: String,
    pub usage: Option<Usage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("upstream returned HTTP {code}: {body}")]
    Status { code: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl TransportError {
    /// 429, 5xx, timeouts and connection failures are worth retrying.
    pub fn is_transient(&self) -> bool {
        match self {
            TransportError::Status { code, .. } => *code == 429 || (500..600).contains(code),
            TransportError::Timeout | TransportError::Connect(_) => true,
            TransportError::Malformed(_) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("invalid message sequence: {0}")]
    InvalidMessages(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("non-retryable upstream error (HTTP {status}): {body}")]
    NonRetryable { status: u16, body: String },
    #[error("protocol error: {0}")]
    ProtocolError(String),
}

/// One request/response exchange with a backend, no retries.
#[async_trait]
pub trait Transport: Send + Sync {
    async fn send(&self, messages: &[ChatMessage], params: &ChatParams) -> Result<RawCompletion, TransportError>;

    /// Cheap liveness probe.
    async fn health(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub factor: f64,
    /// Relative jitter applied to each delay, e.g. 0.2 for ±20%.
    pub jitter: f64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 5, base_delay_ms: 1000, factor: 2.0, jitter: 0.2, max_delay_ms: 60_000 }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based), without jitter.
    pub fn nominal_delay(&self, retry: u32) -> Duration {
        let ms = self.base_delay_ms as f64 * self.factor.powi(retry as i32);
        Duration::from_millis(ms.min(self.max_delay_ms as f64) as u64)
    }

    /// `unit` in [-1, 1] scales the jitter band.
    pub fn jittered_delay(&self, retry: u32, unit: f64) -> Duration {
        let nominal = self.nominal_delay(retry).as_secs_f64();
        let scale = 1.0 + self.jitter * unit.clamp(-1.0, 1.0);
        Duration::from_secs_f64((nominal * scale).max(0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    pub retry: RetryPolicy,
    pub max_inflight: usize,
    pub requests_per_minute: Option<u32>,
    pub timeout_secs: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self { retry: RetryPolicy::default(), max_inflight: 8, requests_per_minute: None, timeout_secs: 120 }
    }
}

struct RateLimiter {
    interval: Duration,
    next_slot: Mutex<Option<Instant>>,
}

impl RateLimiter {
    async fn acquire(&self) {
        let slot = {
            let mut next = self.next_slot.lock().await;
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot
        };
        tokio::time::sleep_until(slot).await;
    }
}

struct ClientInner {
    transport: Arc<dyn Transport>,
    config: ClientConfig,
    inflight: Semaphore,
    rate: Option<RateLimiter>,
}

/// Shareable, retrying chat client. Cloning is cheap and clones share limits.
#[derive(Clone)]
pub struct ChatClient {
    inner: Arc<ClientInner>,
}

impl fmt::Debug for ChatClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChatClient").field("config", &self.inner.config).finish()
    }
}

impl ChatClient {
    pub fn new(transport: Arc<dyn Transport>, config: ClientConfig) -> Self {
        let rate = config.requests_per_minute.filter(|&r| r > 0).map(|rpm| RateLimiter {
            interval: Duration::from_secs_f64(60.0 / f64::from(rpm)),
            next_slot: Mutex::new(None),
        });
        let inflight = Semaphore::new(config.max_inflight.max(1));
        Self { inner: Arc::new(ClientInner { transport, config, inflight, rate }) }
    }

    pub fn config(&self) -> &ClientConfig {
        &self.inner.config
    }

    pub async fn health(&self) -> bool {
        self.inner.transport.health().await
    }

    pub async fn chat(&self, messages: &[ChatMessage], params: &ChatParams) -> Result<Completion, ClientError> {
        validate_messages(messages)?;
        let inner = &self.inner;
        let policy = &inner.config.retry;
        let timeout = Duration::from_secs(inner.config.timeout_secs.max(1));
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            if let Some(rate) = &inner.rate {
                rate.acquire().await;
            }
            let outcome = {
                let _permit = inner.inflight.acquire().await.expect("semaphore never closed");
                match tokio::time::timeout(timeout, inner.transport.send(messages, params)).await {
                    Ok(result) => result,
                    Err(_) => Err(TransportError::Timeout),
                }
            };
            match outcome {
                Ok(raw) => return Ok(Completion { text: raw.text, usage: raw.usage, attempts }),
                Err(e) if e.is_transient() => {
                    if attempts > policy.max_retries {
                        return Err(ClientError::RetriesExhausted { attempts, last: e.to_string() });
                    }
                    let unit = rand::rng().random_range(-1.0..=1.0);
                    let delay = policy.jittered_delay(attempts - 1, unit);
                    tracing::debug!(attempts, ?delay, error = %e, "retrying chat request");
                    tokio::time::sleep(delay).await;
                }
                Err(TransportError::Status { code, body }) => {
                    return Err(ClientError::NonRetryable { status: code, body })
                }
                Err(e) => return Err(ClientError::ProtocolError(e.to_string())),
            }
        }
    }
}

/// Leading system messages, then strictly alternating user/assistant turns
/// beginning with a user turn. User and assistant content must be non-empty.
pub fn validate_messages(messages: &[ChatMessage]) -> Result<(), ClientError> {
    let invalid = |m: String| Err(ClientError::InvalidMessages(m));
    if messages.is_empty() {
        return invalid("no messages".into());
    }
    let mut expected = Role::User;
    let mut in_preamble = true;
    for (i, m) in messages.iter().enumerate() {
        if m.role == Role::System {
            if !in_preamble {
                return invalid(format!("system message at position {i} after conversation start"));
            }
            continue;
        }
        in_preamble = false;
        if m.role != expected {
            return invalid(format!("message {i} has role {:?}, expected {:?}", m.role, expected));
        }
        if m.content.trim().is_empty() {
            return invalid(format!("message {i} has empty content"));
        }
        expected = if expected == Role::User { Role::Assistant } else { Role::User };
    }
    if in_preamble {
        return invalid("no user message".into());
    }
    Ok(())
}

/// Last user message in a sequence, if any.
pub fn last_user_content(messages: &[ChatMessage]) -> Option<&str> {
    messages.iter().rev().find(|m| m.role == Role::User).map(|m| m.content.as_str())
}
