//! Boundary to chat-completion and text-embedding backends.
//!
//! [`Gateway`] wraps any [`Backend`] with request validation, a cap on
//! in-flight calls and usage accounting. Two backends ship with the crate:
//! [`HttpBackend`] speaks the common chat-completions / embeddings JSON API,
//! and [`StubBackend`] answers deterministically for offline runs and tests.

mod http;
mod limiter;
mod stub;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use http::{HttpBackend, HttpBackendConfig, API_KEY_ENV};
pub use limiter::Limiter;
pub use stub::{
    role_tag, PlannedScores, ScorePlan, StubBackend, StubRequest, StubResponder,
    DEFAULT_STUB_DIMENSION, PROFILE_CLOSE, PROFILE_ID_MARKER, PROFILE_OPEN,
};

pub const DEFAULT_PARALLELISM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
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
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Check that the list is non-empty, every message has content, and roles
/// alternate user/assistant (starting with user) after any leading system messages.
pub fn validate_messages(messages: &[ChatMessage]) -> Result<(), GatewayError> {
    if messages.is_empty() {
        return Err(GatewayError::InvalidRequest("no messages".into()));
    }
    if let Some(i) = messages.iter().position(|m| m.content.trim().is_empty()) {
        return Err(GatewayError::InvalidRequest(format!("message {i} is empty")));
    }
    let first_turn = messages
        .iter()
        .position(|m| m.role != Role::System)
        .unwrap_or(messages.len());
    for (k, m) in messages[first_turn..].iter().enumerate() {
        let expected = if k % 2 == 0 { Role::User } else { Role::Assistant };
        if m.role != expected {
            return Err(GatewayError::InvalidRequest(format!(
                "message {} has role {:?}, expected {:?}",
                first_turn + k,
                m.role,
                expected
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub model: String,
    /// Extra decoding parameters passed through verbatim (temperature, seed, ...).
    #[serde(default)]
    pub params: BTreeMap<String, serde_json::Value>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
}

fn default_timeout_secs() -> f64 {
    60.0
}

fn default_retries() -> u32 {
    2
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            model: "gpt-4o".into(),
            params: BTreeMap::new(),
            timeout_secs: default_timeout_secs(),
            max_retries: default_retries(),
        }
    }
}

impl GenConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(GatewayError::InvalidRequest(format!(
                "timeout must be positive, got {}",
                self.timeout_secs
            )));
        }
        Ok(())
    }

    pub fn with_param(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }
}

/// Raw (not yet normalized) embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub tokens: u64,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transient failure after {attempts} attempt(s): {message}")]
    Transient { attempts: u32, message: String },
    #[error("backend error{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Backend { status: Option<u16>, message: String },
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn chat(&self, messages: &[ChatMessage], config: &GenConfig) -> Result<Completion, GatewayError>;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub chat_calls: u64,
    pub embed_calls: u64,
    pub tokens: u64,
}

#[derive(Default)]
struct UsageCounters {
    chat_calls: AtomicU64,
    embed_calls: AtomicU64,
    tokens: AtomicU64,
}

/// Shareable handle: clones share the backend, the limiter and the counters.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn Backend>,
    limiter: Arc<Limiter>,
    usage: Arc<UsageCounters>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.name())
            .field("parallelism", &self.limiter.capacity())
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, parallelism: usize) -> Self {
        Gateway {
            backend,
            limiter: Arc::new(Limiter::new(parallelism.max(1))),
            usage: Arc::default(),
        }
    }

    pub fn stub(stub: StubBackend) -> Self {
        Gateway::new(Arc::new(stub), DEFAULT_PARALLELISM)
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn parallelism(&self) -> usize {
        self.limiter.capacity()
    }

    pub fn chat(&self, messages: &[ChatMessage], config: &GenConfig) -> Result<String, GatewayError> {
        validate_messages(messages)?;
        config.validate()?;
        let _permit = self.limiter.acquire();
        let completion = self.backend.chat(messages, config)?;
        self.usage.chat_calls.fetch_add(1, Ordering::Relaxed);
        self.usage
            .tokens
            .fetch_add(completion.tokens, Ordering::Relaxed);
        Ok(completion.text)
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        if text.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("empty text".into()));
        }
        let _permit = self.limiter.acquire();
        let v = self.backend.embed(text)?;
        if v.values.is_empty() || v.values.iter().any(|x| !x.is_finite()) {
            return Err(GatewayError::Backend {
                status: None,
                message: "embedding is empty or has non-finite entries".into(),
            });
        }
        self.usage.embed_calls.fetch_add(1, Ordering::Relaxed);
        Ok(v)
    }

    pub fn usage(&self) -> Usage {
        Usage {
            chat_calls: self.usage.chat_calls.load(Ordering::Relaxed),
            embed_calls: self.usage.embed_calls.load(Ordering::Relaxed),
            tokens: self.usage.tokens.load(Ordering::Relaxed),
        }
    }
}

/// Crude whitespace token estimate used when a backend reports no usage.
pub fn approx_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn message_validation() {
        assert!(validate_messages(&[]).is_err());
        assert!(validate_messages(&[ChatMessage::user("")]).is_err());
        validate_messages(&[ChatMessage::system("s"), ChatMessage::user("u")]).unwrap();
        validate_messages(&[
            ChatMessage::system("s"),
            ChatMessage::system("s2"),
            ChatMessage::user("u"),
            ChatMessage::assistant("a"),
            ChatMessage::user("u"),
        ])
        .unwrap();
        assert!(validate_messages(&[ChatMessage::assistant("a")]).is_err());
        assert!(validate_messages(&[ChatMessage::user("u"), ChatMessage::user("u")]).is_err());
        assert!(validate_messages(&[
            ChatMessage::user("u"),
            ChatMessage::assistant("a"),
            ChatMessage::system("late"),
        ])
        .is_err());
    }

    #[test]
    fn gen_config_validation() {
        GenConfig::default().validate().unwrap();
        let bad = GenConfig {
            timeout_secs: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gateway_counts_usage() {
        let gw = Gateway::stub(StubBackend::new().with_canned("ping", "pong"));
        assert_eq!(
            gw.chat(&[ChatMessage::user("ping")], &GenConfig::default())
                .unwrap(),
            "pong"
        );
        gw.embed("hello world").unwrap();
        let u = gw.usage();
        assert_eq!(u.chat_calls, 1);
        assert_eq!(u.embed_calls, 1);
        assert!(u.tokens > 0);
        assert!(gw.embed("   ").is_err());
    }
}
