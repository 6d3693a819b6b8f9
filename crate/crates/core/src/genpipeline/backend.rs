//! Chat-completion backends.

use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("missing credential: environment variable {0} is not set")]
    MissingCredential(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("unexpected response: {0}")]
    Response(String),
    #[error("{0}")]
    Refused(String),
}

impl BackendError {
    /// Worth another attempt with the same request.
    pub fn is_transient(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub model: String,
    pub max_context: usize,
    pub supports_temperature: bool,
}

/// Sampling settings for one generation request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sampling {
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
    /// Regenerations allowed after the first attempt.
    pub max_retries: usize,
}

impl Default for Sampling {
    fn default() -> Self {
        Self { temperature: 0.7, seed: 0, max_retries: 3 }
    }
}

/// A text-in, text-out chat model. Deterministic backends must return the
/// same text for the same `(prompt, temperature, seed)`.
pub trait ChatBackend: Send + Sync {
    fn info(&self) -> BackendInfo;

    fn complete(&self, prompt: &str, temperature: f64, seed: u64) -> Result<String, BackendError>;
}

/// Wraps a closure; handy for tests and identity rewrites.
pub struct FnBackend<F> {
    name: String,
    f: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&str, u64) -> Result<String, BackendError> + Send + Sync,
{
    pub fn new(name: &str, f: F) -> Self {
        Self { name: name.into(), f }
    }
}

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&str, u64) -> Result<String, BackendError> + Send + Sync,
{
    fn info(&self) -> BackendInfo {
        BackendInfo { model: self.name.clone(), max_context: usize::MAX, supports_temperature: false }
    }

    fn complete(&self, prompt: &str, _temperature: f64, seed: u64) -> Result<String, BackendError> {
        (self.f)(prompt, seed)
    }
}

/// Replays canned replies in order, then repeats the last one.
pub struct ScriptedBackend {
    replies: Vec<String>,
    next: Mutex<usize>,
}

impl ScriptedBackend {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(replies: I) -> Self {
        Self { replies: replies.into_iter().map(Into::into).collect(), next: Mutex::new(0) }
    }

    pub fn calls(&self) -> usize {
        *self.next.lock().expect("lock")
    }
}

impl ChatBackend for ScriptedBackend {
    fn info(&self) -> BackendInfo {
        BackendInfo { model: "scripted".into(), max_context: usize::MAX, supports_temperature: false }
    }

    fn complete(&self, _prompt: &str, _temperature: f64, _seed: u64) -> Result<String, BackendError> {
        let mut n = self.next.lock().expect("lock");
        let reply = self
            .replies
            .get((*n).min(self.replies.len().saturating_sub(1)))
            .cloned()
            .ok_or_else(|| BackendError::Refused("no scripted replies".into()))?;
        *n += 1;
        Ok(reply)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpConfig {
    /// Full chat-completions URL.
    pub url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Attempts per request on transient failures.
    #[serde(default = "default_attempts")]
    pub attempts: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default = "default_context")]
    pub max_context: usize,
}

fn default_key_env() -> String {
    "DXALIGN_API_KEY".into()
}
fn default_timeout() -> u64 {
    120
}
fn default_attempts() -> usize {
    3
}
fn default_max_tokens() -> usize {
    2048
}
fn default_context() -> usize {
    128_000
}

/// OpenAI-compatible chat-completions client.
pub struct HttpChatBackend {
    config: HttpConfig,
    key: String,
    agent: ureq::Agent,
}

impl HttpChatBackend {
    /// Reads the credential from the configured environment variable.
    pub fn from_env(config: HttpConfig) -> Result<Self, BackendError> {
        let key = std::env::var(&config.api_key_env)
            .map_err(|_| BackendError::MissingCredential(config.api_key_env.clone()))?;
        Ok(Self::with_key(config, key))
    }

    pub fn with_key(config: HttpConfig, key: String) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, key, agent }
    }

    fn request(&self, prompt: &str, temperature: f64, seed: u64) -> Result<String, BackendError> {
        let body = json!({
            "model": self.config.model,
            "messages": [{ "role": "user", "content": prompt }],
            "temperature": temperature,
            "seed": seed,
            "max_tokens": self.config.max_tokens,
        });
        let mut resp = self
            .agent
            .post(&self.config.url)
            .header("Authorization", &format!("Bearer {}", self.key))
            .send_json(&body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(BackendError::Status { status, body });
        }
        let v: serde_json::Value =
            resp.body_mut().read_json().map_err(|e| BackendError::Response(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| BackendError::Response("no choices[0].message.content".into()))
    }
}

impl ChatBackend for HttpChatBackend {
    fn info(&self) -> BackendInfo {
        BackendInfo { model: self.config.model.clone(), max_context: self.config.max_context, supports_temperature: true }
    }

    fn complete(&self, prompt: &str, temperature: f64, seed: u64) -> Result<String, BackendError> {
        let mut last = BackendError::Refused("no attempts configured".into());
        for attempt in 0..self.config.attempts.max(1) {
            match self.request(prompt, temperature, seed) {
                Ok(text) => return Ok(text),
                Err(e) if e.is_transient() => {
                    log::warn!("chat request attempt {} failed: {e}", attempt + 1);
                    last = e;
                }
                Err(e) => return Err(e),
            }
        }
        Err(last)
    }
}
