//! Chat-completion transport: the backend trait and the HTTP client.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::prompt::ChatPayload;
use crate::CoderError;

/// A failed HTTP exchange after all transport retries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportError {
    pub status: Option<u16>,
    pub attempts: u32,
    /// Total time slept in backoff, milliseconds.
    pub backoff_ms: u64,
    pub message: String,
}

impl std::fmt::Display for TransportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.status {
            Some(s) => write!(f, "HTTP {s} after {} attempts ({} ms backoff): {}", self.attempts, self.backoff_ms, self.message),
            None => write!(f, "transport failure after {} attempts ({} ms backoff): {}", self.attempts, self.backoff_ms, self.message),
        }
    }
}

/// Something that answers a chat payload with the assistant's text.
pub trait ChatBackend: Sync {
    fn complete(&self, payload: &ChatPayload) -> Result<String, TransportError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    /// Base URL; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_env: String,
    pub max_concurrent: usize,
    /// Follow-up attempts after an invalid reply.
    pub retry_budget: u32,
    pub timeout_secs: u64,
    /// Retries of a request answered with 429 or 5xx.
    pub transport_retries: u32,
    pub backoff_base_ms: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            auth_env: "VIDPEAK_CODER_TOKEN".into(),
            max_concurrent: 4,
            retry_budget: 2,
            timeout_secs: 120,
            transport_retries: 4,
            backoff_base_ms: 500,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), CoderError> {
        if self.max_concurrent == 0 {
            return Err(CoderError::Config("max_concurrent must be at least 1".into()));
        }
        if self.base_url.is_empty() {
            return Err(CoderError::Config("base_url is empty".into()));
        }
        Ok(())
    }
}

/// Blocking HTTP backend with exponential backoff on 429 and 5xx.
pub struct HttpBackend {
    agent: ureq::Agent,
    url: String,
    token: String,
    retries: u32,
    backoff_base: Duration,
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: AssistantMessage,
}

#[derive(Deserialize)]
struct AssistantMessage {
    content: Option<String>,
}

impl HttpBackend {
    /// Reads the token from the configured environment variable.
    pub fn from_env(config: &EndpointConfig) -> Result<Self, CoderError> {
        config.validate()?;
        let token = std::env::var(&config.auth_env).map_err(|_| CoderError::MissingToken(config.auth_env.clone()))?;
        Ok(Self::with_token(config, token))
    }

    pub fn with_token(config: &EndpointConfig, token: String) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            url: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            token,
            retries: config.transport_retries,
            backoff_base: Duration::from_millis(config.backoff_base_ms),
        }
    }

    fn attempt(&self, payload: &ChatPayload) -> Result<String, (Option<u16>, bool, String)> {
        let mut resp = self
            .agent
            .post(&self.url)
            .header("Authorization", &format!("Bearer {}", self.token))
            .send_json(payload)
            .map_err(|e| (None, true, e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| (Some(status), true, e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err((Some(status), true, body));
        }
        if !(200..300).contains(&status) {
            return Err((Some(status), false, body));
        }
        let parsed: Completion =
            serde_json::from_str(&body).map_err(|e| (Some(status), false, format!("unreadable completion: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or((Some(status), false, "completion has no message content".into()))
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, payload: &ChatPayload) -> Result<String, TransportError> {
        let mut slept = Duration::ZERO;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(payload) {
                Ok(text) => return Ok(text),
                Err((status, retryable, message)) => {
                    if !retryable || attempts > self.retries {
                        return Err(TransportError {
                            status,
                            attempts,
                            backoff_ms: slept.as_millis() as u64,
                            message,
                        });
                    }
                    let delay = self.backoff_base * 2u32.saturating_pow(attempts - 1);
                    log::warn!("chat request failed ({status:?}); retrying in {delay:?}");
                    std::thread::sleep(delay);
                    slept += delay;
                }
            }
        }
    }
}
