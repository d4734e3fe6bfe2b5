//! Remote LLM backend over the open chat-completion HTTP schema.

use std::time::Duration;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{ConcurrencyCapability, Policy, PolicyError, TurnContext};

/// Environment variable holding the API key. Credentials never come from
/// config files.
pub const API_KEY_ENV: &str = "CVR_API_KEY";

fn default_temperature() -> f64 {
    0.0
}
fn default_max_tokens() -> u32 {
    8192
}
fn default_timeout_s() -> f64 {
    30.0
}
fn default_retries() -> u32 {
    2
}
fn default_backoff_ms() -> u64 {
    200
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemotePolicyConfig {
    /// Full URL of the chat-completions route.
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: f64,
    /// Transport retries after the first attempt.
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    /// Task prompt sent as the system message.
    #[serde(default)]
    pub system_prompt: Option<String>,
}

/// One chat-completion request per turn: system = task prompt, user = the
/// rendered state. No streaming.
pub struct RemotePolicy {
    config: RemotePolicyConfig,
    client: reqwest::blocking::Client,
}

impl RemotePolicy {
    pub fn new(config: RemotePolicyConfig) -> Result<Self, PolicyError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_s))
            .build()
            .map_err(|e| PolicyError::Transport(e.to_string()))?;
        Ok(Self { config, client })
    }

    fn request_body(&self, rendered_state: &str) -> serde_json::Value {
        let system = self
            .config
            .system_prompt
            .clone()
            .unwrap_or_else(|| crate::episode::DEFAULT_MASTER_PROMPT.to_string());
        serde_json::json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": rendered_state},
            ],
        })
    }

    fn send_once(&self, body: &serde_json::Value) -> Result<String, PolicyError> {
        let mut request = self
            .client
            .post(&self.config.endpoint)
            .header("content-type", "application/json")
            .json(body);
        if let Ok(key) = std::env::var(API_KEY_ENV) {
            request = request.header("authorization", format!("Bearer {key}"));
        }
        let response = request.send().map_err(|e| {
            if e.is_timeout() {
                PolicyError::Timeout { attempts: 1 }
            } else {
                PolicyError::Transport(e.to_string())
            }
        })?;
        let status = response.status();
        if !status.is_success() {
            return Err(PolicyError::Status {
                code: status.as_u16(),
            });
        }
        let value: serde_json::Value = response
            .json()
            .map_err(|e| PolicyError::MalformedBody(e.to_string()))?;
        value
            .get("choices")
            .and_then(|c| c.get(0))
            .and_then(|c| c.get("message"))
            .and_then(|m| m.get("content"))
            .and_then(serde_json::Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| {
                PolicyError::MalformedBody("no choices[0].message.content in response".into())
            })
    }
}

impl Policy for RemotePolicy {
    fn decide(&mut self, ctx: &TurnContext, _rng: &mut dyn RngCore) -> Result<String, PolicyError> {
        let body = self.request_body(ctx.rendered_state);
        let attempts = self.config.retries + 1;
        let mut last_error = PolicyError::Transport("no attempt made".into());
        for attempt in 0..attempts {
            if attempt > 0 {
                let backoff = self.config.backoff_ms.saturating_mul(1 << (attempt - 1));
                std::thread::sleep(Duration::from_millis(backoff));
            }
            match self.send_once(&body) {
                Ok(text) => return Ok(text),
                // 4xx responses are not transient; surface them immediately.
                Err(PolicyError::Status { code }) if (400..500).contains(&code) => {
                    return Err(PolicyError::Status { code })
                }
                Err(e) => last_error = e,
            }
        }
        if let PolicyError::Timeout { .. } = last_error {
            last_error = PolicyError::Timeout { attempts };
        }
        Err(last_error)
    }

    fn concurrency(&self) -> ConcurrencyCapability {
        ConcurrencyCapability::ConcurrentOk
    }
}
