use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::LlmError;

/// Anything that turns a prompt into completion text.
pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, LlmError>;
}

impl<C: LlmClient + ?Sized> LlmClient for std::sync::Arc<C> {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        (**self).complete(prompt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmEndpointConfig {
    pub model: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    /// Total attempts per query, including the first.
    pub attempts: u32,
    pub backoff_base_secs: f64,
    pub timeout_secs: f64,
    /// Names of the environment variables holding the endpoint URL and the
    /// bearer credential. The values themselves never enter the config.
    pub url_env: String,
    pub key_env: String,
}

impl Default for LlmEndpointConfig {
    fn default() -> Self {
        LlmEndpointConfig {
            model: "gpt-4o".into(),
            temperature: 0.7,
            top_p: 0.95,
            max_tokens: 4096,
            attempts: 3,
            backoff_base_secs: 1.0,
            timeout_secs: 60.0,
            url_env: "GLASSRL_LLM_URL".into(),
            key_env: "GLASSRL_LLM_API_KEY".into(),
        }
    }
}

impl LlmEndpointConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.attempts == 0 {
            return Err(LlmError::Config("attempts must be at least 1".into()));
        }
        if !(self.backoff_base_secs >= 0.0) || !(self.timeout_secs > 0.0) {
            return Err(LlmError::Config("backoff must be >= 0 and timeout > 0".into()));
        }
        Ok(())
    }

    /// Delay before retry `i` (0-based): base * 2^i.
    pub fn backoff(&self, i: u32) -> Duration {
        Duration::from_secs_f64(self.backoff_base_secs * 2f64.powi(i as i32))
    }

    /// Longest a single query can block.
    pub fn worst_case(&self) -> Duration {
        let waits: Duration = (0..self.attempts.saturating_sub(1)).map(|i| self.backoff(i)).sum();
        Duration::from_secs_f64(self.timeout_secs) * self.attempts + waits
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Chat-completion request body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(config: &LlmEndpointConfig, prompt: &str) -> Self {
        ChatRequest {
            model: config.model.clone(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content: prompt.to_string(),
            }],
            temperature: config.temperature,
            top_p: config.top_p,
            max_tokens: config.max_tokens,
        }
    }
}

/// `choices[0].message.content` of a chat-completion response.
pub fn completion_text(body: &serde_json::Value) -> Result<String, LlmError> {
    body.pointer("/choices/0/message/content")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .ok_or_else(|| LlmError::BadResponse("missing choices[0].message.content".into()))
}

/// One HTTP round trip, no retries.
pub trait Transport: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<String, LlmError>;
}

pub trait Sleeper: Send + Sync {
    fn sleep(&self, d: Duration);
}

pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
    url: String,
    key: Option<String>,
}

impl fmt::Debug for HttpTransport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpTransport")
            .field("url", &"<redacted>")
            .field("key", &self.key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpTransport {
    pub fn new(url: String, key: Option<String>, timeout: Duration) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LlmError::Transport(e.without_url().to_string()))?;
        Ok(HttpTransport { client, url, key })
    }

    /// Reads the endpoint and credential from the variables named in `config`.
    pub fn from_env(config: &LlmEndpointConfig) -> Result<Self, LlmError> {
        let url = std::env::var(&config.url_env).map_err(|_| LlmError::MissingEndpoint(config.url_env.clone()))?;
        let key = std::env::var(&config.key_env).ok().filter(|k| !k.is_empty());
        HttpTransport::new(url, key, Duration::from_secs_f64(config.timeout_secs))
    }
}

impl Transport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let mut req = self.client.post(&self.url).json(request);
        if let Some(key) = &self.key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                LlmError::Timeout
            } else {
                LlmError::Transport(e.without_url().to_string())
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(LlmError::Status(status.as_u16()));
        }
        let body: serde_json::Value = resp.json().map_err(|e| {
            if e.is_timeout() {
                LlmError::Timeout
            } else {
                LlmError::BadResponse(e.without_url().to_string())
            }
        })?;
        completion_text(&body)
    }
}

/// Retries a transport with doubling delays.
pub struct RetryingClient<T, S = ThreadSleeper> {
    pub config: LlmEndpointConfig,
    transport: T,
    sleeper: S,
}

impl<T: Transport> RetryingClient<T, ThreadSleeper> {
    pub fn new(config: LlmEndpointConfig, transport: T) -> Result<Self, LlmError> {
        RetryingClient::with_sleeper(config, transport, ThreadSleeper)
    }
}

impl<T: Transport, S: Sleeper> RetryingClient<T, S> {
    pub fn with_sleeper(config: LlmEndpointConfig, transport: T, sleeper: S) -> Result<Self, LlmError> {
        config.validate()?;
        Ok(RetryingClient {
            config,
            transport,
            sleeper,
        })
    }
}

impl RetryingClient<HttpTransport, ThreadSleeper> {
    pub fn from_env(config: LlmEndpointConfig) -> Result<Self, LlmError> {
        let transport = HttpTransport::from_env(&config)?;
        RetryingClient::new(config, transport)
    }
}

impl<T: Transport, S: Sleeper> LlmClient for RetryingClient<T, S> {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let request = ChatRequest::new(&self.config, prompt);
        let mut last = None;
        for attempt in 0..self.config.attempts {
            if attempt > 0 {
                self.sleeper.sleep(self.config.backoff(attempt - 1));
            }
            match self.transport.send(&request) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    log::warn!("llm attempt {}/{} failed: {e}", attempt + 1, self.config.attempts);
                    last = Some(e);
                }
            }
        }
        Err(LlmError::Exhausted {
            attempts: self.config.attempts,
            last: Box::new(last.expect("at least one attempt")),
        })
    }
}
