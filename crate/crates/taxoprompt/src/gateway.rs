//! Uniform chat-completion interface over a real OpenAI-compatible HTTP
//! backend and a deterministic scripted mock.
//!
//! Every successful call appends exactly one entry to the shared
//! [`TokenLedger`]; failed calls append nothing. Transient HTTP failures
//! (timeouts, 429, 5xx) are retried with exponential backoff and full
//! jitter up to `max_retries`.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Phase, Role, TokenLedger};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseFormat {
    FreeText,
    JsonObject,
}

/// One chat-completion request: a system prompt plus a single user message.
#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub model: String,
    pub system_prompt: String,
    pub user_message: String,
    pub temperature: f64,
    pub max_output_tokens: Option<u32>,
    pub response_format: ResponseFormat,
}

/// Completion content plus the provider-reported token usage.
///
/// `content` is always present; a backend returning zero-length content is
/// surfaced as [`GatewayError::EmptyResponse`] instead.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    pub content: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("auth error: {0}")]
    Auth(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend returned zero-length content")]
    EmptyResponse,
    #[error("mock script exhausted: no step left for this call")]
    ScriptExhausted,
    #[error("mock script mismatch: step expected user message containing {expected:?}")]
    ScriptMismatch { expected: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
}

/// One scripted mock step. When `matcher` is set, the served request's user
/// message must contain it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptStep {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matcher: Option<String>,
    pub response: String,
    #[serde(default)]
    pub input_tokens: u64,
    #[serde(default)]
    pub output_tokens: u64,
}

impl ScriptStep {
    pub fn new(response: impl Into<String>, input_tokens: u64, output_tokens: u64) -> Self {
        Self {
            matcher: None,
            response: response.into(),
            input_tokens,
            output_tokens,
        }
    }

    pub fn matching(
        matcher: impl Into<String>,
        response: impl Into<String>,
        input_tokens: u64,
        output_tokens: u64,
    ) -> Self {
        Self {
            matcher: Some(matcher.into()),
            response: response.into(),
            input_tokens,
            output_tokens,
        }
    }
}

/// Record of one served mock call, for transcript assertions in tests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub system_prompt: String,
    pub user_message: String,
    pub response: String,
}

#[derive(Debug)]
struct MockState {
    steps: VecDeque<ScriptStep>,
    transcript: Vec<TranscriptEntry>,
}

/// An ordered script of canned responses. The script is internally
/// synchronized, so a config holding it can be shared across worker threads;
/// scripts exercised concurrently should pin steps with matchers.
#[derive(Debug, Clone)]
pub struct MockScript {
    inner: Arc<Mutex<MockState>>,
}

impl MockScript {
    pub fn new(steps: Vec<ScriptStep>) -> Self {
        assert!(!steps.is_empty(), "mock script requires at least one step");
        Self {
            inner: Arc::new(Mutex::new(MockState {
                steps: steps.into(),
                transcript: Vec::new(),
            })),
        }
    }

    /// Parse a script from JSON Lines, one [`ScriptStep`] object per line.
    pub fn from_jsonl(text: &str) -> Result<Self, GatewayError> {
        let mut steps = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let step: ScriptStep = serde_json::from_str(line).map_err(|e| {
                GatewayError::InvalidConfig(format!("script line {}: {e}", lineno + 1))
            })?;
            steps.push(step);
        }
        if steps.is_empty() {
            return Err(GatewayError::InvalidConfig(
                "script file has no steps".into(),
            ));
        }
        Ok(Self::new(steps))
    }

    fn serve(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let mut state = self.inner.lock().unwrap();
        let step = match state.steps.front() {
            None => return Err(GatewayError::ScriptExhausted),
            Some(step) => step,
        };
        if let Some(matcher) = &step.matcher {
            if !request.user_message.contains(matcher.as_str()) {
                return Err(GatewayError::ScriptMismatch {
                    expected: matcher.clone(),
                });
            }
        }
        let step = state.steps.pop_front().expect("front checked above");
        state.transcript.push(TranscriptEntry {
            system_prompt: request.system_prompt.clone(),
            user_message: request.user_message.clone(),
            response: step.response.clone(),
        });
        Ok(ChatResponse {
            content: step.response,
            input_tokens: step.input_tokens,
            output_tokens: step.output_tokens,
        })
    }

    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.inner.lock().unwrap().transcript.clone()
    }

    pub fn remaining(&self) -> usize {
        self.inner.lock().unwrap().steps.len()
    }
}

#[derive(Debug, Clone)]
pub enum BackendKind {
    Http { base_url: String },
    Mock { script: MockScript },
}

/// How to reach one backend. Cloning a mock config shares its script state.
#[derive(Debug, Clone)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Name of the environment variable holding the bearer token (http only).
    pub api_key_env_var: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub retry_base_delay: Duration,
}

impl BackendConfig {
    pub fn http(base_url: impl Into<String>, api_key_env_var: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Http {
                base_url: base_url.into(),
            },
            api_key_env_var: api_key_env_var.into(),
            timeout: Duration::from_secs(120),
            max_retries: 3,
            retry_base_delay: Duration::from_millis(500),
        }
    }

    pub fn mock(script: MockScript) -> Self {
        Self {
            kind: BackendKind::Mock { script },
            api_key_env_var: String::new(),
            timeout: Duration::from_secs(120),
            max_retries: 0,
            retry_base_delay: Duration::ZERO,
        }
    }

    /// Handle on the script when this is a mock backend.
    pub fn script(&self) -> Option<&MockScript> {
        match &self.kind {
            BackendKind::Mock { script } => Some(script),
            BackendKind::Http { .. } => None,
        }
    }
}

/// Build a mock backend that serves the steps in order.
pub fn mock_script(steps: Vec<ScriptStep>) -> BackendConfig {
    BackendConfig::mock(MockScript::new(steps))
}

/// A backend plus the request defaults for one role (backbone, optimizer,
/// or judge): which model to ask for and at what temperature.
#[derive(Debug, Clone)]
pub struct Endpoint {
    pub backend: BackendConfig,
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: Option<u32>,
}

impl Endpoint {
    pub fn new(backend: BackendConfig, model: impl Into<String>, temperature: f64) -> Self {
        Self {
            backend,
            model: model.into(),
            temperature,
            max_output_tokens: None,
        }
    }

    /// A scripted endpoint for tests.
    pub fn mock(steps: Vec<ScriptStep>) -> Self {
        Self::new(mock_script(steps), "mock", 0.0)
    }

    pub fn request(
        &self,
        system_prompt: impl Into<String>,
        user_message: impl Into<String>,
        response_format: ResponseFormat,
    ) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            system_prompt: system_prompt.into(),
            user_message: user_message.into(),
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
            response_format,
        }
    }

    /// Handle on the script when this endpoint wraps a mock backend.
    pub fn script(&self) -> Option<&MockScript> {
        self.backend.script()
    }
}

/// Issue one chat completion against the configured backend.
///
/// On success exactly one ledger entry is recorded under (`role`, `phase`);
/// on any error the ledger is left untouched.
pub fn complete(
    request: &ChatRequest,
    config: &BackendConfig,
    ledger: &TokenLedger,
    role: Role,
    phase: Phase,
) -> Result<ChatResponse, GatewayError> {
    if request.system_prompt.is_empty() {
        return Err(GatewayError::InvalidRequest(
            "system_prompt is empty".into(),
        ));
    }
    if request.user_message.is_empty() {
        return Err(GatewayError::InvalidRequest("user_message is empty".into()));
    }

    let response = match &config.kind {
        BackendKind::Mock { script } => script.serve(request)?,
        BackendKind::Http { base_url } => http_complete(request, config, base_url)?,
    };

    if response.content.is_empty() {
        return Err(GatewayError::EmptyResponse);
    }
    ledger.record(role, phase, response.input_tokens, response.output_tokens);
    Ok(response)
}

#[derive(Serialize)]
struct ApiMessageOut<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct ApiRequest<'a> {
    model: &'a str,
    messages: [ApiMessageOut<'a>; 2],
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    response_format: Option<serde_json::Value>,
}

#[derive(Deserialize)]
struct ApiResponse {
    #[serde(default)]
    choices: Vec<ApiChoice>,
    #[serde(default)]
    usage: ApiUsage,
}

#[derive(Deserialize)]
struct ApiChoice {
    message: ApiMessageIn,
}

#[derive(Deserialize)]
struct ApiMessageIn {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize, Default)]
struct ApiUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

fn http_client() -> &'static reqwest::blocking::Client {
    static CLIENT: OnceLock<reqwest::blocking::Client> = OnceLock::new();
    CLIENT.get_or_init(reqwest::blocking::Client::new)
}

fn http_complete(
    request: &ChatRequest,
    config: &BackendConfig,
    base_url: &str,
) -> Result<ChatResponse, GatewayError> {
    let api_key = std::env::var(&config.api_key_env_var).map_err(|_| {
        GatewayError::Auth(format!(
            "environment variable `{}` is not set",
            config.api_key_env_var
        ))
    })?;
    let url = format!("{}/chat/completions", base_url.trim_end_matches('/'));
    let body = ApiRequest {
        model: &request.model,
        messages: [
            ApiMessageOut {
                role: "system",
                content: &request.system_prompt,
            },
            ApiMessageOut {
                role: "user",
                content: &request.user_message,
            },
        ],
        temperature: request.temperature,
        max_tokens: request.max_output_tokens,
        response_format: match request.response_format {
            ResponseFormat::FreeText => None,
            ResponseFormat::JsonObject => Some(serde_json::json!({"type": "json_object"})),
        },
    };

    let mut last_failure = String::new();
    for attempt in 0..=config.max_retries {
        if attempt > 0 {
            backoff_sleep(config.retry_base_delay, attempt - 1);
        }
        let sent = http_client()
            .post(&url)
            .bearer_auth(&api_key)
            .timeout(config.timeout)
            .json(&body)
            .send();
        let response = match sent {
            Ok(response) => response,
            Err(e) => {
                // Connection failures and timeouts are transient.
                last_failure = format!("request failed: {e}");
                continue;
            }
        };
        let status = response.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(GatewayError::Auth(format!("backend returned {status}")));
        }
        if status.as_u16() == 429 || status.is_server_error() {
            last_failure = format!("backend returned {status}");
            continue;
        }
        if !status.is_success() {
            return Err(GatewayError::Transport(format!(
                "backend returned {status}"
            )));
        }
        let parsed: ApiResponse = response
            .json()
            .map_err(|e| GatewayError::Transport(format!("malformed response body: {e}")))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| GatewayError::Transport("response has no choices".into()))?
            .message
            .content
            .unwrap_or_default();
        return Ok(ChatResponse {
            content,
            input_tokens: parsed.usage.prompt_tokens,
            output_tokens: parsed.usage.completion_tokens,
        });
    }
    Err(GatewayError::Transport(format!(
        "retries exhausted after {} attempts: {last_failure}",
        config.max_retries + 1
    )))
}

/// Full-jitter exponential backoff: sleep uniform(0, base * 2^attempt).
fn backoff_sleep(base: Duration, attempt: u32) {
    let ceiling_ms = base.as_millis().saturating_mul(1u128 << attempt.min(16)) as u64;
    if ceiling_ms == 0 {
        return;
    }
    let jittered = rand::rng().random_range(0..=ceiling_ms);
    std::thread::sleep(Duration::from_millis(jittered));
}
