//! Text-generation backends for the policy and the copilot.
//!
//! [`HttpBackend`] speaks the OpenAI-compatible chat-completions dialect;
//! [`ScriptedBackend`] replays canned text keyed by `(task, step, phase)`
//! and is what the tests and the bundled suite run against.

use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::TaskSpec;
use crate::protocol::{render_continuation, render_tool_call, ToolChoice};

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
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

/// Which generation a request is for. Scripted backends route on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Up to and including `</tool>`.
    ToolCall,
    /// `<think>`, `<action>` and `<summary>` after the tool result.
    Continuation,
    /// A whole turn in one call.
    FullTurn,
    /// Copilot generation (Retriever or Calculator).
    Copilot,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScriptKey {
    pub task_id: String,
    pub step: usize,
    pub phase: Phase,
}

impl ScriptKey {
    pub fn new(task_id: impl Into<String>, step: usize, phase: Phase) -> Self {
        Self {
            task_id: task_id.into(),
            step,
            phase,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub messages: Vec<ChatMessage>,
    pub stop: Option<Vec<String>>,
    pub max_tokens: u32,
    pub temperature: f32,
    pub seed: Option<u64>,
    pub want_logprobs: bool,
    /// Routing hint for scripted backends; never sent over the wire.
    pub key: Option<ScriptKey>,
}

impl CompletionRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            stop: None,
            max_tokens: 1024,
            temperature: 1.0,
            seed: None,
            want_logprobs: false,
            key: None,
        }
    }

    pub fn with_stop(mut self, stop: impl Into<String>) -> Self {
        self.stop.get_or_insert_with(Vec::new).push(stop.into());
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_key(mut self, key: ScriptKey) -> Self {
        self.key = Some(key);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub finish_reason: FinishReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub supports_stop_sequences: bool,
    pub supports_logprobs: bool,
    /// Whether a request seed makes generation reproducible.
    pub honors_seed: bool,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("server answered {status}: {body}")]
    Status { status: u16, body: String },
    #[error("response does not match the chat-completions schema: {0}")]
    Schema(String),
    #[error("backend does not support stop sequences")]
    StopUnsupported,
    #[error("no scripted output for {0:?}")]
    NoScript(Option<ScriptKey>),
    #[error("empty message list")]
    EmptyRequest,
}

/// A text generator. Implementations must accept concurrent calls.
pub trait ModelBackend: Send + Sync {
    fn capabilities(&self) -> Capabilities;
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, ModelError>;
}

impl<B: ModelBackend + ?Sized> ModelBackend for &B {
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, ModelError> {
        (**self).complete(req)
    }
}

impl<B: ModelBackend + ?Sized> ModelBackend for std::sync::Arc<B> {
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, ModelError> {
        (**self).complete(req)
    }
}

/// Cut `text` at the earliest stop string, excluding it, the way
/// chat-completion servers do.
pub fn apply_stop(text: &str, stop: &[String]) -> (String, FinishReason) {
    match stop
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
    {
        Some(i) => (text[..i].to_owned(), FinishReason::Stop),
        None => (text.to_owned(), FinishReason::Stop),
    }
}

/// Replays canned text. Keys with several variants pick one by
/// `seed % variants`; a missing seed picks the first.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    entries: HashMap<ScriptKey, Vec<String>>,
    fallback: Option<String>,
    supports_stop: bool,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self {
            entries: HashMap::new(),
            fallback: None,
            supports_stop: true,
        }
    }

    /// A backend that answers every request with the same text.
    pub fn constant(text: impl Into<String>) -> Self {
        Self {
            fallback: Some(text.into()),
            ..Self::new()
        }
    }

    pub fn insert(&mut self, key: ScriptKey, text: impl Into<String>) -> &mut Self {
        self.entries.insert(key, vec![text.into()]);
        self
    }

    pub fn insert_variants(&mut self, key: ScriptKey, variants: Vec<String>) -> &mut Self {
        assert!(!variants.is_empty(), "variants must not be empty");
        self.entries.insert(key, variants);
        self
    }

    /// Pretend the server ignores stop sequences, so callers truncate.
    pub fn without_stop_support(mut self) -> Self {
        self.supports_stop = false;
        self
    }

    pub fn merge(&mut self, other: ScriptedBackend) {
        self.entries.extend(other.entries);
        if self.fallback.is_none() {
            self.fallback = other.fallback;
        }
    }

    fn lookup(&self, req: &CompletionRequest) -> Option<&str> {
        let picked = req.key.as_ref().and_then(|k| self.entries.get(k)).map(|v| {
            let i = req.seed.map_or(0, |s| (s % v.len() as u64) as usize);
            v[i].as_str()
        });
        picked.or(self.fallback.as_deref())
    }
}

impl ModelBackend for ScriptedBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports_stop_sequences: self.supports_stop,
            supports_logprobs: false,
            honors_seed: true,
        }
    }

    fn complete(&self, req: &CompletionRequest) -> Result<Completion, ModelError> {
        if req.messages.is_empty() {
            return Err(ModelError::EmptyRequest);
        }
        if req.stop.is_some() && !self.supports_stop {
            return Err(ModelError::StopUnsupported);
        }
        let text = self
            .lookup(req)
            .ok_or_else(|| ModelError::NoScript(req.key.clone()))?;
        let (text, finish_reason) = match &req.stop {
            Some(stop) => apply_stop(text, stop),
            None => (text.to_owned(), FinishReason::Stop),
        };
        Ok(Completion {
            text,
            finish_reason,
            token_logprobs: None,
        })
    }
}

/// Progress line the scripted golden policy reports after step `k` (1-based).
pub fn progress_line(k: usize, total: usize, kind: &str) -> String {
    format!("Progress {k}/{total}: completed a {kind} step.")
}

/// Default copilot output when a golden tool step carries none.
fn default_tool_output(tool: ToolChoice) -> String {
    match tool {
        ToolChoice::Calculator => "<think>Nothing to compute.</think>\n<python>\nprint(0)\n</python>".into(),
        _ => "<think>Summarize the records.</think> <answer>No relevant information.</answer>".into(),
    }
}

/// Oracle policy for a task: at every step it emits a well-formed turn whose
/// action is the golden action and whose tool calls follow the task's tool
/// steps. It also answers copilot requests with the golden tool content, so
/// one backend can serve as both policy and copilot.
pub fn scripted_from_golden(spec: &TaskSpec) -> ScriptedBackend {
    let mut b = ScriptedBackend::new();
    let n = spec.golden.len();
    for (t, g) in spec.golden.iter().enumerate() {
        let tool = if spec.is_tool_step(t) {
            spec.tool_label
        } else {
            ToolChoice::None
        };
        let thought = g
            .thought
            .clone()
            .unwrap_or_else(|| format!("Step {}: perform {}.", t + 1, g.action.kind()));
        let summary = progress_line(t + 1, n, g.action.kind().name());
        let call = render_tool_call(tool);
        let cont = render_continuation(&thought, &g.action, &summary);
        let key = |phase| ScriptKey::new(&spec.task_id, t, phase);
        b.insert(key(Phase::ToolCall), format!("{call}\n{cont}"));
        b.insert(key(Phase::Continuation), cont.clone());
        b.insert(key(Phase::FullTurn), format!("{call}\n{cont}"));
        if tool.is_tool() {
            b.insert(
                key(Phase::Copilot),
                g.tool_output.clone().unwrap_or_else(|| default_tool_output(tool)),
            );
        }
    }
    b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "HttpConfig::default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "HttpConfig::default_pool")]
    pub pool_size: usize,
    #[serde(default = "HttpConfig::default_retries")]
    pub max_retries: u32,
    #[serde(default = "HttpConfig::default_backoff")]
    pub backoff_ms: u64,
    #[serde(default = "HttpConfig::default_true")]
    pub supports_stop_sequences: bool,
    #[serde(default)]
    pub forward_seed: bool,
}

impl HttpConfig {
    fn default_timeout() -> f64 {
        120.0
    }
    fn default_pool() -> usize {
        8
    }
    fn default_retries() -> u32 {
        3
    }
    fn default_backoff() -> u64 {
        250
    }
    fn default_true() -> bool {
        true
    }

    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: None,
            timeout_secs: Self::default_timeout(),
            pool_size: Self::default_pool(),
            max_retries: Self::default_retries(),
            backoff_ms: Self::default_backoff(),
            supports_stop_sequences: true,
            forward_seed: false,
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    #[serde(skip_serializing_if = "Option::is_none")]
    stop: Option<&'a [String]>,
    max_tokens: u32,
    temperature: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    logprobs: bool,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    content: Vec<WireTokenLogprob>,
}

#[derive(Deserialize)]
struct WireTokenLogprob {
    logprob: f64,
}

/// Blocking chat-completions client with exponential-backoff retries on
/// transport failures.
pub struct HttpBackend {
    cfg: HttpConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Result<Self, ModelError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .pool_max_idle_per_host(cfg.pool_size)
            .build()
            .map_err(|e| ModelError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        let api_key = cfg
            .api_key_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok());
        Ok(Self {
            cfg,
            client,
            api_key,
        })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.cfg
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'))
    }

    fn send_once(&self, body: &WireRequest<'_>) -> Result<reqwest::blocking::Response, reqwest::Error> {
        let mut rb = self.client.post(self.endpoint()).json(body);
        if let Some(key) = &self.api_key {
            rb = rb.bearer_auth(key);
        }
        rb.send()
    }
}

fn excerpt(body: &str) -> String {
    const MAX: usize = 512;
    if body.len() <= MAX {
        return body.to_owned();
    }
    let mut end = MAX;
    while !body.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}...", &body[..end])
}

impl ModelBackend for HttpBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports_stop_sequences: self.cfg.supports_stop_sequences,
            supports_logprobs: true,
            honors_seed: self.cfg.forward_seed,
        }
    }

    fn complete(&self, req: &CompletionRequest) -> Result<Completion, ModelError> {
        if req.messages.is_empty() {
            return Err(ModelError::EmptyRequest);
        }
        if req.stop.is_some() && !self.cfg.supports_stop_sequences {
            return Err(ModelError::StopUnsupported);
        }
        let body = WireRequest {
            model: &self.cfg.model,
            messages: &req.messages,
            stop: req.stop.as_deref(),
            max_tokens: req.max_tokens,
            temperature: req.temperature,
            seed: req.seed.filter(|_| self.cfg.forward_seed),
            logprobs: req.want_logprobs,
        };

        let attempts_allowed = self.cfg.max_retries + 1;
        let mut attempt = 0;
        let resp = loop {
            attempt += 1;
            match self.send_once(&body) {
                Ok(r) => break r,
                Err(e) if attempt < attempts_allowed => {
                    let delay = self.cfg.backoff_ms.saturating_mul(1 << (attempt - 1));
                    tracing::warn!(attempt, error = %e, "chat completion transport failure, retrying");
                    std::thread::sleep(Duration::from_millis(delay));
                }
                Err(e) => {
                    return Err(ModelError::Transport {
                        attempts: attempt,
                        message: e.to_string(),
                    })
                }
            }
        };

        let status = resp.status();
        let text = resp.text().map_err(|e| ModelError::Transport {
            attempts: attempt,
            message: e.to_string(),
        })?;
        if !status.is_success() {
            return Err(ModelError::Status {
                status: status.as_u16(),
                body: excerpt(&text),
            });
        }
        let parsed: WireResponse =
            serde_json::from_str(&text).map_err(|e| ModelError::Schema(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| ModelError::Schema("no choices".into()))?;
        let content = choice
            .message
            .content
            .ok_or_else(|| ModelError::Schema("choice has no message content".into()))?;
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("stop") | None => FinishReason::Stop,
            Some("length") => FinishReason::Length,
            Some(_) => FinishReason::Other,
        };
        Ok(Completion {
            text: content,
            finish_reason,
            token_logprobs: choice
                .logprobs
                .map(|l| l.content.into_iter().map(|t| t.logprob).collect()),
        })
    }
}
