//! Remote vision-language model adapter.
//!
//! [`VlmClient`] talks to a chat-completions style HTTP endpoint that
//! accepts interleaved text and images (base64 PNG data URLs).
//! [`EndpointPolicy`] wraps it as a [`Policy`] so a live model can drive
//! the focus engine. Scripted policies for tests are re-exported from core.

use std::fmt;
use std::io::Cursor;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use focusloop_core::policy::{Policy, PolicyError, TurnContext};
use focusloop_core::protocol::{serialize_segments, Segment};
use focusloop_core::trajectory::{ImageRef, StepRecord};
use serde::Deserialize;
use serde_json::{json, Value};

pub use focusloop_core::policy::{ScriptBook, ScriptedPolicy};

/// Environment variable holding the endpoint API key.
pub const API_KEY_ENV: &str = "FOCUSLOOP_API_KEY";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VlmError {
    #[error("API key missing: set {API_KEY_ENV}")]
    AuthMissing,
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned status {code}: {body}")]
    NonSuccessStatus { code: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid config: {0}")]
    Config(String),
}

/// How observation images are fed back to the model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolResultRole {
    /// Everything in one user turn, with `<image>` markers in the history.
    #[default]
    User,
    /// Assistant turns followed by `tool` turns carrying each observation.
    Tool,
}

#[derive(Clone)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub max_retries: u32,
    pub max_in_flight: usize,
    pub temperature: f64,
    /// Fail with `AuthMissing` when no key is configured.
    pub require_auth: bool,
    /// First retry delay; doubles on every further retry.
    pub backoff_base: Duration,
    pub tool_result_role: ToolResultRole,
}

impl fmt::Debug for EndpointConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EndpointConfig")
            .field("base_url", &self.base_url)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("timeout", &self.timeout)
            .field("max_retries", &self.max_retries)
            .field("max_in_flight", &self.max_in_flight)
            .field("temperature", &self.temperature)
            .finish_non_exhaustive()
    }
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key: None,
            timeout: Duration::from_secs(60),
            max_retries: 2,
            max_in_flight: 4,
            temperature: 0.0,
            require_auth: true,
            backoff_base: Duration::from_millis(500),
            tool_result_role: ToolResultRole::User,
        }
    }

    /// Take the API key from [`API_KEY_ENV`].
    pub fn with_env_key(mut self) -> Self {
        self.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        self
    }

    /// Parse a TOML config file body. Keys: `base_url`, `model`,
    /// `timeout_s`, `max_retries`, `max_in_flight`, and optionally
    /// `temperature`, `require_auth`, `tool_result_role`. The key itself is
    /// never read from the file.
    pub fn from_toml_str(text: &str) -> Result<Self, VlmError> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct File {
            base_url: String,
            model: String,
            timeout_s: Option<f64>,
            max_retries: Option<u32>,
            max_in_flight: Option<usize>,
            temperature: Option<f64>,
            require_auth: Option<bool>,
            tool_result_role: Option<ToolResultRole>,
        }
        let f: File = toml::from_str(text).map_err(|e| VlmError::Config(e.to_string()))?;
        let mut cfg = EndpointConfig::new(f.base_url, f.model);
        if let Some(t) = f.timeout_s {
            if !(t > 0.0 && t.is_finite()) {
                return Err(VlmError::Config("timeout_s must be positive".into()));
            }
            cfg.timeout = Duration::from_secs_f64(t);
        }
        cfg.max_retries = f.max_retries.unwrap_or(cfg.max_retries);
        cfg.max_in_flight = f.max_in_flight.unwrap_or(cfg.max_in_flight);
        cfg.temperature = f.temperature.unwrap_or(cfg.temperature);
        cfg.require_auth = f.require_auth.unwrap_or(cfg.require_auth);
        cfg.tool_result_role = f.tool_result_role.unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), VlmError> {
        if self.timeout.is_zero() {
            return Err(VlmError::Config("timeout must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(VlmError::Config("max_in_flight must be >= 1".into()));
        }
        if self.base_url.is_empty() || self.model.is_empty() {
            return Err(VlmError::Config("base_url and model are required".into()));
        }
        Ok(())
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

// ---------------------------------------------------------------------------
// Messages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContentPart {
    Text(String),
    /// PNG bytes.
    Image(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatTurn {
    pub role: Role,
    pub content: Vec<ContentPart>,
}

impl ChatTurn {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            content: vec![ContentPart::Text(text.into())],
        }
    }

    fn to_json(&self) -> Value {
        let parts: Vec<Value> = self
            .content
            .iter()
            .map(|p| match p {
                ContentPart::Text(t) => json!({"type": "text", "text": t}),
                ContentPart::Image(png) => json!({
                    "type": "image_url",
                    "image_url": {"url": format!("data:image/png;base64,{}", B64.encode(png))},
                }),
            })
            .collect();
        json!({"role": self.role.as_str(), "content": parts})
    }
}

/// PNG encoding of an image's pixels.
pub fn png_bytes(image: &ImageRef) -> Result<Vec<u8>, VlmError> {
    let raster = image
        .raster()
        .map_err(|e| VlmError::InvalidRequest(e.to_string()))?
        .ok_or_else(|| VlmError::InvalidRequest(format!("image `{}` has no pixels", image.id())))?;
    let mut out = Cursor::new(Vec::new());
    raster
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| VlmError::InvalidRequest(e.to_string()))?;
    Ok(out.into_inner())
}

/// Request body for `turns`. The API key never appears here.
pub fn request_body(config: &EndpointConfig, turns: &[ChatTurn]) -> Value {
    json!({
        "model": config.model,
        "messages": turns.iter().map(ChatTurn::to_json).collect::<Vec<_>>(),
        "temperature": config.temperature,
        "stream": false,
    })
}

fn completion_text(v: &Value) -> Result<String, VlmError> {
    let content = v
        .pointer("/choices/0/message/content")
        .ok_or_else(|| VlmError::MalformedResponse("no choices[0].message.content".into()))?;
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect()),
        _ => Err(VlmError::MalformedResponse("content is neither text nor parts".into())),
    }
}

// ---------------------------------------------------------------------------
// Client
// ---------------------------------------------------------------------------

/// Counting gate bounding concurrent requests.
struct Gate {
    limit: usize,
    busy: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(limit: usize) -> Self {
        Self {
            limit,
            busy: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut busy = self.busy.lock().unwrap_or_else(|p| p.into_inner());
        while *busy >= self.limit {
            busy = self.freed.wait(busy).unwrap_or_else(|p| p.into_inner());
        }
        *busy += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut busy = self.0.busy.lock().unwrap_or_else(|p| p.into_inner());
        *busy -= 1;
        self.0.freed.notify_one();
    }
}

enum Attempt {
    Done(String),
    Retry(VlmError),
    Fail(VlmError),
}

pub struct VlmClient {
    config: EndpointConfig,
    http: reqwest::blocking::Client,
    gate: Gate,
}

impl fmt::Debug for VlmClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VlmClient").field("config", &self.config).finish_non_exhaustive()
    }
}

impl VlmClient {
    pub fn new(config: EndpointConfig) -> Result<Self, VlmError> {
        config.validate()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| VlmError::Transport(e.to_string()))?;
        Ok(Self {
            gate: Gate::new(config.max_in_flight),
            config,
            http,
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    /// Send `turns` and return the assistant text.
    ///
    /// Connection failures, timeouts before any response, and 429/5xx
    /// statuses are retried up to `max_retries` times with exponential
    /// backoff. A response whose body fails mid-read is not retried.
    pub fn chat_complete(&self, turns: &[ChatTurn]) -> Result<String, VlmError> {
        if turns.is_empty() {
            return Err(VlmError::InvalidRequest("no turns".into()));
        }
        if turns.iter().any(|t| t.content.is_empty()) {
            return Err(VlmError::InvalidRequest("turn with empty content".into()));
        }
        if self.config.require_auth && self.config.api_key.is_none() {
            return Err(VlmError::AuthMissing);
        }
        let body = request_body(&self.config, turns).to_string();
        let mut delay = self.config.backoff_base;
        let mut attempt = 0;
        loop {
            let outcome = {
                let _permit = self.gate.acquire();
                self.attempt(&body)
            };
            match outcome {
                Attempt::Done(text) => return Ok(text),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) if attempt >= self.config.max_retries => return Err(e),
                Attempt::Retry(_) => {
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
            }
        }
    }

    fn attempt(&self, body: &str) -> Attempt {
        let mut req = self
            .http
            .post(self.config.endpoint())
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_string());
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return Attempt::Retry(VlmError::Timeout),
            Err(e) => return Attempt::Retry(VlmError::Transport(e.to_string())),
        };
        let status = resp.status();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) if e.is_timeout() => return Attempt::Fail(VlmError::Timeout),
            Err(e) => return Attempt::Fail(VlmError::Transport(e.to_string())),
        };
        if !status.is_success() {
            let err = VlmError::NonSuccessStatus {
                code: status.as_u16(),
                body: text.chars().take(200).collect(),
            };
            return if status.is_server_error() || status.as_u16() == 429 {
                Attempt::Retry(err)
            } else {
                Attempt::Fail(err)
            };
        }
        match serde_json::from_str::<Value>(&text) {
            Ok(v) => match completion_text(&v) {
                Ok(t) => Attempt::Done(t),
                Err(e) => Attempt::Fail(e),
            },
            Err(e) => Attempt::Fail(VlmError::MalformedResponse(e.to_string())),
        }
    }
}

// ---------------------------------------------------------------------------
// Policy adapter
// ---------------------------------------------------------------------------

pub const DEFAULT_TEMPLATE: &str = "Query: {query}\n\nThink in the mind first, and then decide whether to call tools one or more times OR provide final answer. Format strictly as: <think>...</think> <tool_call>...</tool_call> (if any tools needed) OR <answer>...</answer> (if no tools needed).{history}";

/// Prompt with `{query}` and `{history}` slots.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate(String);

impl PromptTemplate {
    pub fn new(template: impl Into<String>) -> Result<Self, VlmError> {
        let t = template.into();
        if !t.contains("{query}") || !t.contains("{history}") {
            return Err(VlmError::Config("template needs {query} and {history} slots".into()));
        }
        Ok(Self(t))
    }

    pub fn render(&self, query: &str, history: &str) -> String {
        self.0.replace("{query}", query).replace("{history}", history)
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self(DEFAULT_TEMPLATE.to_string())
    }
}

fn step_segment(step: &StepRecord) -> Option<Segment> {
    match step {
        StepRecord::Think { text } => Some(Segment::Think(text.clone())),
        StepRecord::ToolCall { region, .. } => Some(Segment::zoom(*region)),
        StepRecord::Answer { text } => Some(Segment::Answer(text.clone())),
        StepRecord::Observation { .. } => None,
    }
}

fn serialize(segs: &[Segment]) -> Result<String, VlmError> {
    serialize_segments(segs).map_err(|e| VlmError::InvalidRequest(e.to_string()))
}

/// Build the conversation for one turn. Observation images appear in step
/// order in both encodings.
pub fn build_turns(
    template: &PromptTemplate,
    role: ToolResultRole,
    query: &str,
    root: &ImageRef,
    history: &[StepRecord],
) -> Result<Vec<ChatTurn>, VlmError> {
    let root_png = png_bytes(root)?;
    match role {
        ToolResultRole::User => {
            let mut transcript = String::new();
            let mut pending = Vec::new();
            let mut images = Vec::new();
            let flush = |pending: &mut Vec<Segment>, out: &mut String| -> Result<(), VlmError> {
                if !pending.is_empty() {
                    out.push('\n');
                    out.push_str(&serialize(pending)?);
                    pending.clear();
                }
                Ok(())
            };
            for step in history {
                match step {
                    StepRecord::Observation { image, .. } => {
                        flush(&mut pending, &mut transcript)?;
                        transcript.push_str("\n<image>");
                        images.push(ContentPart::Image(png_bytes(image)?));
                    }
                    other => pending.extend(step_segment(other)),
                }
            }
            flush(&mut pending, &mut transcript)?;
            let mut content = vec![
                ContentPart::Image(root_png),
                ContentPart::Text(template.render(query, &transcript)),
            ];
            content.extend(images);
            Ok(vec![ChatTurn {
                role: Role::User,
                content,
            }])
        }
        ToolResultRole::Tool => {
            let mut turns = vec![ChatTurn {
                role: Role::User,
                content: vec![ContentPart::Image(root_png), ContentPart::Text(template.render(query, ""))],
            }];
            let mut pending = Vec::new();
            for step in history {
                match step {
                    StepRecord::Observation { image, .. } => {
                        if !pending.is_empty() {
                            turns.push(ChatTurn::text(Role::Assistant, serialize(&pending)?));
                            pending.clear();
                        }
                        turns.push(ChatTurn {
                            role: Role::Tool,
                            content: vec![ContentPart::Image(png_bytes(image)?)],
                        });
                    }
                    other => pending.extend(step_segment(other)),
                }
            }
            if !pending.is_empty() {
                turns.push(ChatTurn::text(Role::Assistant, serialize(&pending)?));
            }
            Ok(turns)
        }
    }
}

/// A remote model as a policy.
#[derive(Debug)]
pub struct EndpointPolicy {
    client: VlmClient,
    template: PromptTemplate,
}

impl EndpointPolicy {
    pub fn client(&self) -> &VlmClient {
        &self.client
    }
}

impl Policy for EndpointPolicy {
    fn next_turn(&self, ctx: &TurnContext<'_>) -> Result<String, PolicyError> {
        let turns = build_turns(
            &self.template,
            self.client.config.tool_result_role,
            ctx.query,
            ctx.image,
            ctx.history,
        )
        .map_err(|e| PolicyError::Failed(e.to_string()))?;
        self.client
            .chat_complete(&turns)
            .map_err(|e| PolicyError::Failed(e.to_string()))
    }
}

pub fn as_policy(config: EndpointConfig, template: PromptTemplate) -> Result<EndpointPolicy, VlmError> {
    Ok(EndpointPolicy {
        client: VlmClient::new(config)?,
        template,
    })
}

/// Returns the k-th string on the k-th turn.
pub fn scripted_policy<S: Into<String>>(script: impl IntoIterator<Item = S>) -> Result<ScriptedPolicy, PolicyError> {
    ScriptedPolicy::new(script)
}
