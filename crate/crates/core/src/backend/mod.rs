//! Chat-completion backends: HTTP, offline batch files, a scene-driven mock
//! and a replay backend for answering from previously ingested results.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub mod batch;
pub mod http;
pub mod ledger;
pub mod mock;
pub mod replay;

pub use ledger::{MeteredBackend, UsageLedger, UsageRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
    Stage3,
    SingleStage,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Stage3 => "stage3",
            Stage::SingleStage => "single_stage",
        }
    }

    pub const ALL: [Stage; 4] = [
        Stage::Stage1,
        Stage::Stage2,
        Stage::Stage3,
        Stage::SingleStage,
    ];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Part {
    Text(String),
    ImageData { media_type: String, base64: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl Message {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            parts: vec![Part::Text(text.into())],
        }
    }

    pub fn image_count(&self) -> usize {
        self.parts
            .iter()
            .filter(|p| matches!(p, Part::ImageData { .. }))
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseFormat {
    #[default]
    Text,
    JsonObject,
}

/// Pipeline bookkeeping carried alongside a request but never sent.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RequestMeta {
    pub pair_id: Option<String>,
    pub stage: Option<Stage>,
    pub image_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub request_id: String,
    pub model: String,
    pub messages: Vec<Message>,
    pub response_format: ResponseFormat,
    pub max_output_tokens: Option<u32>,
    pub temperature: f64,
    pub meta: RequestMeta,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub request_id: String,
    pub text: String,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("network error: {0}")]
    Network(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("HTTP {status} after {attempts} attempts: {body}")]
    RetriesExhausted {
        status: u16,
        attempts: u32,
        body: String,
    },
    #[error("response has no choices")]
    MissingChoices,
    #[error("malformed response: {0}")]
    Decode(String),
    #[error("environment variable {0} holding the API key is not set")]
    MissingApiKey(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("mock backend: {0}")]
    Mock(String),
    #[error("no stored response for request {0}")]
    Pending(String),
    #[error("batch result for {id}: {message}")]
    BatchFailed { id: String, message: String },
}

impl BackendError {
    /// Short machine-readable reason used in pipeline results.
    pub fn reason(&self) -> &'static str {
        match self {
            BackendError::Network(_) => "network",
            BackendError::Http { .. } => "http_error",
            BackendError::RetriesExhausted { .. } => "retries_exhausted",
            BackendError::MissingChoices => "missing_choices",
            BackendError::Decode(_) => "malformed_response",
            BackendError::MissingApiKey(_) => "missing_api_key",
            BackendError::InvalidRequest(_) => "invalid_request",
            BackendError::Mock(_) => "mock",
            BackendError::Pending(_) => "pending",
            BackendError::BatchFailed { .. } => "batch_failed",
        }
    }
}

/// A chat-completions provider. Implementations may be shared across threads.
pub trait ChatBackend: Send + Sync {
    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError>;

    /// Upper bound on concurrent `send` calls the backend accepts.
    fn max_in_flight(&self) -> usize {
        1
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).send(req)
    }

    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).send(req)
    }

    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        use base64::Engine;
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("no messages".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {}",
                self.temperature
            )));
        }
        for m in &self.messages {
            for p in &m.parts {
                if let Part::ImageData { base64, .. } = p {
                    if m.role != Role::User {
                        return Err(BackendError::InvalidRequest(
                            "image outside a user message".into(),
                        ));
                    }
                    base64::engine::general_purpose::STANDARD
                        .decode(base64)
                        .map_err(|e| BackendError::InvalidRequest(format!("image payload: {e}")))?;
                }
            }
        }
        Ok(())
    }

    /// Concatenated text of every message, in order.
    pub fn all_text(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            for p in &m.parts {
                if let Part::Text(t) = p {
                    if !out.is_empty() {
                        out.push('\n');
                    }
                    out.push_str(t);
                }
            }
        }
        out
    }

    pub fn image_count(&self) -> usize {
        self.messages.iter().map(Message::image_count).sum()
    }

    /// OpenAI-compatible chat-completions body.
    pub fn to_wire_body(&self) -> Value {
        let messages: Vec<Value> = self
            .messages
            .iter()
            .map(|m| {
                let content: Vec<Value> = m
                    .parts
                    .iter()
                    .map(|p| match p {
                        Part::Text(t) => json!({"type": "text", "text": t}),
                        Part::ImageData { media_type, base64 } => json!({
                            "type": "image_url",
                            "image_url": {"url": format!("data:{media_type};base64,{base64}")}
                        }),
                    })
                    .collect();
                json!({"role": m.role, "content": content})
            })
            .collect();
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": self.temperature,
            "response_format": {"type": self.response_format},
        });
        if let Some(n) = self.max_output_tokens {
            body["max_tokens"] = json!(n);
        }
        body
    }

    /// Inverse of [`ChatRequest::to_wire_body`]; `meta` is left empty.
    pub fn from_wire_body(request_id: &str, body: &Value) -> Result<Self, BackendError> {
        let bad = |what: &str| BackendError::Decode(format!("request body: {what}"));
        let model = body["model"]
            .as_str()
            .ok_or_else(|| bad("model"))?
            .to_string();
        let temperature = body
            .get("temperature")
            .and_then(Value::as_f64)
            .unwrap_or(0.0);
        let response_format = match body
            .pointer("/response_format/type")
            .and_then(Value::as_str)
        {
            None | Some("text") => ResponseFormat::Text,
            Some("json_object") => ResponseFormat::JsonObject,
            Some(other) => return Err(bad(&format!("response_format {other}"))),
        };
        let max_output_tokens = body
            .get("max_tokens")
            .and_then(Value::as_u64)
            .map(|n| u32::try_from(n).map_err(|_| bad("max_tokens")))
            .transpose()?;
        let mut messages = Vec::new();
        for m in body["messages"].as_array().ok_or_else(|| bad("messages"))? {
            let role = match m["role"].as_str() {
                Some("system") => Role::System,
                Some("user") => Role::User,
                _ => return Err(bad("role")),
            };
            let parts = match &m["content"] {
                Value::String(s) => vec![Part::Text(s.clone())],
                Value::Array(items) => items
                    .iter()
                    .map(|item| match item["type"].as_str() {
                        Some("text") => Ok(Part::Text(
                            item["text"]
                                .as_str()
                                .ok_or_else(|| bad("text"))?
                                .to_string(),
                        )),
                        Some("image_url") => {
                            let url = item
                                .pointer("/image_url/url")
                                .and_then(Value::as_str)
                                .ok_or_else(|| bad("image_url"))?;
                            parse_data_url(url).ok_or_else(|| bad("image data url"))
                        }
                        _ => Err(bad("content part type")),
                    })
                    .collect::<Result<_, _>>()?,
                _ => return Err(bad("content")),
            };
            messages.push(Message { role, parts });
        }
        Ok(Self {
            request_id: request_id.to_string(),
            model,
            messages,
            response_format,
            max_output_tokens,
            temperature,
            meta: RequestMeta::default(),
        })
    }
}

fn parse_data_url(url: &str) -> Option<Part> {
    let rest = url.strip_prefix("data:")?;
    let (media_type, payload) = rest.split_once(";base64,")?;
    Some(Part::ImageData {
        media_type: media_type.to_string(),
        base64: payload.to_string(),
    })
}

/// Reads text and usage from a chat-completions response body.
pub fn parse_completion(request_id: &str, body: &Value) -> Result<ChatResponse, BackendError> {
    let choices = body
        .get("choices")
        .and_then(Value::as_array)
        .filter(|c| !c.is_empty())
        .ok_or(BackendError::MissingChoices)?;
    let content = &choices[0]["message"]["content"];
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => return Err(BackendError::Decode(format!("message content {other}"))),
    };
    let usage = |k: &str| {
        body.pointer(&format!("/usage/{k}"))
            .and_then(Value::as_u64)
            .unwrap_or(0)
    };
    Ok(ChatResponse {
        request_id: request_id.to_string(),
        text,
        prompt_tokens: usage("prompt_tokens"),
        output_tokens: usage("completion_tokens"),
    })
}

/// Chat-completions response body for `resp`, as a provider would return it.
pub fn completion_body(model: &str, resp: &ChatResponse) -> Value {
    json!({
        "id": format!("chatcmpl-{}", resp.request_id),
        "object": "chat.completion",
        "model": model,
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": resp.text},
            "finish_reason": "stop"
        }],
        "usage": {
            "prompt_tokens": resp.prompt_tokens,
            "completion_tokens": resp.output_tokens,
            "total_tokens": resp.prompt_tokens + resp.output_tokens
        }
    })
}
