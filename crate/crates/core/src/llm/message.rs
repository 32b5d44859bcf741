use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use super::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }

    fn parse(s: &str) -> Result<Self, GatewayError> {
        match s {
            "system" => Ok(Role::System),
            "user" => Ok(Role::User),
            "assistant" => Ok(Role::Assistant),
            other => Err(GatewayError::Protocol(format!("unknown role {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum ImageSource {
    Base64(String),
    Url(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub media_type: String,
    pub source: ImageSource,
}

impl ImageRef {
    pub fn base64(media_type: impl Into<String>, data: impl Into<String>) -> Self {
        Self {
            media_type: media_type.into(),
            source: ImageSource::Base64(data.into()),
        }
    }

    pub fn from_bytes(media_type: impl Into<String>, bytes: &[u8]) -> Self {
        use base64::Engine;
        Self::base64(media_type, base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn url(media_type: impl Into<String>, url: impl Into<String>) -> Self {
        Self {
            media_type: media_type.into(),
            source: ImageSource::Url(url.into()),
        }
    }

    /// Reads an image file, guessing the media type from its extension.
    pub fn from_path(path: impl AsRef<std::path::Path>) -> std::io::Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        let media = media_type_for(&path.to_string_lossy()).unwrap_or("application/octet-stream");
        Ok(Self::from_bytes(media, &bytes))
    }

    pub fn has_payload(&self) -> bool {
        let value = match &self.source {
            ImageSource::Base64(s) | ImageSource::Url(s) => s,
        };
        !value.trim().is_empty() && !self.media_type.trim().is_empty()
    }

    fn wire_url(&self) -> String {
        match &self.source {
            ImageSource::Base64(data) => format!("data:{};base64,{}", self.media_type, data),
            ImageSource::Url(url) => url.clone(),
        }
    }

    fn from_wire_url(url: &str) -> Result<Self, GatewayError> {
        if let Some(rest) = url.strip_prefix("data:") {
            let (media, data) = rest
                .split_once(";base64,")
                .ok_or_else(|| GatewayError::Protocol("data URL without base64 payload".into()))?;
            return Ok(Self::base64(media, data));
        }
        let media = media_type_for(url).ok_or_else(|| {
            GatewayError::Protocol(format!("cannot infer media type of image URL {url}"))
        })?;
        Ok(Self::url(media, url))
    }
}

fn media_type_for(name: &str) -> Option<&'static str> {
    let lower = name.to_ascii_lowercase();
    let ext = lower.rsplit('.').next()?;
    Some(match ext {
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "gif" => "image/gif",
        "webp" => "image/webp",
        "bmp" => "image/bmp",
        "tif" | "tiff" => "image/tiff",
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ContentPart {
    Text { text: String },
    Image { image: ImageRef },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn new(role: Role, parts: Vec<ContentPart>) -> Self {
        Self { role, parts }
    }

    pub fn text_message(role: Role, text: impl Into<String>) -> Self {
        Self::new(role, vec![ContentPart::Text { text: text.into() }])
    }

    pub fn system(text: impl Into<String>) -> Self {
        Self::text_message(Role::System, text)
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self::text_message(Role::User, text)
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self::text_message(Role::Assistant, text)
    }

    /// Concatenated text parts, newline separated.
    pub fn text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                ContentPart::Text { text } => Some(text.as_str()),
                ContentPart::Image { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageRef> {
        self.parts.iter().filter_map(|p| match p {
            ContentPart::Image { image } => Some(image),
            ContentPart::Text { .. } => None,
        })
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.parts.is_empty() {
            return Err(GatewayError::Protocol("message has no content parts".into()));
        }
        if self.images().any(|i| i.media_type.trim().is_empty()) {
            return Err(GatewayError::Protocol("image part without media type".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            temperature: None,
            max_tokens: None,
            model: None,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = Some(temperature);
        self
    }

    pub fn digest(&self) -> String {
        digest(&self.messages)
    }

    pub fn last_user_text(&self) -> Option<String> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(ChatMessage::text)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub message: ChatMessage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finish_reason: Option<String>,
    #[serde(default)]
    pub usage: Usage,
}

impl ChatResponse {
    pub fn text_with_reason(text: impl Into<String>, reason: &str) -> Self {
        Self {
            message: ChatMessage::assistant(text),
            finish_reason: Some(reason.to_string()),
            usage: Usage::default(),
        }
    }

    pub fn from_text(text: impl Into<String>) -> Self {
        Self::text_with_reason(text, "stop")
    }

    pub fn content(&self) -> String {
        self.message.text()
    }
}

/// SHA-256 over the canonical JSON encoding of a message list.
pub fn digest(messages: &[ChatMessage]) -> String {
    let bytes = serde_json::to_vec(messages).expect("messages serialize");
    hex::encode(Sha256::digest(&bytes))
}

fn message_to_wire(m: &ChatMessage) -> Value {
    let content = match &m.parts[..] {
        [ContentPart::Text { text }] => Value::String(text.clone()),
        parts => Value::Array(
            parts
                .iter()
                .map(|p| match p {
                    ContentPart::Text { text } => json!({"type": "text", "text": text}),
                    ContentPart::Image { image } => {
                        json!({"type": "image_url", "image_url": {"url": image.wire_url()}})
                    }
                })
                .collect(),
        ),
    };
    json!({"role": m.role.as_str(), "content": content})
}

fn message_from_wire(v: &Value) -> Result<ChatMessage, GatewayError> {
    let role = v
        .get("role")
        .and_then(Value::as_str)
        .ok_or_else(|| GatewayError::Protocol("message without role".into()))?;
    let role = Role::parse(role)?;
    let parts = match v.get("content") {
        Some(Value::String(s)) => vec![ContentPart::Text { text: s.clone() }],
        Some(Value::Array(items)) => items
            .iter()
            .map(|item| match item.get("type").and_then(Value::as_str) {
                Some("text") => item
                    .get("text")
                    .and_then(Value::as_str)
                    .map(|t| ContentPart::Text { text: t.to_string() })
                    .ok_or_else(|| GatewayError::Protocol("text part without text".into())),
                Some("image_url") => {
                    let url = item
                        .pointer("/image_url/url")
                        .and_then(Value::as_str)
                        .ok_or_else(|| GatewayError::Protocol("image part without url".into()))?;
                    Ok(ContentPart::Image {
                        image: ImageRef::from_wire_url(url)?,
                    })
                }
                other => Err(GatewayError::Protocol(format!("unknown content part {other:?}"))),
            })
            .collect::<Result<_, _>>()?,
        Some(Value::Null) | None => Vec::new(),
        Some(other) => {
            return Err(GatewayError::Protocol(format!("unexpected content {other}")));
        }
    };
    Ok(ChatMessage { role, parts })
}

pub fn request_to_wire(request: &ChatRequest, default_model: &str) -> Value {
    let mut body = Map::new();
    body.insert(
        "model".into(),
        Value::String(request.model.clone().unwrap_or_else(|| default_model.to_string())),
    );
    body.insert(
        "messages".into(),
        Value::Array(request.messages.iter().map(message_to_wire).collect()),
    );
    if let Some(t) = request.temperature {
        body.insert("temperature".into(), json!(t));
    }
    if let Some(m) = request.max_tokens {
        body.insert("max_tokens".into(), json!(m));
    }
    Value::Object(body)
}

pub fn request_from_wire(v: &Value) -> Result<ChatRequest, GatewayError> {
    let messages = v
        .get("messages")
        .and_then(Value::as_array)
        .ok_or_else(|| GatewayError::Protocol("request without messages".into()))?
        .iter()
        .map(message_from_wire)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ChatRequest {
        messages,
        temperature: v.get("temperature").and_then(Value::as_f64),
        max_tokens: v.get("max_tokens").and_then(Value::as_u64).map(|m| m as u32),
        model: v.get("model").and_then(Value::as_str).map(str::to_string),
    })
}

pub fn response_to_wire(response: &ChatResponse) -> Value {
    json!({
        "object": "chat.completion",
        "choices": [{
            "index": 0,
            "message": message_to_wire(&response.message),
            "finish_reason": response.finish_reason,
        }],
        "usage": {
            "prompt_tokens": response.usage.prompt_tokens,
            "completion_tokens": response.usage.completion_tokens,
            "total_tokens": response.usage.prompt_tokens + response.usage.completion_tokens,
        }
    })
}

pub fn response_from_wire(v: &Value) -> Result<ChatResponse, GatewayError> {
    let choice = v
        .pointer("/choices/0")
        .ok_or_else(|| GatewayError::Protocol("response without choices".into()))?;
    let raw = choice
        .get("message")
        .ok_or_else(|| GatewayError::Protocol("choice without message".into()))?;
    let mut message = message_from_wire(raw)?;
    if message.role != Role::Assistant {
        return Err(GatewayError::Protocol(format!(
            "expected an assistant message, got {:?}",
            message.role
        )));
    }
    if message.parts.is_empty() {
        message.parts.push(ContentPart::Text { text: String::new() });
    }
    let usage = Usage {
        prompt_tokens: v.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        completion_tokens: v
            .pointer("/usage/completion_tokens")
            .and_then(Value::as_u64)
            .unwrap_or(0),
    };
    Ok(ChatResponse {
        message,
        finish_reason: choice
            .get("finish_reason")
            .and_then(Value::as_str)
            .map(str::to_string),
        usage,
    })
}
