//! OpenAI-compatible HTTP clients.
//!
//! Chat requests go to `{base}/chat/completions` with images inlined as
//! base64 PNG data URLs; embeddings go to `{base}/embeddings`, sending images
//! as data URLs in `input` (the convention of CLIP-serving gateways).

use std::time::Duration;

use base64::Engine;
use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{BackendError, Capabilities, ChatBackend, EmbeddingBackend};
use crate::model::ImageHandle;
use crate::prompt::{Piece, RenderedPrompt, Role};

pub const API_KEY_ENV: &str = "UNHATE_API_KEY";
pub const API_BASE_ENV: &str = "UNHATE_API_BASE";

/// Harm categories relaxed when minimum safety filtering is requested.
const SAFETY_CATEGORIES: [&str; 4] = [
    "HARM_CATEGORY_HARASSMENT",
    "HARM_CATEGORY_HATE_SPEECH",
    "HARM_CATEGORY_SEXUALLY_EXPLICIT",
    "HARM_CATEGORY_DANGEROUS_CONTENT",
];

#[derive(Debug, Clone)]
pub struct HttpChatConfig {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub temperature: f64,
    pub timeout: Duration,
    /// Ask the provider for its most permissive safety thresholds.
    pub min_safety_filtering: bool,
    pub max_attachments: usize,
}

impl HttpChatConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpChatConfig {
            base_url: base_url.into(),
            model: model.into(),
            api_key: None,
            temperature: 0.0,
            timeout: Duration::from_secs(120),
            min_safety_filtering: false,
            max_attachments: 10,
        }
    }

    /// Fill base URL and key from `UNHATE_API_BASE` / `UNHATE_API_KEY` when set.
    pub fn with_env(mut self) -> Self {
        if let Ok(base) = std::env::var(API_BASE_ENV) {
            self.base_url = base;
        }
        if let Ok(key) = std::env::var(API_KEY_ENV) {
            self.api_key = Some(key);
        }
        self
    }
}

pub struct HttpChatBackend {
    cfg: HttpChatConfig,
    caps: Capabilities,
    client: Client,
}

fn build_client(timeout: Duration) -> Result<Client, BackendError> {
    Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| BackendError::Transport(e.to_string()))
}

fn endpoint(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path)
}

fn data_url(image: &ImageHandle) -> Result<String, BackendError> {
    let png = image.to_png()?;
    Ok(format!(
        "data:image/png;base64,{}",
        base64::engine::general_purpose::STANDARD.encode(png)
    ))
}

fn map_send_error(e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout
    } else {
        BackendError::Transport(e.to_string())
    }
}

fn check_status(resp: Response) -> Result<Value, BackendError> {
    let status = resp.status();
    let body = resp.text().map_err(map_send_error)?;
    if status == StatusCode::TOO_MANY_REQUESTS {
        return Err(BackendError::RateLimited);
    }
    if status.is_server_error() {
        return Err(BackendError::Transport(format!("HTTP {status}: {body}")));
    }
    if !status.is_success() {
        let parsed: Option<Value> = serde_json::from_str(&body).ok();
        let code = parsed
            .as_ref()
            .and_then(|v| v.pointer("/error/code"))
            .and_then(Value::as_str)
            .unwrap_or_default();
        if code.contains("content_filter") || code.contains("content_policy") || code.contains("safety") {
            return Err(BackendError::ProviderRefusal(body));
        }
        return Err(BackendError::Http {
            status: status.as_u16(),
            body,
        });
    }
    serde_json::from_str(&body).map_err(|e| BackendError::Protocol(e.to_string()))
}

impl HttpChatBackend {
    pub fn new(cfg: HttpChatConfig) -> Result<Self, BackendError> {
        let client = build_client(cfg.timeout)?;
        let caps = Capabilities {
            name: format!("http:{}", cfg.model),
            supports_images: true,
            max_attachments: cfg.max_attachments,
        };
        Ok(HttpChatBackend { cfg, caps, client })
    }

    /// Request body in the chat-completions wire format.
    pub fn request_body(&self, prompt: &RenderedPrompt) -> Result<Value, BackendError> {
        let mut messages = Vec::with_capacity(prompt.turns.len());
        for turn in &prompt.turns {
            let message = match turn.role {
                Role::Assistant => json!({"role": "assistant", "content": turn.text_parts.concat()}),
                Role::User => {
                    let mut content = Vec::new();
                    for piece in turn.pieces() {
                        content.push(match piece {
                            Piece::Text(t) => json!({"type": "text", "text": t}),
                            Piece::Image(img) => json!({"type": "image_url", "image_url": {"url": data_url(img)?}}),
                        });
                    }
                    json!({"role": "user", "content": content})
                }
            };
            messages.push(message);
        }
        let mut body = json!({
            "model": self.cfg.model,
            "temperature": self.cfg.temperature,
            "messages": messages,
        });
        if self.cfg.min_safety_filtering {
            body["safety_settings"] = SAFETY_CATEGORIES
                .iter()
                .map(|c| json!({"category": c, "threshold": "BLOCK_NONE"}))
                .collect();
        }
        Ok(body)
    }
}

impl ChatBackend for HttpChatBackend {
    fn capabilities(&self) -> &Capabilities {
        &self.caps
    }

    fn complete(&self, prompt: &RenderedPrompt) -> Result<String, BackendError> {
        let body = self.request_body(prompt)?;
        let mut req = self.client.post(endpoint(&self.cfg.base_url, "chat/completions")).json(&body);
        if let Some(key) = &self.cfg.api_key {
            req = req.bearer_auth(key);
        }
        let value = check_status(req.send().map_err(map_send_error)?)?;
        let choice = value
            .pointer("/choices/0")
            .ok_or_else(|| BackendError::Protocol("no choices in response".into()))?;
        let finish = choice.get("finish_reason").and_then(Value::as_str).unwrap_or("");
        if matches!(finish, "content_filter" | "safety" | "SAFETY") {
            return Err(BackendError::ProviderRefusal(format!("finish_reason={finish}")));
        }
        if let Some(refusal) = choice.pointer("/message/refusal").and_then(Value::as_str) {
            return Err(BackendError::ProviderRefusal(refusal.to_string()));
        }
        choice
            .pointer("/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Protocol("response has no message content".into()))
    }
}

#[derive(Debug, Clone)]
pub struct HttpEmbeddingConfig {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub dim: usize,
    pub timeout: Duration,
}

pub struct HttpEmbeddingBackend {
    cfg: HttpEmbeddingConfig,
    client: Client,
}

impl HttpEmbeddingBackend {
    pub fn new(cfg: HttpEmbeddingConfig) -> Result<Self, BackendError> {
        let client = build_client(cfg.timeout)?;
        Ok(HttpEmbeddingBackend { cfg, client })
    }

    fn request(&self, input: String) -> Result<Vec<f32>, BackendError> {
        let body = json!({"model": self.cfg.model, "input": input});
        let mut req = self.client.post(endpoint(&self.cfg.base_url, "embeddings")).json(&body);
        if let Some(key) = &self.cfg.api_key {
            req = req.bearer_auth(key);
        }
        let value = check_status(req.send().map_err(map_send_error)?)?;
        let arr = value
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Protocol("no data[0].embedding".into()))?;
        arr.iter()
            .map(|v| {
                v.as_f64()
                    .map(|x| x as f32)
                    .ok_or_else(|| BackendError::Protocol("non-numeric embedding component".into()))
            })
            .collect()
    }
}

impl EmbeddingBackend for HttpEmbeddingBackend {
    fn name(&self) -> &str {
        &self.cfg.model
    }

    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        self.request(text.to_string())
    }

    fn embed_image(&self, image: &ImageHandle) -> Result<Vec<f32>, BackendError> {
        self.request(data_url(image)?)
    }
}
