//! Chat and embedding providers behind one interface.
//!
//! Pipelines talk to a [`Gateway`], which enforces the attachment limit,
//! bounds in-flight calls, retries transient failures and normalizes
//! embeddings. Concrete backends: [`mock`] (deterministic, offline),
//! [`transcript`] (record / replay) and [`http`] (OpenAI-compatible wire format).

pub mod http;
pub mod mock;
pub mod transcript;

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{EmbeddingVector, ImageHandle, ImageLoadError};
use crate::prompt::{Piece, RenderedPrompt, Role};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("rate limited by provider")]
    RateLimited,
    #[error("provider refused: {0}")]
    ProviderRefusal(String),
    #[error("{count} attachments exceed the backend limit of {max}")]
    TooManyAttachments { count: usize, max: usize },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    Protocol(String),
    #[error("no transcript entry for fingerprint {0}")]
    MissingTranscriptEntry(String),
    #[error("mock has no reply for fingerprint {0}")]
    Unscripted(String),
    #[error("embedding has dim {found}, backend advertises {expected}")]
    DimViolation { expected: usize, found: usize },
    #[error("embedding is not a usable vector: {0}")]
    BadVector(String),
    #[error(transparent)]
    Image(#[from] ImageLoadError),
    #[error("transcript: {0}")]
    Transcript(String),
}

impl BackendError {
    /// Worth retrying: the same request may succeed later.
    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::Transport(_) | BackendError::RateLimited)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub name: String,
    pub supports_images: bool,
    pub max_attachments: usize,
}

pub trait ChatBackend: Send + Sync {
    fn capabilities(&self) -> &Capabilities;
    fn complete(&self, prompt: &RenderedPrompt) -> Result<String, BackendError>;
}

/// Joint image-text encoder. Implementations return raw vectors; the
/// gateway checks the dimension and normalizes.
pub trait EmbeddingBackend: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<Vec<f32>, BackendError>;
    fn embed_image(&self, image: &ImageHandle) -> Result<Vec<f32>, BackendError>;
}

#[derive(Debug, Clone, Copy)]
pub enum EmbedItem<'a> {
    Text(&'a str),
    Image(&'a ImageHandle),
}

/// Request fingerprint: SHA-256 over the turn structure, text bytes and
/// attachment pixel digests. Re-encoding an image only changes the
/// fingerprint if its decoded pixels change.
pub fn chat_fingerprint(prompt: &RenderedPrompt) -> Result<String, BackendError> {
    let mut h = Sha256::new();
    h.update(b"chat\0");
    for turn in &prompt.turns {
        h.update(match turn.role {
            Role::User => b"U",
            Role::Assistant => b"A",
        });
        for piece in turn.pieces() {
            match piece {
                Piece::Text(t) => {
                    h.update(b"T");
                    h.update((t.len() as u64).to_le_bytes());
                    h.update(t.as_bytes());
                }
                Piece::Image(img) => {
                    h.update(b"I");
                    h.update(img.digest()?);
                }
            }
        }
    }
    Ok(hex::encode(h.finalize()))
}

pub fn embed_fingerprint(item: EmbedItem<'_>) -> Result<String, BackendError> {
    let mut h = Sha256::new();
    match item {
        EmbedItem::Text(t) => {
            h.update(b"embed-text\0");
            h.update(t.as_bytes());
        }
        EmbedItem::Image(img) => {
            h.update(b"embed-image\0");
            h.update(img.digest()?);
        }
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let mut attempt = 1;
        loop {
            match op() {
                Err(e) if e.is_transient() && attempt < self.max_attempts => {
                    let delay = self.base_delay * 2u32.pow(attempt - 1);
                    tracing::warn!(attempt, error = %e, ?delay, "transient backend error, retrying");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Counting semaphore bounding concurrent backend calls.
#[derive(Debug)]
pub struct InFlightLimit {
    max: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a> {
    limit: &'a InFlightLimit,
}

impl InFlightLimit {
    pub fn new(max: usize) -> Self {
        InFlightLimit {
            max: max.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().unwrap();
        while *used >= self.max {
            used = self.freed.wait(used).unwrap();
        }
        *used += 1;
        Permit { limit: self }
    }

    pub fn max(&self) -> usize {
        self.max
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.limit.used.lock().unwrap() -= 1;
        self.limit.freed.notify_one();
    }
}

pub const DEFAULT_IN_FLIGHT: usize = 4;

/// The handle pipelines use for every model call.
#[derive(Clone)]
pub struct Gateway {
    chat: Arc<dyn ChatBackend>,
    embedder: Arc<dyn EmbeddingBackend>,
    limit: Arc<InFlightLimit>,
    retry: RetryPolicy,
}

impl Gateway {
    pub fn new(chat: Arc<dyn ChatBackend>, embedder: Arc<dyn EmbeddingBackend>) -> Self {
        Gateway {
            chat,
            embedder,
            limit: Arc::new(InFlightLimit::new(DEFAULT_IN_FLIGHT)),
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_in_flight(mut self, max: usize) -> Self {
        self.limit = Arc::new(InFlightLimit::new(max));
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn chat_capabilities(&self) -> &Capabilities {
        self.chat.capabilities()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedder.dim()
    }

    pub fn invoke_chat(&self, prompt: &RenderedPrompt) -> Result<String, BackendError> {
        invoke_chat(self.chat.as_ref(), prompt, &self.limit, &self.retry)
    }

    pub fn embed(&self, item: EmbedItem<'_>) -> Result<EmbeddingVector, BackendError> {
        let _permit = self.limit.acquire();
        self.retry.run(|| embed(self.embedder.as_ref(), item))
    }
}

pub fn invoke_chat(
    backend: &dyn ChatBackend,
    prompt: &RenderedPrompt,
    limit: &InFlightLimit,
    retry: &RetryPolicy,
) -> Result<String, BackendError> {
    let caps = backend.capabilities();
    let count = prompt.attachment_count();
    let max = if caps.supports_images { caps.max_attachments } else { 0 };
    if count > max {
        return Err(BackendError::TooManyAttachments { count, max });
    }
    let _permit = limit.acquire();
    retry.run(|| backend.complete(prompt))
}

/// Embed through `backend`, enforcing the advertised dimension.
pub fn embed(backend: &dyn EmbeddingBackend, item: EmbedItem<'_>) -> Result<EmbeddingVector, BackendError> {
    let raw = match item {
        EmbedItem::Text(t) => backend.embed_text(t)?,
        EmbedItem::Image(img) => backend.embed_image(img)?,
    };
    if raw.len() != backend.dim() {
        return Err(BackendError::DimViolation {
            expected: backend.dim(),
            found: raw.len(),
        });
    }
    EmbeddingVector::normalized(&raw).map_err(|e| BackendError::BadVector(e.to_string()))
}
