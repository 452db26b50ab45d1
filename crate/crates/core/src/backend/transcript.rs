//! Request/response transcripts for offline, deterministic re-runs.
//!
//! One JSON object per line, keyed by request fingerprint:
//! `{"fp": "<hex>", "response": "..."}` for chat,
//! `{"fp": "<hex>", "vector": [..]}` for embeddings and
//! `{"fp": "<hex>", "refusal": "..."}` for provider refusals.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{chat_fingerprint, embed_fingerprint, BackendError, Capabilities, ChatBackend, EmbedItem, EmbeddingBackend};
use crate::model::ImageHandle;
use crate::prompt::RenderedPrompt;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TranscriptEntry {
    Chat { fp: String, response: String },
    Embedding { fp: String, vector: Vec<f32> },
    Refusal { fp: String, refusal: String },
}

impl TranscriptEntry {
    pub fn fp(&self) -> &str {
        match self {
            TranscriptEntry::Chat { fp, .. } | TranscriptEntry::Embedding { fp, .. } | TranscriptEntry::Refusal { fp, .. } => fp,
        }
    }
}

/// Read every entry; the first occurrence of a fingerprint wins.
pub fn read_transcript(path: &Path) -> Result<HashMap<String, TranscriptEntry>, BackendError> {
    let file = File::open(path).map_err(|e| BackendError::Transcript(format!("{}: {e}", path.display())))?;
    let mut map = HashMap::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| BackendError::Transcript(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: TranscriptEntry = serde_json::from_str(&line)
            .map_err(|e| BackendError::Transcript(format!("line {}: {e}", n + 1)))?;
        map.entry(entry.fp().to_string()).or_insert(entry);
    }
    Ok(map)
}

/// Append-only writer. Fingerprints already in the file are not rewritten.
pub struct TranscriptWriter {
    inner: Mutex<WriterState>,
}

struct WriterState {
    file: File,
    seen: HashSet<String>,
}

impl TranscriptWriter {
    pub fn open(path: &Path) -> Result<Self, BackendError> {
        let seen = if path.exists() {
            read_transcript(path)?.into_keys().collect()
        } else {
            HashSet::new()
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| BackendError::Transcript(format!("{}: {e}", path.display())))?;
        Ok(TranscriptWriter {
            inner: Mutex::new(WriterState { file, seen }),
        })
    }

    pub fn append(&self, entry: &TranscriptEntry) -> Result<(), BackendError> {
        let mut state = self.inner.lock().unwrap();
        if !state.seen.insert(entry.fp().to_string()) {
            return Ok(());
        }
        let mut line = serde_json::to_string(entry).map_err(|e| BackendError::Transcript(e.to_string()))?;
        line.push('\n');
        state
            .file
            .write_all(line.as_bytes())
            .and_then(|_| state.file.flush())
            .map_err(|e| BackendError::Transcript(e.to_string()))
    }
}

/// Wraps a live or mock backend and records every outcome worth replaying.
pub struct Recorder<B: ?Sized> {
    inner: Arc<B>,
    writer: Arc<TranscriptWriter>,
}

impl<B: ?Sized> Recorder<B> {
    pub fn new(inner: Arc<B>, writer: Arc<TranscriptWriter>) -> Self {
        Recorder { inner, writer }
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Recorder<B> {
    fn capabilities(&self) -> &Capabilities {
        self.inner.capabilities()
    }

    fn complete(&self, prompt: &RenderedPrompt) -> Result<String, BackendError> {
        let fp = chat_fingerprint(prompt)?;
        match self.inner.complete(prompt) {
            Ok(response) => {
                self.writer.append(&TranscriptEntry::Chat {
                    fp,
                    response: response.clone(),
                })?;
                Ok(response)
            }
            Err(BackendError::ProviderRefusal(reason)) => {
                self.writer.append(&TranscriptEntry::Refusal {
                    fp,
                    refusal: reason.clone(),
                })?;
                Err(BackendError::ProviderRefusal(reason))
            }
            Err(e) => Err(e),
        }
    }
}

impl<B: EmbeddingBackend + ?Sized> Recorder<B> {
    fn record_vector(&self, item: EmbedItem<'_>, result: Result<Vec<f32>, BackendError>) -> Result<Vec<f32>, BackendError> {
        let vector = result?;
        self.writer.append(&TranscriptEntry::Embedding {
            fp: embed_fingerprint(item)?,
            vector: vector.clone(),
        })?;
        Ok(vector)
    }
}

impl<B: EmbeddingBackend + ?Sized> EmbeddingBackend for Recorder<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        self.record_vector(EmbedItem::Text(text), self.inner.embed_text(text))
    }

    fn embed_image(&self, image: &ImageHandle) -> Result<Vec<f32>, BackendError> {
        self.record_vector(EmbedItem::Image(image), self.inner.embed_image(image))
    }
}

/// Serves chat and embedding calls purely from a recorded transcript.
pub struct ReplayBackend {
    caps: Capabilities,
    dim: usize,
    entries: HashMap<String, TranscriptEntry>,
}

impl ReplayBackend {
    pub fn open(path: &Path, dim: usize) -> Result<Self, BackendError> {
        Ok(Self::from_entries(read_transcript(path)?, dim))
    }

    pub fn from_entries(entries: HashMap<String, TranscriptEntry>, dim: usize) -> Self {
        ReplayBackend {
            caps: Capabilities {
                name: "replay".into(),
                supports_images: true,
                max_attachments: usize::MAX,
            },
            dim,
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn lookup(&self, fp: String) -> Result<&TranscriptEntry, BackendError> {
        self.entries.get(&fp).ok_or(BackendError::MissingTranscriptEntry(fp))
    }

    fn vector(&self, item: EmbedItem<'_>) -> Result<Vec<f32>, BackendError> {
        match self.lookup(embed_fingerprint(item)?)? {
            TranscriptEntry::Embedding { vector, .. } => Ok(vector.clone()),
            other => Err(BackendError::Transcript(format!("entry {} is not an embedding", other.fp()))),
        }
    }
}

impl ChatBackend for ReplayBackend {
    fn capabilities(&self) -> &Capabilities {
        &self.caps
    }

    fn complete(&self, prompt: &RenderedPrompt) -> Result<String, BackendError> {
        match self.lookup(chat_fingerprint(prompt)?)? {
            TranscriptEntry::Chat { response, .. } => Ok(response.clone()),
            TranscriptEntry::Refusal { refusal, .. } => Err(BackendError::ProviderRefusal(refusal.clone())),
            other => Err(BackendError::Transcript(format!("entry {} is not a chat reply", other.fp()))),
        }
    }
}

impl EmbeddingBackend for ReplayBackend {
    fn name(&self) -> &str {
        "replay"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        self.vector(EmbedItem::Text(text))
    }

    fn embed_image(&self, image: &ImageHandle) -> Result<Vec<f32>, BackendError> {
        self.vector(EmbedItem::Image(image))
    }
}
