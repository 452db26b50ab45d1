//! Pipeline configuration (TOML file plus command-line overrides) and
//! construction of the backend gateway it describes. Keys never live in
//! the file; live backends read them from the environment.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::http::{HttpChatBackend, HttpChatConfig, HttpEmbeddingBackend, HttpEmbeddingConfig, API_BASE_ENV, API_KEY_ENV};
use crate::backend::mock::{MockChatBackend, MockEmbeddingBackend};
use crate::backend::transcript::{Recorder, ReplayBackend, TranscriptWriter};
use crate::backend::{BackendError, ChatBackend, EmbeddingBackend, Gateway, DEFAULT_IN_FLIGHT};
use crate::compositor::{BaselineEraser, Compositor, EraserBackend, Placement, RemoteEraser};
use crate::mitigator::DEFAULT_K;
use crate::model::MultimodalChoice;

type Backends = (Arc<dyn ChatBackend>, Arc<dyn EmbeddingBackend>);

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {reason}")]
    Read { path: PathBuf, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TranscriptMode {
    #[default]
    Off,
    Record,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EraserSpec {
    #[default]
    Baseline,
    Remote(String),
}

impl std::str::FromStr for EraserSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "baseline" => Ok(EraserSpec::Baseline),
            _ => match s.strip_prefix("remote:") {
                Some(url) if !url.is_empty() => Ok(EraserSpec::Remote(url.to_string())),
                _ => Err(format!("unknown eraser `{s}` (baseline|remote:<url>)")),
            },
        }
    }
}

impl TryFrom<String> for EraserSpec {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<EraserSpec> for String {
    fn from(e: EraserSpec) -> String {
        match e {
            EraserSpec::Baseline => "baseline".into(),
            EraserSpec::Remote(url) => format!("remote:{url}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub backend: BackendKind,
    /// Live endpoint; `UNHATE_API_BASE` overrides it.
    pub base_url: String,
    pub chat_model: String,
    pub embedding_model: String,
    pub embedding_dim: usize,
    pub mock_seed: u64,
    pub temperature: f64,
    pub timeout_secs: u64,
    pub min_safety_filtering: bool,
    pub max_attachments: usize,
    pub shots: usize,
    pub use_ocr: bool,
    pub k: usize,
    pub choice: MultimodalChoice,
    pub placement: Placement,
    pub eraser: EraserSpec,
    pub in_flight: usize,
    pub transcript_mode: TranscriptMode,
    pub transcript: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            backend: BackendKind::Mock,
            base_url: "https://api.openai.com/v1".into(),
            chat_model: "gpt-4o".into(),
            embedding_model: "clip-vit-large-patch14".into(),
            embedding_dim: 64,
            mock_seed: 0,
            temperature: 0.0,
            timeout_secs: 120,
            min_safety_filtering: true,
            max_attachments: 10,
            shots: 0,
            use_ocr: false,
            k: DEFAULT_K,
            choice: MultimodalChoice::Both,
            placement: Placement::Top,
            eraser: EraserSpec::Baseline,
            in_flight: DEFAULT_IN_FLIGHT,
            transcript_mode: TranscriptMode::Off,
            transcript: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        toml::from_str(s).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if !self.shots.is_multiple_of(2) {
            return bad("shots must be even (balanced per class)");
        }
        if self.in_flight == 0 {
            return bad("in_flight must be at least 1");
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive");
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad("temperature must lie in [0, 2]");
        }
        if self.transcript_mode != TranscriptMode::Off && self.transcript.is_none() {
            return bad("transcript mode record/replay needs a transcript path");
        }
        if self.transcript_mode == TranscriptMode::Replay {
            let path = self.transcript.as_ref().unwrap();
            if !path.is_file() {
                return Err(ConfigError::Invalid(format!("transcript {} does not exist", path.display())));
            }
        }
        Ok(())
    }

    /// Short description of the backend stack, recorded with run outputs.
    pub fn backend_label(&self) -> String {
        match (self.transcript_mode, self.backend) {
            (TranscriptMode::Replay, _) => "replay".into(),
            (_, BackendKind::Mock) => format!("mock:{}", self.mock_seed),
            (_, BackendKind::Live) => format!("live:{}", self.chat_model),
        }
    }

    fn live_backends(&self) -> Result<Backends, ConfigError> {
        let base = std::env::var(API_BASE_ENV).unwrap_or_else(|_| self.base_url.clone());
        let key = std::env::var(API_KEY_ENV).ok();
        let timeout = Duration::from_secs(self.timeout_secs);
        let chat = HttpChatBackend::new(HttpChatConfig {
            base_url: base.clone(),
            model: self.chat_model.clone(),
            api_key: key.clone(),
            temperature: self.temperature,
            timeout,
            min_safety_filtering: self.min_safety_filtering,
            max_attachments: self.max_attachments,
        })?;
        let embedder = HttpEmbeddingBackend::new(HttpEmbeddingConfig {
            base_url: base,
            model: self.embedding_model.clone(),
            api_key: key,
            dim: self.embedding_dim,
            timeout,
        })?;
        Ok((Arc::new(chat), Arc::new(embedder)))
    }

    /// Build the backend stack: mock or live, optionally recorded, or a
    /// transcript replay that never touches the network.
    pub fn build_gateway(&self) -> Result<Gateway, ConfigError> {
        self.validate()?;
        let (chat, embedder): Backends = match self.transcript_mode {
            TranscriptMode::Replay => {
                let replay = Arc::new(ReplayBackend::open(self.transcript.as_deref().unwrap(), self.embedding_dim)?);
                (replay.clone(), replay)
            }
            mode => {
                let (chat, embedder): Backends = match self.backend {
                    BackendKind::Mock => (
                        Arc::new(MockChatBackend::heuristic(self.mock_seed)),
                        Arc::new(MockEmbeddingBackend::new(self.embedding_dim, self.mock_seed)),
                    ),
                    BackendKind::Live => self.live_backends()?,
                };
                if mode == TranscriptMode::Record {
                    let writer = Arc::new(TranscriptWriter::open(self.transcript.as_deref().unwrap())?);
                    (
                        Arc::new(Recorder::new(chat, writer.clone())),
                        Arc::new(Recorder::new(embedder, writer)),
                    )
                } else {
                    (chat, embedder)
                }
            }
        };
        Ok(Gateway::new(chat, embedder).with_in_flight(self.in_flight))
    }

    pub fn build_compositor(&self) -> Result<Compositor, ConfigError> {
        let eraser: Arc<dyn EraserBackend> = match &self.eraser {
            EraserSpec::Baseline => Arc::new(BaselineEraser),
            EraserSpec::Remote(url) => Arc::new(
                RemoteEraser::new(url.clone(), Duration::from_secs(self.timeout_secs))
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?,
            ),
        };
        Ok(Compositor::new(eraser, self.placement))
    }
}
