//! Zero- and few-shot hateful meme detection over a corpus.

pub mod metrics;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use metrics::{accuracy, auroc, MetricsError, MetricsReport};

use crate::backend::{BackendError, EmbedItem, Gateway};
use crate::index::{EmbeddingIndex, IndexError, RicesConfig};
use crate::model::{DetectionResult, Label, MemeRecord};
use crate::prompt::{parse_detection_response, render_detection_prompt, Demonstration, ParseError, PromptError};

#[derive(Debug, Error)]
pub enum DetectFailure {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("few-shot detection needs a demonstration pool")]
    MissingPool,
    #[error("demonstration `{0}` is indexed but absent from the pool manifest")]
    UnknownDemo(String),
}

#[derive(Debug, Error)]
#[error("meme {meme_id}: {kind}")]
pub struct DetectError {
    pub meme_id: String,
    pub kind: DetectFailure,
}

impl DetectError {
    pub fn is_refusal(&self) -> bool {
        matches!(self.kind, DetectFailure::Backend(BackendError::ProviderRefusal(_)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub shots: usize,
    pub use_ocr: bool,
    pub backend: String,
    /// Name of the demonstration pool (recorded for provenance of the run).
    pub pool: Option<String>,
}

/// Labeled memes that few-shot demonstrations are drawn from.
pub struct DemoPool {
    index: EmbeddingIndex,
    memes: HashMap<String, MemeRecord>,
}

impl DemoPool {
    /// Every indexed id must carry a class tag and have a manifest record.
    pub fn new(index: EmbeddingIndex, memes: impl IntoIterator<Item = MemeRecord>) -> Result<Self, DetectFailure> {
        let memes: HashMap<String, MemeRecord> = memes.into_iter().map(|m| (m.id.clone(), m)).collect();
        for entry in index.entries() {
            if entry.class_tag.is_none() {
                return Err(IndexError::MissingClassTag(entry.id.clone()).into());
            }
            if !memes.contains_key(&entry.id) {
                return Err(DetectFailure::UnknownDemo(entry.id.clone()));
            }
        }
        Ok(DemoPool { index, memes })
    }

    pub fn index(&self) -> &EmbeddingIndex {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub id: String,
    pub gold: Option<Label>,
    pub result: DetectionResult,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub id: String,
    pub error: String,
    pub refusal: bool,
}

/// Outcome of a corpus run. Every input meme lands in exactly one of
/// `results` or `failures`, each sorted by id.
#[derive(Debug, Clone)]
pub struct DetectionRun {
    pub config: DetectConfig,
    pub results: Vec<Scored>,
    pub failures: Vec<Failure>,
}

pub struct Detector {
    gateway: Arc<Gateway>,
    pool: Option<Arc<DemoPool>>,
    cfg: DetectConfig,
    rices: Option<RicesConfig>,
}

impl Detector {
    pub fn new(gateway: Arc<Gateway>, cfg: DetectConfig, pool: Option<Arc<DemoPool>>) -> Result<Self, DetectFailure> {
        let rices = if cfg.shots == 0 {
            None
        } else {
            if pool.is_none() {
                return Err(DetectFailure::MissingPool);
            }
            Some(RicesConfig::new(cfg.shots)?)
        };
        Ok(Detector { gateway, pool, cfg, rices })
    }

    pub fn config(&self) -> &DetectConfig {
        &self.cfg
    }

    fn demonstrations(&self, meme: &MemeRecord) -> Result<Vec<Demonstration>, DetectFailure> {
        let (Some(rices), Some(pool)) = (self.rices, &self.pool) else {
            return Ok(Vec::new());
        };
        let query = self.gateway.embed(EmbedItem::Image(&meme.image))?;
        let hits = pool.index.rices_select(&query, rices)?;
        tracing::debug!(meme = %meme.id, demos = ?hits.iter().map(|h| h.id.as_str()).collect::<Vec<_>>(), "rices");
        hits.into_iter()
            .map(|hit| {
                let record = pool.memes.get(&hit.id).ok_or_else(|| DetectFailure::UnknownDemo(hit.id.clone()))?;
                let label = pool
                    .index
                    .get(&hit.id)
                    .and_then(|e| e.class_tag)
                    .ok_or_else(|| IndexError::MissingClassTag(hit.id.clone()))?;
                Ok(Demonstration {
                    meme: record.clone(),
                    label,
                })
            })
            .collect()
    }

    /// One chat call per meme; demonstrations travel inside the prompt.
    pub fn detect_one(&self, meme: &MemeRecord) -> Result<DetectionResult, DetectError> {
        let tag = |kind: DetectFailure| DetectError {
            meme_id: meme.id.clone(),
            kind,
        };
        let demos = self.demonstrations(meme).map_err(tag)?;
        let prompt = render_detection_prompt(meme, &demos, self.cfg.use_ocr).map_err(|e| tag(e.into()))?;
        let reply = self.gateway.invoke_chat(&prompt).map_err(|e| tag(e.into()))?;
        parse_detection_response(&reply).map_err(|e| tag(e.into()))
    }

    pub fn run(&self, memes: &[MemeRecord]) -> DetectionRun {
        let outcomes: Vec<_> = memes.par_iter().map(|m| (m, self.detect_one(m))).collect();
        let mut results = Vec::new();
        let mut failures = Vec::new();
        for (meme, outcome) in outcomes {
            match outcome {
                Ok(result) => results.push(Scored {
                    id: meme.id.clone(),
                    gold: meme.label,
                    result,
                }),
                Err(e) => {
                    tracing::warn!("{e}");
                    failures.push(Failure {
                        id: meme.id.clone(),
                        refusal: e.is_refusal(),
                        error: e.kind.to_string(),
                    })
                }
            }
        }
        results.sort_by(|a, b| a.id.cmp(&b.id));
        failures.sort_by(|a, b| a.id.cmp(&b.id));
        DetectionRun {
            config: self.cfg.clone(),
            results,
            failures,
        }
    }
}

/// One line of the results artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultLine {
    pub id: String,
    pub label: Label,
    pub prob: f64,
    pub gold: Option<Label>,
    pub explanation: String,
    #[serde(default)]
    pub prob_fallback: bool,
}

impl From<&Scored> for ResultLine {
    fn from(s: &Scored) -> Self {
        ResultLine {
            id: s.id.clone(),
            label: s.result.label,
            prob: s.result.probability,
            gold: s.gold,
            explanation: s.result.explanation.clone(),
            prob_fallback: s.result.probability_fallback,
        }
    }
}

impl DetectionRun {
    pub fn lines(&self) -> Vec<ResultLine> {
        self.results.iter().map(ResultLine::from).collect()
    }

    pub fn metrics(&self) -> MetricsReport {
        let refusals = self.failures.iter().filter(|f| f.refusal).count();
        report(&self.lines(), refusals, self.failures.len())
    }
}

/// Metrics over results that carry a gold label. Failures are counted, never scored.
pub fn report(lines: &[ResultLine], refusal_count: usize, failure_count: usize) -> MetricsReport {
    let gold: Vec<_> = lines.iter().filter_map(|l| l.gold.map(|g| (l, g))).collect();
    let pairs: Vec<(Label, Label)> = gold.iter().map(|(l, g)| (l.label, *g)).collect();
    let scored: Vec<(f64, Label)> = gold.iter().map(|(l, g)| (l.prob, *g)).collect();
    MetricsReport {
        accuracy: accuracy(&pairs).ok(),
        auroc: auroc(&scored).ok(),
        n: pairs.len(),
        fallback_probability_count: lines.iter().filter(|l| l.prob_fallback).count(),
        refusal_count,
        failure_count,
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> std::io::Result<Vec<T>> {
    let mut items = Vec::new();
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), n + 1))
        })?;
        items.push(item);
    }
    Ok(items)
}

pub fn write_results(path: &Path, lines: &[ResultLine]) -> std::io::Result<()> {
    write_jsonl(path, lines)
}

pub fn read_results(path: &Path) -> std::io::Result<Vec<ResultLine>> {
    read_jsonl(path)
}

pub fn write_failures(path: &Path, failures: &[Failure]) -> std::io::Result<()> {
    write_jsonl(path, failures)
}

pub fn read_failures(path: &Path) -> std::io::Result<Vec<Failure>> {
    read_jsonl(path)
}
