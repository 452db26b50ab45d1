//! Exhaustive cosine-similarity index over unit embeddings.
//!
//! On-disk layout (little-endian, no padding):
//!
//! ```text
//! "EMBX" | u32 version=1 | u32 dim | u64 count
//! count × ( u16 id_len | id bytes (UTF-8) | u8 class_tag (0, 1, 255=none) | dim × f32 )
//! ```
//!
//! Trailing bytes after the last entry are rejected.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::model::{EmbeddingVector, Label, VectorError};

pub const MAGIC: &[u8; 4] = b"EMBX";
pub const FORMAT_VERSION: u32 = 1;
const NO_CLASS: u8 = 255;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("dimension mismatch: {expected} vs {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("index is empty")]
    EmptyIndex,
    #[error("class {class} has {available} tagged entries, {needed} needed")]
    InsufficientClassExamples {
        class: Label,
        needed: usize,
        available: usize,
    },
    #[error("entry `{0}` has no class tag")]
    MissingClassTag(String),
    #[error("shot count {0} must be even and positive")]
    BadShots(usize),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("id `{0}` is empty or longer than 65535 bytes")]
    BadId(String),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    VersionMismatch(u32),
    #[error("file truncated")]
    TruncatedFile,
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("entry `{id}`: {source}")]
    NormViolation { id: String, source: VectorError },
    #[error("invalid class tag {0}")]
    BadClassTag(u8),
    #[error("entry id is not UTF-8")]
    BadUtf8,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Cosine of two unit vectors: their dot product, clamped to [-1, 1].
/// Accumulates in f64 in index order, so `cosine(a, b) == cosine(b, a)`.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, IndexError> {
    if a.dim() != b.dim() {
        return Err(IndexError::DimMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let dot: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum();
    Ok(dot.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub id: String,
    pub vector: EmbeddingVector,
    pub class_tag: Option<Label>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    entries: Vec<IndexEntry>,
    ids: HashSet<String>,
}

/// Balanced few-shot selection: `shots / 2` demonstrations from each class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RicesConfig {
    shots: usize,
}

impl RicesConfig {
    pub fn new(shots: usize) -> Result<Self, IndexError> {
        if shots == 0 || !shots.is_multiple_of(2) {
            return Err(IndexError::BadShots(shots));
        }
        Ok(RicesConfig { shots })
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    pub fn per_class(&self) -> usize {
        self.shots / 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub id: String,
    pub similarity: f64,
}

/// Descending similarity, ties by ascending id.
fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.similarity
        .partial_cmp(&a.similarity)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.id.cmp(&b.id))
}

impl EmbeddingIndex {
    pub fn new(dim: usize) -> Self {
        EmbeddingIndex {
            dim,
            entries: Vec::new(),
            ids: HashSet::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&IndexEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Insert raw values, normalizing them first.
    pub fn insert_raw(&mut self, id: impl Into<String>, values: &[f32], class_tag: Option<Label>) -> Result<(), IndexError> {
        let id = id.into();
        let vector = EmbeddingVector::normalized(values).map_err(|source| IndexError::NormViolation {
            id: id.clone(),
            source,
        })?;
        self.insert(id, vector, class_tag)
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: EmbeddingVector, class_tag: Option<Label>) -> Result<(), IndexError> {
        let id = id.into();
        if id.is_empty() || id.len() > u16::MAX as usize {
            return Err(IndexError::BadId(id));
        }
        if vector.dim() != self.dim {
            return Err(IndexError::DimMismatch {
                expected: self.dim,
                found: vector.dim(),
            });
        }
        if !self.ids.insert(id.clone()) {
            return Err(IndexError::DuplicateId(id));
        }
        self.entries.push(IndexEntry { id, vector, class_tag });
        Ok(())
    }

    fn scored<'a>(&'a self, query: &'a EmbeddingVector) -> impl Iterator<Item = (&'a IndexEntry, Hit)> + 'a {
        self.entries.iter().map(move |e| {
            let similarity = cosine(query, &e.vector).expect("dims checked by caller");
            (
                e,
                Hit {
                    id: e.id.clone(),
                    similarity,
                },
            )
        })
    }

    fn check_query(&self, query: &EmbeddingVector) -> Result<(), IndexError> {
        if query.dim() != self.dim {
            return Err(IndexError::DimMismatch {
                expected: self.dim,
                found: query.dim(),
            });
        }
        Ok(())
    }

    /// The `k` most similar entries, best first. Returns fewer than `k` only
    /// when the index itself is smaller.
    pub fn top_k(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<Hit>, IndexError> {
        if self.entries.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        self.check_query(query)?;
        if k > self.entries.len() {
            tracing::warn!(k, available = self.entries.len(), "index smaller than k");
        }
        let mut hits: Vec<Hit> = self.scored(query).map(|(_, h)| h).collect();
        let k = k.min(hits.len());
        if k < hits.len() {
            hits.select_nth_unstable_by(k, rank_order);
            hits.truncate(k);
        }
        hits.sort_by(rank_order);
        Ok(hits)
    }

    /// Retrieval-based demonstration selection.
    ///
    /// Takes the `per_class` most similar entries of each class, then orders
    /// them for the prompt: each class list is reversed into ascending
    /// similarity and the two lists are interleaved starting with
    /// non-hateful, so the most similar demonstrations sit nearest the test
    /// meme.
    pub fn rices_select(&self, query: &EmbeddingVector, cfg: RicesConfig) -> Result<Vec<Hit>, IndexError> {
        self.check_query(query)?;
        let mut by_class: [Vec<Hit>; 2] = [Vec::new(), Vec::new()];
        for (entry, hit) in self.scored(query) {
            let class = entry
                .class_tag
                .ok_or_else(|| IndexError::MissingClassTag(entry.id.clone()))?;
            by_class[class.code() as usize].push(hit);
        }
        let need = cfg.per_class();
        for (code, hits) in by_class.iter_mut().enumerate() {
            if hits.len() < need {
                return Err(IndexError::InsufficientClassExamples {
                    class: Label::from_code(code as i64).unwrap(),
                    needed: need,
                    available: hits.len(),
                });
            }
            hits.sort_by(rank_order);
            hits.truncate(need);
            hits.reverse();
        }
        let [neg, pos] = by_class;
        let ordered = neg
            .into_iter()
            .zip(pos)
            .flat_map(|(n, p)| [n, p])
            .collect();
        Ok(ordered)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.entries.len() * (3 + 16 + 4 * self.dim));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.id.len() as u16).to_le_bytes());
            out.extend_from_slice(e.id.as_bytes());
            out.push(e.class_tag.map_or(NO_CLASS, Label::code));
            for v in e.vector.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(IndexError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(IndexError::VersionMismatch(version));
        }
        let dim = r.u32()? as usize;
        let count = r.u64()?;
        let mut index = EmbeddingIndex::new(dim);
        for _ in 0..count {
            let id_len = r.u16()? as usize;
            let id = std::str::from_utf8(r.take(id_len)?)
                .map_err(|_| IndexError::BadUtf8)?
                .to_string();
            let class_tag = match r.u8()? {
                NO_CLASS => None,
                tag @ (0 | 1) => Some(Label::from_code(tag as i64).unwrap()),
                other => return Err(IndexError::BadClassTag(other)),
            };
            let raw = r.take(dim * 4)?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let vector = EmbeddingVector::from_unit(values).map_err(|source| IndexError::NormViolation {
                id: id.clone(),
                source,
            })?;
            index.insert(id, vector, class_tag)?;
        }
        let rest = bytes.len() - r.pos;
        if rest != 0 {
            return Err(IndexError::TrailingBytes(rest));
        }
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        let end = self.pos.checked_add(n).ok_or(IndexError::TruncatedFile)?;
        let s = self.bytes.get(self.pos..end).ok_or(IndexError::TruncatedFile)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, IndexError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, IndexError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
