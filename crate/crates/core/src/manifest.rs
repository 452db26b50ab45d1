//! JSON-lines dataset manifests: `{"id", "img", "text", "label"?, "ocr"?}`
//! with `img` relative to the manifest's directory.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Component, Path, PathBuf};

use serde::Deserialize;
use serde_json::Value;
use thiserror::Error;

use crate::model::{ImageHandle, MemeRecord, ValidationError};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest not found: {0}")]
    FileNotFound(PathBuf),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LineErrorKind {
    #[error("malformed line: {0}")]
    MalformedLine(String),
    #[error("image path `{0}` escapes the dataset root")]
    PathEscape(String),
    #[error("image file `{0}` does not exist")]
    MissingImage(String),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error(transparent)]
    Invalid(#[from] ValidationError),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("line {line_no}: {kind}")]
pub struct LineError {
    pub line_no: usize,
    pub kind: LineErrorKind,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<MemeRecord>,
    pub errors: Vec<LineError>,
}

#[derive(Deserialize)]
struct RawLine {
    id: Value,
    img: String,
    text: String,
    #[serde(default)]
    label: Option<i64>,
    #[serde(default)]
    ocr: Option<String>,
}

fn relative_inside(img: &str) -> bool {
    let p = Path::new(img);
    !img.is_empty() && p.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
}

fn id_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) if n.is_u64() || n.is_i64() => Some(n.to_string()),
        _ => None,
    }
}

fn parse_line(root: &Path, line: &str) -> Result<MemeRecord, LineErrorKind> {
    let raw: RawLine = serde_json::from_str(line).map_err(|e| LineErrorKind::MalformedLine(e.to_string()))?;
    let id = id_string(&raw.id).ok_or_else(|| LineErrorKind::MalformedLine("`id` must be a string or integer".into()))?;
    if !relative_inside(&raw.img) {
        return Err(LineErrorKind::PathEscape(raw.img));
    }
    let path = root.join(&raw.img);
    if !path.is_file() {
        return Err(LineErrorKind::MissingImage(raw.img));
    }
    Ok(MemeRecord::from_parts(id, ImageHandle::from_path(path), raw.text, raw.ocr, raw.label)?)
}

/// Parse every line; bad lines are reported and skipped, the rest kept in
/// file order. Images are decoded on first use.
pub fn ingest_manifest(path: &Path) -> Result<Manifest, ManifestError> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ManifestError::FileNotFound(path.to_path_buf()),
        _ => ManifestError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ManifestError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        match parse_line(&root, &line) {
            Ok(rec) if !seen.insert(rec.id.clone()) => errors.push(LineError {
                line_no,
                kind: LineErrorKind::DuplicateId(rec.id),
            }),
            Ok(rec) => records.push(rec),
            Err(kind) => {
                tracing::warn!("{}:{line_no}: {kind}", path.display());
                errors.push(LineError { line_no, kind })
            }
        }
    }
    Ok(Manifest { root, records, errors })
}
