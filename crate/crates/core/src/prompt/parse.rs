//! Parsers for free-text backend replies.
//!
//! Replies often restate the requested format before answering, so every
//! parser binds to the last `Classification:` line it can find.

use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

use crate::model::{DetectionResult, HateSource, HateType, Label};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("no hateful/non-hateful classification in reply")]
    UnparseableLabel,
    #[error("no unimodal/multimodal classification in reply")]
    UnparseableHateType,
    #[error("no hate-source phrase in reply")]
    UnparseableSource,
}

static CLASSIFICATION_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?im)^[^\n]*?\bclassification\b[\s*_]*:([^\n]*)$").unwrap());

static PROBABILITY: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)probability[^\n:]*:[\s*_]*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(%)?")
        .unwrap()
});

static HATE_TYPE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(uni|multi)[\s-]?modal\b").unwrap());

static SELECTION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\b(?:image|picture|photo|option|candidate)\s*(?:#|no\.?|number)?\s*(\d{1,4})\b|\b(first|second|third|fourth|fifth|sixth|seventh|eighth|ninth|tenth)\b|\b(\d{1,4})(?:st|nd|rd|th)?\b",
    )
    .unwrap()
});

/// The answer text of the last `Classification:` line, plus the byte offset
/// where that line starts. An empty remainder falls through to the next
/// non-blank line (`Classification:\nhateful`).
fn last_classification(raw: &str) -> Option<(usize, String)> {
    let caps = CLASSIFICATION_LINE.captures_iter(raw).last()?;
    let line_start = caps.get(0).unwrap().start();
    let rest = caps.get(1).unwrap();
    let mut answer = rest.as_str().trim().trim_matches(|c| c == '*' || c == '_').trim().to_string();
    if answer.is_empty() {
        if let Some(next) = raw[rest.end()..].lines().map(str::trim).find(|l| !l.is_empty()) {
            answer = next.to_string();
        }
    }
    Some((line_start, answer))
}

fn label_in(answer: &str) -> Option<Label> {
    let a = answer.to_lowercase();
    // "non-hateful" contains "hateful"; the longer token wins
    if a.contains("non-hateful") || a.contains("non hateful") || a.contains("nonhateful") || a.contains("not hateful") {
        Some(Label::NonHateful)
    } else if a.contains("hateful") {
        Some(Label::Hateful)
    } else {
        None
    }
}

fn probability_in(raw: &str) -> Option<f64> {
    let caps = PROBABILITY.captures_iter(raw).last()?;
    let mut p: f64 = caps.get(1)?.as_str().parse().ok()?;
    if !p.is_finite() {
        return None;
    }
    if caps.get(2).is_some() {
        p /= 100.0;
    }
    Some(p.clamp(0.0, 1.0))
}

pub fn parse_detection_response(raw: &str) -> Result<DetectionResult, ParseError> {
    let (line_start, answer) = last_classification(raw).ok_or(ParseError::UnparseableLabel)?;
    let label = label_in(&answer).ok_or(ParseError::UnparseableLabel)?;
    let (probability, probability_fallback) = match probability_in(raw) {
        Some(p) => (p, false),
        None => (
            match label {
                Label::Hateful => 1.0,
                Label::NonHateful => 0.0,
            },
            true,
        ),
    };
    Ok(DetectionResult {
        label,
        probability,
        explanation: raw[..line_start].trim().to_string(),
        raw_response: raw.to_string(),
        probability_fallback,
    })
}

pub fn parse_hate_type_response(raw: &str) -> Result<HateType, ParseError> {
    let from_answer = |text: &str| {
        HATE_TYPE.captures_iter(text).last().map(|c| {
            if c[1].eq_ignore_ascii_case("multi") {
                HateType::MultimodalHate
            } else {
                HateType::UnimodalHate
            }
        })
    };
    match last_classification(raw) {
        Some((_, answer)) => from_answer(&answer),
        None => from_answer(raw),
    }
    .ok_or(ParseError::UnparseableHateType)
}

pub fn parse_source_response(raw: &str) -> Result<HateSource, ParseError> {
    let lower = raw.to_lowercase();
    if lower.contains("hate from both") {
        return Ok(HateSource::Both);
    }
    let image = lower.find("hate from image");
    let text = lower.find("hate from text");
    match (image, text) {
        (Some(i), Some(t)) if t < i => Ok(HateSource::Text),
        (Some(_), _) => Ok(HateSource::Image),
        (None, Some(_)) => Ok(HateSource::Text),
        (None, None) => Err(ParseError::UnparseableSource),
    }
}

/// Outcome of parsing an image-selection reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selection {
    /// 0-based candidate index, always `< k`.
    pub index: usize,
    /// No usable mention was found and candidate 0 was taken.
    pub fallback: bool,
}

fn ordinal(word: &str) -> usize {
    match word.to_ascii_lowercase().as_str() {
        "first" => 1,
        "second" => 2,
        "third" => 3,
        "fourth" => 4,
        "fifth" => 5,
        "sixth" => 6,
        "seventh" => 7,
        "eighth" => 8,
        "ninth" => 9,
        _ => 10,
    }
}

/// First 1-based mention ("image 2", "second", "2") that names one of the `k`
/// candidates.
pub fn parse_selection_response(raw: &str, k: usize) -> Selection {
    for caps in SELECTION.captures_iter(raw) {
        let one_based = if let Some(m) = caps.get(1).or_else(|| caps.get(3)) {
            m.as_str().parse::<usize>().unwrap_or(0)
        } else {
            ordinal(&caps[2])
        };
        if (1..=k).contains(&one_based) {
            return Selection {
                index: one_based - 1,
                fallback: false,
            };
        }
    }
    tracing::warn!(reply = raw, "no candidate index in selection reply; using the first candidate");
    Selection {
        index: 0,
        fallback: true,
    }
}
