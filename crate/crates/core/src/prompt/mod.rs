//! Prompt templates and rendering.
//!
//! Templates live in `prompts/*.txt` as UTF-8 text with `{{slot}}` markers.
//! Rendering expands each slot into text and image attachments; the literal
//! text between slots is emitted byte-for-byte.

mod parse;

use std::sync::LazyLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ImageHandle, Label, MemeRecord};

pub use parse::{
    parse_detection_response, parse_hate_type_response, parse_selection_response,
    parse_source_response, ParseError, Selection,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("OCR text requested but meme `{0}` has none")]
    MissingOcr(String),
    #[error("image selection needs at least one candidate")]
    MissingCandidates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TemplateName {
    DetectZeroShot,
    DetectFewShot,
    AnalyzeHateType,
    IdentifySource,
    GenImageDescription,
    SelectBestImage,
    GenSubstituteText,
}

impl TemplateName {
    pub const ALL: [TemplateName; 7] = [
        TemplateName::DetectZeroShot,
        TemplateName::DetectFewShot,
        TemplateName::AnalyzeHateType,
        TemplateName::IdentifySource,
        TemplateName::GenImageDescription,
        TemplateName::SelectBestImage,
        TemplateName::GenSubstituteText,
    ];

    /// File name under `prompts/`.
    pub fn file_name(self) -> &'static str {
        match self {
            TemplateName::DetectZeroShot => "detect_zero_shot.txt",
            TemplateName::DetectFewShot => "detect_few_shot.txt",
            TemplateName::AnalyzeHateType => "analyze_hate_type.txt",
            TemplateName::IdentifySource => "identify_source.txt",
            TemplateName::GenImageDescription => "gen_image_description.txt",
            TemplateName::SelectBestImage => "select_best_image.txt",
            TemplateName::GenSubstituteText => "gen_substitute_text.txt",
        }
    }

    fn source(self) -> &'static str {
        match self {
            TemplateName::DetectZeroShot => include_str!("../../prompts/detect_zero_shot.txt"),
            TemplateName::DetectFewShot => include_str!("../../prompts/detect_few_shot.txt"),
            TemplateName::AnalyzeHateType => include_str!("../../prompts/analyze_hate_type.txt"),
            TemplateName::IdentifySource => include_str!("../../prompts/identify_source.txt"),
            TemplateName::GenImageDescription => {
                include_str!("../../prompts/gen_image_description.txt")
            }
            TemplateName::SelectBestImage => include_str!("../../prompts/select_best_image.txt"),
            TemplateName::GenSubstituteText => {
                include_str!("../../prompts/gen_substitute_text.txt")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    TestMeme,
    OcrText,
    Demonstrations,
    CandidateImages,
}

impl Slot {
    fn from_marker(name: &str) -> Option<Slot> {
        match name {
            "test-meme" => Some(Slot::TestMeme),
            "ocr-text" => Some(Slot::OcrText),
            "demonstrations" => Some(Slot::Demonstrations),
            "candidate-images" => Some(Slot::CandidateImages),
            _ => None,
        }
    }

    pub fn marker(self) -> &'static str {
        match self {
            Slot::TestMeme => "test-meme",
            Slot::OcrText => "ocr-text",
            Slot::Demonstrations => "demonstrations",
            Slot::CandidateImages => "candidate-images",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    Slot(Slot),
}

#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub segments: Vec<Segment>,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("template {template:?}: unknown or unterminated slot near byte {offset}")]
pub struct TemplateSyntaxError {
    pub template: TemplateName,
    pub offset: usize,
}

impl PromptTemplate {
    pub fn parse(name: TemplateName, source: &str) -> Result<Self, TemplateSyntaxError> {
        // files end with a newline; the prompt itself does not
        let body = source.strip_suffix('\n').unwrap_or(source);
        let mut segments = Vec::new();
        let mut rest = body;
        let mut consumed = 0;
        while let Some(start) = rest.find("{{") {
            let err = TemplateSyntaxError {
                template: name,
                offset: consumed + start,
            };
            let end = rest[start..].find("}}").ok_or(err)?;
            let marker = &rest[start + 2..start + end];
            let slot = Slot::from_marker(marker).ok_or(TemplateSyntaxError {
                template: name,
                offset: consumed + start,
            })?;
            if start > 0 {
                segments.push(Segment::Literal(rest[..start].to_string()));
            }
            segments.push(Segment::Slot(slot));
            consumed += start + end + 2;
            rest = &rest[start + end + 2..];
        }
        if !rest.is_empty() {
            segments.push(Segment::Literal(rest.to_string()));
        }
        Ok(PromptTemplate { name, segments })
    }

    /// The built-in template for `name`.
    pub fn get(name: TemplateName) -> &'static PromptTemplate {
        static TEMPLATES: LazyLock<Vec<PromptTemplate>> = LazyLock::new(|| {
            TemplateName::ALL
                .iter()
                .map(|&n| PromptTemplate::parse(n, n.source()).expect("built-in template parses"))
                .collect()
        });
        let idx = TemplateName::ALL.iter().position(|&n| n == name).unwrap();
        &TEMPLATES[idx]
    }

    pub fn slots(&self) -> impl Iterator<Item = Slot> + '_ {
        self.segments.iter().filter_map(|s| match s {
            Segment::Slot(slot) => Some(*slot),
            Segment::Literal(_) => None,
        })
    }

    /// Template text with every slot written back as its `{{marker}}`.
    pub fn to_source(&self) -> String {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Literal(t) => t.clone(),
                Segment::Slot(slot) => format!("{{{{{}}}}}", slot.marker()),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

/// An image placed immediately before `text_parts[position]`
/// (or after the last part when `position == text_parts.len()`).
#[derive(Debug, Clone)]
pub struct Attachment {
    pub position: usize,
    pub image: ImageHandle,
}

#[derive(Debug, Clone)]
pub struct Turn {
    pub role: Role,
    pub text_parts: Vec<String>,
    pub attachments: Vec<Attachment>,
}

impl Turn {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Turn {
            role,
            text_parts: vec![text.into()],
            attachments: Vec::new(),
        }
    }

    /// Attachment positions strictly increase and stay within the text.
    pub fn is_well_formed(&self) -> bool {
        let within = self
            .attachments
            .iter()
            .all(|a| a.position <= self.text_parts.len());
        let increasing = self
            .attachments
            .windows(2)
            .all(|w| w[0].position < w[1].position);
        within && increasing
    }

    /// Content in reading order.
    pub fn pieces(&self) -> Vec<Piece<'_>> {
        let mut out = Vec::with_capacity(self.text_parts.len() + self.attachments.len());
        let mut atts = self.attachments.iter().peekable();
        for (i, part) in self.text_parts.iter().enumerate() {
            while let Some(a) = atts.next_if(|a| a.position == i) {
                out.push(Piece::Image(&a.image));
            }
            out.push(Piece::Text(part));
        }
        out.extend(atts.map(|a| Piece::Image(&a.image)));
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Piece<'a> {
    Text(&'a str),
    Image(&'a ImageHandle),
}

/// A prompt ready for a chat backend: one or more turns, ending with a user turn.
#[derive(Debug, Clone)]
pub struct RenderedPrompt {
    pub template: TemplateName,
    pub turns: Vec<Turn>,
}

impl RenderedPrompt {
    pub fn final_turn(&self) -> &Turn {
        self.turns.last().expect("rendered prompts have at least one turn")
    }

    pub fn attachment_count(&self) -> usize {
        self.turns.iter().map(|t| t.attachments.len()).sum()
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageHandle> {
        self.turns
            .iter()
            .flat_map(|t| t.attachments.iter().map(|a| &a.image))
    }

    /// Plain-text view with `<image>` standing in for attachments. Multi-turn
    /// prompts prefix each turn with `[role]`.
    pub fn transcript(&self) -> String {
        let render_turn = |t: &Turn| -> String {
            t.pieces()
                .into_iter()
                .map(|p| match p {
                    Piece::Text(s) => s,
                    Piece::Image(_) => "<image>",
                })
                .collect()
        };
        if self.turns.len() == 1 {
            return render_turn(&self.turns[0]);
        }
        self.turns
            .iter()
            .map(|t| {
                let role = match t.role {
                    Role::User => "[user]",
                    Role::Assistant => "[assistant]",
                };
                format!("{role}\n{}", render_turn(t))
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// A labeled example shown before the test meme.
#[derive(Debug, Clone)]
pub struct Demonstration {
    pub meme: MemeRecord,
    pub label: Label,
}

struct TurnBuilder {
    parts: Vec<String>,
    buf: String,
    attachments: Vec<Attachment>,
}

impl TurnBuilder {
    fn new() -> Self {
        TurnBuilder {
            parts: Vec::new(),
            buf: String::new(),
            attachments: Vec::new(),
        }
    }

    fn text(&mut self, s: &str) {
        self.buf.push_str(s);
    }

    fn image(&mut self, image: &ImageHandle) {
        if !self.buf.is_empty() {
            self.parts.push(std::mem::take(&mut self.buf));
        }
        let position = self.parts.len();
        debug_assert!(
            self.attachments.last().is_none_or(|a| a.position < position),
            "adjacent images need separating text"
        );
        self.attachments.push(Attachment {
            position,
            image: image.clone(),
        });
    }

    fn finish(mut self) -> Turn {
        if !self.buf.is_empty() {
            self.parts.push(self.buf);
        }
        Turn {
            role: Role::User,
            text_parts: self.parts,
            attachments: self.attachments,
        }
    }
}

#[derive(Default)]
struct SlotValues<'a> {
    test_meme: Option<&'a ImageHandle>,
    ocr_text: Option<&'a str>,
    demos: &'a [Demonstration],
    candidates: &'a [ImageHandle],
}

fn render_template(name: TemplateName, values: &SlotValues<'_>) -> Turn {
    let mut b = TurnBuilder::new();
    for seg in &PromptTemplate::get(name).segments {
        match seg {
            Segment::Literal(t) => b.text(t),
            Segment::Slot(Slot::TestMeme) => {
                b.image(values.test_meme.expect("test meme supplied"));
            }
            Segment::Slot(Slot::OcrText) => {
                if let Some(ocr) = values.ocr_text {
                    b.text("Meme text: ");
                    b.text(ocr);
                    b.text("\n");
                }
            }
            Segment::Slot(Slot::Demonstrations) => {
                for (i, demo) in values.demos.iter().enumerate() {
                    if i > 0 {
                        b.text("\n");
                    }
                    b.image(&demo.meme.image);
                    b.text("\nClassification: ");
                    b.text(demo.label.as_word());
                }
            }
            Segment::Slot(Slot::CandidateImages) => {
                for (i, img) in values.candidates.iter().enumerate() {
                    if i > 0 {
                        b.text("\n");
                    }
                    b.image(img);
                }
            }
        }
    }
    b.finish()
}

/// Zero-shot when `demos` is empty, few-shot otherwise. Demonstrations are
/// shown image-only; `use_ocr` adds a `Meme text:` line after the test meme.
pub fn render_detection_prompt(
    meme: &MemeRecord,
    demos: &[Demonstration],
    use_ocr: bool,
) -> Result<RenderedPrompt, PromptError> {
    let ocr_text = if use_ocr {
        Some(
            meme.ocr_text
                .as_deref()
                .ok_or_else(|| PromptError::MissingOcr(meme.id.clone()))?,
        )
    } else {
        None
    };
    let template = if demos.is_empty() {
        TemplateName::DetectZeroShot
    } else {
        TemplateName::DetectFewShot
    };
    let values = SlotValues {
        test_meme: Some(&meme.image),
        ocr_text,
        demos,
        ..Default::default()
    };
    Ok(RenderedPrompt {
        template,
        turns: vec![render_template(template, &values)],
    })
}

/// The mitigation-stage prompts. Image selection continues the description
/// conversation, so it carries the assistant's description and the candidates.
#[derive(Debug, Clone, Copy)]
pub enum MitigationPrompt<'a> {
    AnalyzeHateType,
    IdentifySource,
    GenImageDescription,
    SelectBestImage {
        description: &'a str,
        candidates: &'a [ImageHandle],
    },
    GenSubstituteText,
}

impl MitigationPrompt<'_> {
    pub fn template(&self) -> TemplateName {
        match self {
            MitigationPrompt::AnalyzeHateType => TemplateName::AnalyzeHateType,
            MitigationPrompt::IdentifySource => TemplateName::IdentifySource,
            MitigationPrompt::GenImageDescription => TemplateName::GenImageDescription,
            MitigationPrompt::SelectBestImage { .. } => TemplateName::SelectBestImage,
            MitigationPrompt::GenSubstituteText => TemplateName::GenSubstituteText,
        }
    }
}

pub fn render_mitigation_prompt(
    kind: MitigationPrompt<'_>,
    meme: &MemeRecord,
) -> Result<RenderedPrompt, PromptError> {
    let single = |name| {
        let values = SlotValues {
            test_meme: Some(&meme.image),
            ..Default::default()
        };
        RenderedPrompt {
            template: name,
            turns: vec![render_template(name, &values)],
        }
    };
    Ok(match kind {
        MitigationPrompt::SelectBestImage {
            description,
            candidates,
        } => {
            if candidates.is_empty() {
                return Err(PromptError::MissingCandidates);
            }
            let mut turns = single(TemplateName::GenImageDescription).turns;
            turns.push(Turn::text(Role::Assistant, description));
            let values = SlotValues {
                candidates,
                ..Default::default()
            };
            turns.push(render_template(TemplateName::SelectBestImage, &values));
            RenderedPrompt {
                template: TemplateName::SelectBestImage,
                turns,
            }
        }
        other => single(other.template()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::RgbImage;

    fn meme(id: &str) -> MemeRecord {
        MemeRecord::new(id, ImageHandle::from_raster(RgbImage::new(4, 4)), "some caption")
    }

    fn demo(id: &str, label: Label) -> Demonstration {
        Demonstration {
            meme: meme(id),
            label,
        }
    }

    #[test]
    fn zero_shot_starts_with_definition_and_has_one_image() {
        let p = render_detection_prompt(&meme("m"), &[], false).unwrap();
        assert_eq!(p.template, TemplateName::DetectZeroShot);
        assert!(p.transcript().starts_with(
            "Hatefulness definition: Hate speech is defined as a direct or indirect attack"
        ));
        assert_eq!(p.attachment_count(), 1);
        assert!(p.final_turn().is_well_formed());
    }

    #[test]
    fn few_shot_places_demos_before_test_meme() {
        let demos = [
            demo("a", Label::NonHateful),
            demo("b", Label::Hateful),
            demo("c", Label::NonHateful),
            demo("d", Label::Hateful),
        ];
        let p = render_detection_prompt(&meme("m"), &demos, false).unwrap();
        assert_eq!(p.attachment_count(), 5);
        let t = p.transcript();
        assert_eq!(t.matches("\nClassification: ").count(), 4);
        let test_meme_at = t.rfind("<image>").unwrap();
        for (i, _) in t.match_indices("Classification: ") {
            if t[i..].starts_with("Classification: hateful") || t[i..].starts_with("Classification: non-hateful") {
                assert!(i < test_meme_at);
            }
        }
        assert!(p.final_turn().is_well_formed());
    }

    #[test]
    fn ocr_requires_text() {
        let err = render_detection_prompt(&meme("m"), &[], true).unwrap_err();
        assert_eq!(err, PromptError::MissingOcr("m".into()));
        let p = render_detection_prompt(&meme("m").with_ocr("look at this"), &[], true).unwrap();
        assert!(p.transcript().contains("<image>\nMeme text: look at this\nYou consider"));
    }

    #[test]
    fn hate_type_prompt_mentions_both_classes() {
        let p = render_mitigation_prompt(MitigationPrompt::AnalyzeHateType, &meme("m")).unwrap();
        assert!(p.transcript().contains("classify it as unimodal-hate or multimodal-hate"));
        assert_eq!(p.attachment_count(), 1);
    }

    #[test]
    fn selection_attaches_candidates_after_instruction() {
        let cands: Vec<ImageHandle> = (0..4)
            .map(|_| ImageHandle::from_raster(RgbImage::new(2, 2)))
            .collect();
        let p = render_mitigation_prompt(
            MitigationPrompt::SelectBestImage {
                description: "A dog wearing sunglasses.",
                candidates: &cands,
            },
            &meme("m"),
        )
        .unwrap();
        let last = p.final_turn();
        assert_eq!(last.attachments.len(), 4);
        assert!(last.is_well_formed());
        assert!(last.text_parts[0].starts_with("You are given a collection of substitute images"));
        assert!(last.text_parts[0].contains("choose the best image"));
        assert_eq!(last.attachments[0].position, 1);
        assert_eq!(p.turns[1].role, Role::Assistant);
    }

    #[test]
    fn selection_without_candidates_fails() {
        let err = render_mitigation_prompt(
            MitigationPrompt::SelectBestImage {
                description: "x",
                candidates: &[],
            },
            &meme("m"),
        )
        .unwrap_err();
        assert_eq!(err, PromptError::MissingCandidates);
    }

    #[test]
    fn templates_round_trip_through_parser() {
        for name in TemplateName::ALL {
            let t = PromptTemplate::get(name);
            let src = name.source();
            assert_eq!(t.to_source(), src.strip_suffix('\n').unwrap_or(src));
        }
        assert!(PromptTemplate::parse(TemplateName::DetectZeroShot, "a {{bogus}} b").is_err());
        assert!(PromptTemplate::parse(TemplateName::DetectZeroShot, "a {{test-meme b").is_err());
    }

    #[test]
    fn slot_sets_are_as_expected() {
        let slots: Vec<Slot> = PromptTemplate::get(TemplateName::DetectFewShot).slots().collect();
        assert_eq!(slots, vec![Slot::Demonstrations, Slot::TestMeme, Slot::OcrText]);
        let slots: Vec<Slot> = PromptTemplate::get(TemplateName::SelectBestImage).slots().collect();
        assert_eq!(slots, vec![Slot::CandidateImages]);
    }
}
