//! Domain types shared across the pipeline.
//!
//! A meme is an image plus its caption text; detection maps it to a [`Label`],
//! mitigation routes it by [`HateType`] / [`HateSource`] to text and/or image
//! substitution.

use std::fmt;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ValidationError {
    #[error("meme id is empty")]
    EmptyId,
    #[error("bad image for meme `{id}`: {reason}")]
    BadImage { id: String, reason: String },
    #[error("label code {0} is not 0 or 1")]
    BadLabelCode(i64),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("image {path}: {reason}")]
pub struct ImageLoadError {
    pub path: String,
    pub reason: String,
}

/// Gold or predicted class. Numeric codes match the dataset encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "i64")]
pub enum Label {
    NonHateful = 0,
    Hateful = 1,
}

impl Label {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: i64) -> Result<Self, ValidationError> {
        match code {
            0 => Ok(Label::NonHateful),
            1 => Ok(Label::Hateful),
            other => Err(ValidationError::BadLabelCode(other)),
        }
    }

    /// The word the detection prompts use for this class.
    pub fn as_word(self) -> &'static str {
        match self {
            Label::NonHateful => "non-hateful",
            Label::Hateful => "hateful",
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.code()
    }
}

impl TryFrom<i64> for Label {
    type Error = ValidationError;
    fn try_from(code: i64) -> Result<Self, Self::Error> {
        Label::from_code(code)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_word())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HateType {
    UnimodalHate,
    MultimodalHate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HateSource {
    Image,
    Text,
    Both,
}

/// Shared, lazily decoded RGB raster.
///
/// Handles created from a path decode on first access; the decode outcome is
/// cached so every clone observes the same pixels.
#[derive(Clone)]
pub struct ImageHandle {
    inner: Arc<ImageInner>,
}

struct ImageInner {
    path: Option<PathBuf>,
    raster: OnceLock<Result<Arc<RgbImage>, ImageLoadError>>,
}

impl ImageHandle {
    pub fn from_raster(img: RgbImage) -> Self {
        let cell = OnceLock::new();
        let _ = cell.set(Ok(Arc::new(img)));
        ImageHandle {
            inner: Arc::new(ImageInner { path: None, raster: cell }),
        }
    }

    pub fn from_path(path: impl Into<PathBuf>) -> Self {
        ImageHandle {
            inner: Arc::new(ImageInner {
                path: Some(path.into()),
                raster: OnceLock::new(),
            }),
        }
    }

    /// Decode from encoded PNG/JPEG bytes.
    pub fn from_encoded(bytes: &[u8]) -> Result<Self, ImageLoadError> {
        let img = image::load_from_memory(bytes).map_err(|e| ImageLoadError {
            path: "<memory>".into(),
            reason: e.to_string(),
        })?;
        Ok(Self::from_raster(img.to_rgb8()))
    }

    pub fn path(&self) -> Option<&Path> {
        self.inner.path.as_deref()
    }

    pub fn raster(&self) -> Result<Arc<RgbImage>, ImageLoadError> {
        self.inner
            .raster
            .get_or_init(|| {
                let path = self.inner.path.as_ref().expect("pathless handles are pre-filled");
                image::open(path)
                    .map(|img| Arc::new(img.to_rgb8()))
                    .map_err(|e| ImageLoadError {
                        path: path.display().to_string(),
                        reason: e.to_string(),
                    })
            })
            .clone()
    }

    /// SHA-256 over `width || height || raw RGB bytes` (little-endian dims).
    /// Two handles share a digest iff their decoded pixels are identical.
    pub fn digest(&self) -> Result<[u8; 32], ImageLoadError> {
        let img = self.raster()?;
        let mut h = Sha256::new();
        h.update(img.width().to_le_bytes());
        h.update(img.height().to_le_bytes());
        h.update(img.as_raw());
        Ok(h.finalize().into())
    }

    pub fn to_png(&self) -> Result<Vec<u8>, ImageLoadError> {
        let img = self.raster()?;
        encode_png(&img).map_err(|reason| ImageLoadError {
            path: self.describe(),
            reason,
        })
    }

    fn describe(&self) -> String {
        self.inner
            .path
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "<memory>".into())
    }
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, String> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| e.to_string())?;
    Ok(buf.into_inner())
}

impl fmt::Debug for ImageHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.inner.raster.get() {
            Some(Ok(img)) => write!(f, "ImageHandle({}x{})", img.width(), img.height()),
            _ => write!(f, "ImageHandle({})", self.describe()),
        }
    }
}

/// One meme: the image, its caption semantics, optional OCR text and gold label.
#[derive(Debug, Clone)]
pub struct MemeRecord {
    pub id: String,
    pub image: ImageHandle,
    pub text: String,
    pub ocr_text: Option<String>,
    pub label: Option<Label>,
}

impl MemeRecord {
    pub fn new(id: impl Into<String>, image: ImageHandle, text: impl Into<String>) -> Self {
        MemeRecord {
            id: id.into(),
            image,
            text: text.into(),
            ocr_text: None,
            label: None,
        }
    }

    /// Build from raw dataset fields, mapping the numeric label code.
    pub fn from_parts(
        id: impl Into<String>,
        image: ImageHandle,
        text: impl Into<String>,
        ocr_text: Option<String>,
        label_code: Option<i64>,
    ) -> Result<Self, ValidationError> {
        let label = label_code.map(Label::from_code).transpose()?;
        let rec = MemeRecord {
            id: id.into(),
            image,
            text: text.into(),
            ocr_text,
            label,
        };
        if rec.id.is_empty() {
            return Err(ValidationError::EmptyId);
        }
        Ok(rec)
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_ocr(mut self, ocr: impl Into<String>) -> Self {
        self.ocr_text = Some(ocr.into());
        self
    }
}

/// Check every record invariant; decodes the image if it is still lazy.
pub fn validate_record(record: &MemeRecord) -> Result<(), ValidationError> {
    if record.id.is_empty() {
        return Err(ValidationError::EmptyId);
    }
    let img = record.image.raster().map_err(|e| ValidationError::BadImage {
        id: record.id.clone(),
        reason: e.reason,
    })?;
    if img.width() == 0 || img.height() == 0 {
        return Err(ValidationError::BadImage {
            id: record.id.clone(),
            reason: format!("zero-sized raster {}x{}", img.width(), img.height()),
        });
    }
    Ok(())
}

/// Parsed output of a detection call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub label: Label,
    pub probability: f64,
    pub explanation: String,
    pub raw_response: String,
    /// True when the reply had no probability line and the label-derived
    /// default (1.0 / 0.0) was used.
    #[serde(default)]
    pub probability_fallback: bool,
}

/// For multimodal hate either substitution alone breaks the hateful pairing;
/// the caller decides which ones to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MultimodalChoice {
    #[default]
    Both,
    Text,
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum SubstitutionAction {
    TextSub {
        generated_text: String,
    },
    ImageSub {
        generated_description: String,
        candidate_ids: Vec<String>,
        chosen_id: String,
    },
}

impl SubstitutionAction {
    pub fn is_text(&self) -> bool {
        matches!(self, SubstitutionAction::TextSub { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationPlan {
    pub meme_id: String,
    pub hate_type: HateType,
    pub source: Option<HateSource>,
    #[serde(default)]
    pub choice: MultimodalChoice,
    pub actions: Vec<SubstitutionAction>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanViolation {
    #[error("unimodal plan without a hate source")]
    MissingSource,
    #[error("multimodal plan carries a hate source")]
    UnexpectedSource,
    #[error("actions do not match the routing rule")]
    WrongActions,
    #[error("substitute text is empty")]
    EmptyText,
    #[error("chosen image `{0}` is not among the candidates")]
    ChosenNotCandidate(String),
}

/// Which substitutions a plan must carry, in order: (text, image).
fn required_actions(plan: &MitigationPlan) -> Result<(bool, bool), PlanViolation> {
    match (plan.hate_type, plan.source) {
        (HateType::UnimodalHate, None) => Err(PlanViolation::MissingSource),
        (HateType::UnimodalHate, Some(HateSource::Text)) => Ok((true, false)),
        (HateType::UnimodalHate, Some(HateSource::Image)) => Ok((false, true)),
        (HateType::UnimodalHate, Some(HateSource::Both)) => Ok((true, true)),
        (HateType::MultimodalHate, Some(_)) => Err(PlanViolation::UnexpectedSource),
        (HateType::MultimodalHate, None) => Ok(match plan.choice {
            MultimodalChoice::Both => (true, true),
            MultimodalChoice::Text => (true, false),
            MultimodalChoice::Image => (false, true),
        }),
    }
}

impl MitigationPlan {
    /// Pure routing predicate over the plan.
    pub fn check(&self) -> Result<(), PlanViolation> {
        let (want_text, want_image) = required_actions(self)?;
        let texts = self.actions.iter().filter(|a| a.is_text()).count();
        let images = self.actions.len() - texts;
        if texts != want_text as usize || images != want_image as usize {
            return Err(PlanViolation::WrongActions);
        }
        // text substitution first when both are present
        if self.actions.len() == 2 && !self.actions[0].is_text() {
            return Err(PlanViolation::WrongActions);
        }
        for action in &self.actions {
            match action {
                SubstitutionAction::TextSub { generated_text } if generated_text.trim().is_empty() => {
                    return Err(PlanViolation::EmptyText)
                }
                SubstitutionAction::ImageSub {
                    candidate_ids,
                    chosen_id,
                    ..
                } if !candidate_ids.contains(chosen_id) => {
                    return Err(PlanViolation::ChosenNotCandidate(chosen_id.clone()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Number of output memes this plan yields.
    pub fn output_count(&self) -> usize {
        match self.hate_type {
            HateType::UnimodalHate => 1,
            HateType::MultimodalHate => self.actions.len(),
        }
    }

    /// Evaluation split this plan's outputs fall under.
    pub fn split(&self) -> Split {
        match (self.hate_type, self.source) {
            (HateType::MultimodalHate, _) => Split::Multimodal,
            (_, Some(HateSource::Text)) => Split::UnimodalText,
            (_, Some(HateSource::Image)) => Split::UnimodalImage,
            _ => Split::UnimodalBoth,
        }
    }
}

/// Routing bucket used when aggregating human verdicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    UnimodalText,
    UnimodalImage,
    UnimodalBoth,
    Multimodal,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::UnimodalText,
        Split::UnimodalImage,
        Split::UnimodalBoth,
        Split::Multimodal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::UnimodalText => "unimodal-text",
            Split::UnimodalImage => "unimodal-image",
            Split::UnimodalBoth => "unimodal-both",
            Split::Multimodal => "multimodal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    TextSubstituted,
    ImageSubstituted,
    BothSubstituted,
}

impl Variant {
    /// Short tag used in variant ids and output file names.
    pub fn tag(self) -> &'static str {
        match self {
            Variant::TextSubstituted => "text",
            Variant::ImageSubstituted => "image",
            Variant::BothSubstituted => "both",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MitigatedMeme {
    pub source_meme_id: String,
    pub variant: Variant,
    pub new_text: Option<String>,
    pub new_image_id: Option<String>,
    pub composed_image: ImageHandle,
}

impl MitigatedMeme {
    /// `<meme_id>.<variant>`; also the stem of the PNG written for it.
    pub fn variant_id(&self) -> String {
        format!("{}.{}", self.source_meme_id, self.variant.tag())
    }

    pub fn is_consistent(&self) -> bool {
        match self.variant {
            Variant::TextSubstituted => self.new_text.is_some() && self.new_image_id.is_none(),
            Variant::ImageSubstituted => self.new_text.is_none() && self.new_image_id.is_some(),
            Variant::BothSubstituted => self.new_text.is_some() && self.new_image_id.is_some(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VectorError {
    #[error("vector is empty")]
    Empty,
    #[error("vector has a non-finite component")]
    NonFinite,
    #[error("vector has zero norm")]
    ZeroNorm,
    #[error("vector norm {0} is not 1")]
    NotUnit(f64),
}

/// Unit-norm embedding. Construction normalizes, so `λ·v` and `v` map to the
/// same stored vector for any `λ > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

pub const NORM_TOLERANCE: f64 = 1e-6;

impl EmbeddingVector {
    pub fn normalized(values: &[f32]) -> Result<Self, VectorError> {
        let as64: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        Self::normalized_f64(&as64)
    }

    pub fn normalized_f64(values: &[f64]) -> Result<Self, VectorError> {
        if values.is_empty() {
            return Err(VectorError::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(VectorError::NonFinite);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(VectorError::ZeroNorm);
        }
        Ok(EmbeddingVector {
            values: values.iter().map(|v| (v / norm) as f32).collect(),
        })
    }

    /// Accept an already-normalized vector verbatim (no rescaling), rejecting
    /// anything outside the norm tolerance.
    pub fn from_unit(values: Vec<f32>) -> Result<Self, VectorError> {
        if values.is_empty() {
            return Err(VectorError::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(VectorError::NonFinite);
        }
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(VectorError::NotUnit(norm));
        }
        Ok(EmbeddingVector { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }
}

fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

impl TryFrom<Vec<f32>> for EmbeddingVector {
    type Error = VectorError;
    fn try_from(v: Vec<f32>) -> Result<Self, Self::Error> {
        EmbeddingVector::from_unit(v)
    }
}

impl From<EmbeddingVector> for Vec<f32> {
    fn from(v: EmbeddingVector) -> Vec<f32> {
        v.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_image() -> ImageHandle {
        ImageHandle::from_raster(RgbImage::new(2, 2))
    }

    #[test]
    fn well_formed_record_validates() {
        let rec = MemeRecord::from_parts("01235", tiny_image(), "caption", None, Some(1)).unwrap();
        assert_eq!(rec.label, Some(Label::Hateful));
        assert_eq!(validate_record(&rec), Ok(()));
    }

    #[test]
    fn empty_id_rejected() {
        let rec = MemeRecord::new("", tiny_image(), "x");
        assert_eq!(validate_record(&rec), Err(ValidationError::EmptyId));
        let err = MemeRecord::from_parts("", tiny_image(), "x", None, None).unwrap_err();
        assert_eq!(err, ValidationError::EmptyId);
    }

    #[test]
    fn label_code_two_rejected() {
        let err = MemeRecord::from_parts("a", tiny_image(), "x", None, Some(2)).unwrap_err();
        assert_eq!(err, ValidationError::BadLabelCode(2));
    }

    #[test]
    fn missing_image_file_is_bad_image() {
        let rec = MemeRecord::new("a", ImageHandle::from_path("/nonexistent/a.png"), "x");
        assert!(matches!(validate_record(&rec), Err(ValidationError::BadImage { .. })));
    }

    #[test]
    fn zero_sized_raster_is_bad_image() {
        let rec = MemeRecord::new("a", ImageHandle::from_raster(RgbImage::new(0, 3)), "x");
        assert!(matches!(validate_record(&rec), Err(ValidationError::BadImage { .. })));
    }

    #[test]
    fn label_codes_round_trip() {
        for l in [Label::NonHateful, Label::Hateful] {
            assert_eq!(Label::from_code(l.code() as i64), Ok(l));
            let json = serde_json::to_string(&l).unwrap();
            assert_eq!(serde_json::from_str::<Label>(&json).unwrap(), l);
        }
        assert_eq!(serde_json::to_string(&Label::Hateful).unwrap(), "1");
    }

    #[test]
    fn digest_depends_on_pixels_only() {
        let mut a = RgbImage::new(3, 2);
        a.put_pixel(1, 1, image::Rgb([9, 9, 9]));
        let h1 = ImageHandle::from_raster(a.clone());
        let h2 = ImageHandle::from_encoded(&encode_png(&a).unwrap()).unwrap();
        assert_eq!(h1.digest().unwrap(), h2.digest().unwrap());
        a.put_pixel(0, 0, image::Rgb([1, 0, 0]));
        assert_ne!(h1.digest().unwrap(), ImageHandle::from_raster(a).digest().unwrap());
    }

    #[test]
    fn normalization_is_scale_invariant() {
        let v = EmbeddingVector::normalized(&[3.0, 4.0]).unwrap();
        let w = EmbeddingVector::normalized(&[30.0, 40.0]).unwrap();
        assert_eq!(v, w);
        assert!((v.norm() - 1.0).abs() < NORM_TOLERANCE);
        assert_eq!(EmbeddingVector::normalized(&[0.0, 0.0]), Err(VectorError::ZeroNorm));
        assert_eq!(EmbeddingVector::normalized(&[f32::NAN]), Err(VectorError::NonFinite));
        assert!(matches!(EmbeddingVector::from_unit(vec![0.5, 0.0]), Err(VectorError::NotUnit(_))));
    }

    fn text_sub() -> SubstitutionAction {
        SubstitutionAction::TextSub {
            generated_text: "new caption".into(),
        }
    }

    fn image_sub() -> SubstitutionAction {
        SubstitutionAction::ImageSub {
            generated_description: "a dog".into(),
            candidate_ids: vec!["c1".into(), "c2".into()],
            chosen_id: "c2".into(),
        }
    }

    fn plan(hate_type: HateType, source: Option<HateSource>, choice: MultimodalChoice, actions: Vec<SubstitutionAction>) -> MitigationPlan {
        MitigationPlan {
            meme_id: "m".into(),
            hate_type,
            source,
            choice,
            actions,
        }
    }

    #[test]
    fn routing_rules_accept_valid_plans() {
        use HateSource::*;
        use HateType::*;
        let ok = [
            plan(UnimodalHate, Some(Text), MultimodalChoice::Both, vec![text_sub()]),
            plan(UnimodalHate, Some(Image), MultimodalChoice::Both, vec![image_sub()]),
            plan(UnimodalHate, Some(Both), MultimodalChoice::Both, vec![text_sub(), image_sub()]),
            plan(MultimodalHate, None, MultimodalChoice::Both, vec![text_sub(), image_sub()]),
            plan(MultimodalHate, None, MultimodalChoice::Text, vec![text_sub()]),
            plan(MultimodalHate, None, MultimodalChoice::Image, vec![image_sub()]),
        ];
        for p in &ok {
            assert_eq!(p.check(), Ok(()), "{p:?}");
        }
        assert_eq!(ok[2].output_count(), 1);
        assert_eq!(ok[3].output_count(), 2);
    }

    #[test]
    fn chosen_image_must_be_candidate() {
        let bad = SubstitutionAction::ImageSub {
            generated_description: "d".into(),
            candidate_ids: vec!["a".into()],
            chosen_id: "z".into(),
        };
        let p = plan(HateType::UnimodalHate, Some(HateSource::Image), MultimodalChoice::Both, vec![bad]);
        assert_eq!(p.check(), Err(PlanViolation::ChosenNotCandidate("z".into())));
    }

    fn arb_action() -> impl Strategy<Value = SubstitutionAction> {
        prop_oneof![Just(text_sub()), Just(image_sub())]
    }

    fn arb_plan() -> impl Strategy<Value = MitigationPlan> {
        let ht = prop_oneof![Just(HateType::UnimodalHate), Just(HateType::MultimodalHate)];
        let src = prop_oneof![
            Just(None),
            Just(Some(HateSource::Text)),
            Just(Some(HateSource::Image)),
            Just(Some(HateSource::Both))
        ];
        let choice = prop_oneof![
            Just(MultimodalChoice::Both),
            Just(MultimodalChoice::Text),
            Just(MultimodalChoice::Image)
        ];
        (ht, src, choice, proptest::collection::vec(arb_action(), 0..4))
            .prop_map(|(h, s, c, a)| plan(h, s, c, a))
    }

    // Independent restatement of the routing table as an oracle.
    fn oracle_valid(p: &MitigationPlan) -> bool {
        let kinds: Vec<bool> = p.actions.iter().map(|a| a.is_text()).collect();
        match (p.hate_type, p.source) {
            (HateType::UnimodalHate, Some(HateSource::Text)) => kinds == [true],
            (HateType::UnimodalHate, Some(HateSource::Image)) => kinds == [false],
            (HateType::UnimodalHate, Some(HateSource::Both)) => kinds == [true, false],
            (HateType::MultimodalHate, None) => match p.choice {
                MultimodalChoice::Both => kinds == [true, false],
                MultimodalChoice::Text => kinds == [true],
                MultimodalChoice::Image => kinds == [false],
            },
            _ => false,
        }
    }

    proptest! {
        #[test]
        fn plan_predicate_matches_routing_table(p in arb_plan()) {
            prop_assert_eq!(p.check().is_ok(), oracle_valid(&p));
        }
    }
}
