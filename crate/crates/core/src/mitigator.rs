//! Hateful meme mitigation: classify the hate, locate its source, generate
//! substitutes for the offending modality and compose the new memes.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, EmbedItem, Gateway};
use crate::compositor::{ComposeError, Composition, Compositor};
use crate::index::{EmbeddingIndex, IndexError};
use crate::model::{
    HateSource, HateType, ImageHandle, ImageLoadError, MemeRecord, MitigatedMeme, MitigationPlan, MultimodalChoice,
    PlanViolation, Split, SubstitutionAction, Variant,
};
use crate::prompt::{
    parse_hate_type_response, parse_selection_response, parse_source_response, render_mitigation_prompt,
    MitigationPrompt, ParseError, PromptError,
};

pub const DEFAULT_K: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    HateType,
    Source,
    SubstituteText,
    SubstituteImage,
    Compose,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::HateType => "hate-type",
            Stage::Source => "source",
            Stage::SubstituteText => "substitute-text",
            Stage::SubstituteImage => "substitute-image",
            Stage::Compose => "compose",
        })
    }
}

#[derive(Debug, Error)]
pub enum MitigateFailure {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Compose(#[from] ComposeError),
    #[error(transparent)]
    Image(#[from] ImageLoadError),
    #[error(transparent)]
    Plan(#[from] PlanViolation),
    #[error("backend returned an empty generation")]
    EmptyGeneration,
    #[error("substitute `{0}` is indexed but has no image")]
    UnknownSubstitute(String),
}

#[derive(Debug, Error)]
#[error("meme {meme_id} at {stage}: {kind}")]
pub struct MitigateError {
    pub meme_id: String,
    pub stage: Stage,
    pub kind: MitigateFailure,
}

impl MitigateError {
    pub fn is_refusal(&self) -> bool {
        matches!(self.kind, MitigateFailure::Backend(BackendError::ProviderRefusal(_)))
    }
}

/// Curated non-hateful images searched for image substitutes.
pub struct SubstituteCollection {
    index: EmbeddingIndex,
    images: HashMap<String, ImageHandle>,
}

impl SubstituteCollection {
    pub fn new(index: EmbeddingIndex, images: HashMap<String, ImageHandle>) -> Result<Self, MitigateFailure> {
        if let Some(missing) = index.entries().iter().find(|e| !images.contains_key(&e.id)) {
            return Err(MitigateFailure::UnknownSubstitute(missing.id.clone()));
        }
        Ok(SubstituteCollection { index, images })
    }

    pub fn from_records(index: EmbeddingIndex, records: impl IntoIterator<Item = MemeRecord>) -> Result<Self, MitigateFailure> {
        Self::new(index, records.into_iter().map(|r| (r.id, r.image)).collect())
    }

    pub fn index(&self) -> &EmbeddingIndex {
        &self.index
    }

    pub fn image(&self, id: &str) -> Option<&ImageHandle> {
        self.images.get(id)
    }
}

/// Trim whitespace and any matching quote pairs around a generation.
pub fn clean_generation(raw: &str) -> Result<String, MitigateFailure> {
    let mut s = raw.trim();
    loop {
        let stripped = [('"', '"'), ('\'', '\''), ('“', '”'), ('‘', '’')]
            .iter()
            .find_map(|&(open, close)| s.strip_prefix(open).and_then(|r| r.strip_suffix(close)));
        match stripped {
            Some(inner) => s = inner.trim(),
            None => break,
        }
    }
    if s.is_empty() {
        Err(MitigateFailure::EmptyGeneration)
    } else {
        Ok(s.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct Mitigation {
    pub plan: MitigationPlan,
    pub outputs: Vec<MitigatedMeme>,
}

pub struct Mitigator {
    gateway: Arc<Gateway>,
    substitutes: Arc<SubstituteCollection>,
    compositor: Compositor,
    k: usize,
}

impl Mitigator {
    pub fn new(gateway: Arc<Gateway>, substitutes: Arc<SubstituteCollection>, compositor: Compositor, k: usize) -> Self {
        Mitigator {
            gateway,
            substitutes,
            compositor,
            k: k.max(1),
        }
    }

    fn ask(&self, kind: MitigationPrompt<'_>, meme: &MemeRecord) -> Result<String, MitigateFailure> {
        let prompt = render_mitigation_prompt(kind, meme)?;
        Ok(self.gateway.invoke_chat(&prompt)?)
    }

    pub fn analyze_hate_type(&self, meme: &MemeRecord) -> Result<HateType, MitigateFailure> {
        Ok(parse_hate_type_response(&self.ask(MitigationPrompt::AnalyzeHateType, meme)?)?)
    }

    pub fn identify_source(&self, meme: &MemeRecord) -> Result<HateSource, MitigateFailure> {
        Ok(parse_source_response(&self.ask(MitigationPrompt::IdentifySource, meme)?)?)
    }

    pub fn generate_text(&self, meme: &MemeRecord) -> Result<String, MitigateFailure> {
        clean_generation(&self.ask(MitigationPrompt::GenSubstituteText, meme)?)
    }

    /// Describe an ideal substitute, retrieve the `k` nearest collection
    /// images by text embedding, then let the backend pick one.
    pub fn generate_image(&self, meme: &MemeRecord) -> Result<SubstitutionAction, MitigateFailure> {
        let description = clean_generation(&self.ask(MitigationPrompt::GenImageDescription, meme)?)?;
        let query = self.gateway.embed(EmbedItem::Text(&description))?;
        let hits = self.substitutes.index.top_k(&query, self.k)?;
        let candidates = hits
            .iter()
            .map(|h| {
                self.substitutes
                    .image(&h.id)
                    .cloned()
                    .ok_or_else(|| MitigateFailure::UnknownSubstitute(h.id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let reply = self.ask(
            MitigationPrompt::SelectBestImage {
                description: &description,
                candidates: &candidates,
            },
            meme,
        )?;
        let selection = parse_selection_response(&reply, candidates.len());
        let candidate_ids: Vec<String> = hits.into_iter().map(|h| h.id).collect();
        Ok(SubstitutionAction::ImageSub {
            generated_description: description,
            chosen_id: candidate_ids[selection.index].clone(),
            candidate_ids,
        })
    }

    /// Route one meme and generate its substitutes; text comes before image.
    pub fn plan(&self, meme: &MemeRecord, choice: MultimodalChoice) -> Result<MitigationPlan, MitigateError> {
        let at = |stage| {
            move |kind| MitigateError {
                meme_id: meme.id.clone(),
                stage,
                kind,
            }
        };
        let hate_type = self.analyze_hate_type(meme).map_err(at(Stage::HateType))?;
        let source = match hate_type {
            HateType::UnimodalHate => Some(self.identify_source(meme).map_err(at(Stage::Source))?),
            HateType::MultimodalHate => None,
        };
        let (want_text, want_image) = match (source, choice) {
            (Some(HateSource::Text), _) => (true, false),
            (Some(HateSource::Image), _) => (false, true),
            (Some(HateSource::Both), _) | (None, MultimodalChoice::Both) => (true, true),
            (None, MultimodalChoice::Text) => (true, false),
            (None, MultimodalChoice::Image) => (false, true),
        };
        let mut actions = Vec::new();
        if want_text {
            let generated_text = self.generate_text(meme).map_err(at(Stage::SubstituteText))?;
            actions.push(SubstitutionAction::TextSub { generated_text });
        }
        if want_image {
            actions.push(self.generate_image(meme).map_err(at(Stage::SubstituteImage))?);
        }
        let plan = MitigationPlan {
            meme_id: meme.id.clone(),
            hate_type,
            source,
            choice,
            actions,
        };
        plan.check().map_err(|e| at(Stage::Compose)(e.into()))?;
        Ok(plan)
    }

    fn substitute_raster(&self, id: &str) -> Result<Arc<image::RgbImage>, MitigateFailure> {
        let handle = self.substitutes.image(id).ok_or_else(|| MitigateFailure::UnknownSubstitute(id.to_string()))?;
        Ok(handle.raster()?)
    }

    /// Render the memes a checked plan calls for.
    pub fn compose(&self, meme: &MemeRecord, plan: &MitigationPlan) -> Result<Vec<MitigatedMeme>, MitigateFailure> {
        let original = meme.image.raster()?;
        let text = plan.actions.iter().find_map(|a| match a {
            SubstitutionAction::TextSub { generated_text } => Some(generated_text.as_str()),
            _ => None,
        });
        let image = plan.actions.iter().find_map(|a| match a {
            SubstitutionAction::ImageSub { chosen_id, .. } => Some(chosen_id.as_str()),
            _ => None,
        });
        let mut jobs: Vec<(Variant, Option<&str>, Option<&str>)> = Vec::new();
        match (plan.hate_type, text, image) {
            (HateType::UnimodalHate, Some(t), Some(i)) => jobs.push((Variant::BothSubstituted, Some(t), Some(i))),
            (_, t, i) => {
                if let Some(t) = t {
                    jobs.push((Variant::TextSubstituted, Some(t), None));
                }
                if let Some(i) = i {
                    jobs.push((Variant::ImageSubstituted, None, Some(i)));
                }
            }
        }
        let mut outputs = Vec::with_capacity(jobs.len());
        for (variant, new_text, new_image) in jobs {
            let substitute = new_image.map(|id| self.substitute_raster(id)).transpose()?;
            let comp = match (new_text, substitute.as_deref()) {
                (Some(text), None) => Composition::TextSub { text },
                (None, Some(substitute)) => Composition::ImageSub { substitute },
                (Some(text), Some(substitute)) => Composition::BothSub { text, substitute },
                (None, None) => unreachable!("every job carries a substitute"),
            };
            let raster = self.compositor.compose(&original, &meme.text, None, comp)?;
            outputs.push(MitigatedMeme {
                source_meme_id: meme.id.clone(),
                variant,
                new_text: new_text.map(str::to_string),
                new_image_id: new_image.map(str::to_string),
                composed_image: ImageHandle::from_raster(raster),
            });
        }
        Ok(outputs)
    }

    pub fn mitigate(&self, meme: &MemeRecord, choice: MultimodalChoice) -> Result<Mitigation, MitigateError> {
        let plan = self.plan(meme, choice)?;
        let outputs = self.compose(meme, &plan).map_err(|kind| MitigateError {
            meme_id: meme.id.clone(),
            stage: Stage::Compose,
            kind,
        })?;
        Ok(Mitigation { plan, outputs })
    }

    /// Mitigate a corpus concurrently; plans and outputs come back sorted by id.
    pub fn run(&self, memes: &[MemeRecord], choice: MultimodalChoice) -> MitigationRun {
        let outcomes: Vec<_> = memes.par_iter().map(|m| (m, self.mitigate(m, choice))).collect();
        let mut run = MitigationRun {
            choice,
            ..Default::default()
        };
        for (meme, outcome) in outcomes {
            match outcome {
                Ok(m) => {
                    run.counters.record(m.plan.split());
                    run.plans.push(m.plan);
                    run.outputs.extend(m.outputs);
                }
                Err(e) => {
                    tracing::warn!("{e}");
                    run.failures.push(MitigationFailure {
                        id: meme.id.clone(),
                        stage: e.stage,
                        refusal: e.is_refusal(),
                        error: e.kind.to_string(),
                    });
                }
            }
        }
        run.plans.sort_by(|a, b| a.meme_id.cmp(&b.meme_id));
        run.outputs.sort_by_key(|o| o.variant_id());
        run.failures.sort_by(|a, b| a.id.cmp(&b.id));
        run
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounters {
    pub unimodal_text: usize,
    pub unimodal_image: usize,
    pub unimodal_both: usize,
    pub multimodal: usize,
}

impl SplitCounters {
    pub fn record(&mut self, split: Split) {
        match split {
            Split::UnimodalText => self.unimodal_text += 1,
            Split::UnimodalImage => self.unimodal_image += 1,
            Split::UnimodalBoth => self.unimodal_both += 1,
            Split::Multimodal => self.multimodal += 1,
        }
    }

    /// Outputs a run must produce: one per unimodal meme, one per chosen
    /// substitution for each multimodal meme.
    pub fn expected_outputs(&self, choice: MultimodalChoice) -> usize {
        let per_multimodal = if choice == MultimodalChoice::Both { 2 } else { 1 };
        self.unimodal_text + self.unimodal_image + self.unimodal_both + per_multimodal * self.multimodal
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MitigationFailure {
    pub id: String,
    pub stage: Stage,
    pub refusal: bool,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct MitigationRun {
    pub choice: MultimodalChoice,
    pub plans: Vec<MitigationPlan>,
    pub outputs: Vec<MitigatedMeme>,
    pub failures: Vec<MitigationFailure>,
    pub counters: SplitCounters,
}

/// One line of `outputs.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputLine {
    pub variant_id: String,
    pub source_meme_id: String,
    pub variant: Variant,
    pub split: Split,
    pub new_text: Option<String>,
    pub new_image_id: Option<String>,
    pub image: String,
}

fn safe_stem(id: &str) -> std::io::Result<&str> {
    if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            format!("id `{id}` cannot be used as a file name"),
        ));
    }
    Ok(id)
}

impl MitigationRun {
    pub fn identity_holds(&self) -> bool {
        self.outputs.len() == self.counters.expected_outputs(self.choice)
    }

    pub fn output_lines(&self) -> Vec<OutputLine> {
        let splits: HashMap<&str, Split> = self.plans.iter().map(|p| (p.meme_id.as_str(), p.split())).collect();
        self.outputs
            .iter()
            .map(|o| OutputLine {
                variant_id: o.variant_id(),
                source_meme_id: o.source_meme_id.clone(),
                variant: o.variant,
                split: splits[o.source_meme_id.as_str()],
                new_text: o.new_text.clone(),
                new_image_id: o.new_image_id.clone(),
                image: format!("{}.png", o.variant_id()),
            })
            .collect()
    }

    /// Write `plans.jsonl`, `outputs.jsonl`, `failures.jsonl` and one
    /// `<meme_id>.<variant>.png` per output into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let jsonl = |name: &str, lines: Vec<serde_json::Value>| -> std::io::Result<()> {
            let mut out = BufWriter::new(File::create(dir.join(name))?);
            for line in lines {
                serde_json::to_writer(&mut out, &line)?;
                out.write_all(b"\n")?;
            }
            out.flush()
        };
        jsonl("plans.jsonl", self.plans.iter().map(|p| serde_json::json!(p)).collect())?;
        jsonl("outputs.jsonl", self.output_lines().iter().map(|l| serde_json::json!(l)).collect())?;
        jsonl("failures.jsonl", self.failures.iter().map(|f| serde_json::json!(f)).collect())?;
        for o in &self.outputs {
            safe_stem(&o.source_meme_id)?;
            let png = o
                .composed_image
                .to_png()
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.reason))?;
            std::fs::write(dir.join(format!("{}.png", o.variant_id())), png)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::{MockChatBackend, MockEmbeddingBackend};
    use crate::backend::EmbeddingBackend;
    use crate::prompt::{RenderedPrompt, TemplateName};
    use image::{Rgb, RgbImage};

    fn meme(id: &str) -> MemeRecord {
        MemeRecord::new(id, ImageHandle::from_raster(RgbImage::from_pixel(240, 180, Rgb([30, 60, 90]))), "original words")
    }

    fn collection(n: usize, embedder: &MockEmbeddingBackend) -> Arc<SubstituteCollection> {
        let mut index = EmbeddingIndex::new(embedder.dim());
        let mut images = HashMap::new();
        for i in 0..n {
            let img = ImageHandle::from_raster(RgbImage::from_pixel(200, 220, Rgb([i as u8 * 20, 200, 10])));
            index.insert_raw(format!("s{i}"), &embedder.embed_image(&img).unwrap(), None).unwrap();
            images.insert(format!("s{i}"), img);
        }
        Arc::new(SubstituteCollection::new(index, images).unwrap())
    }

    /// Chat mock answering each template from a fixed table.
    fn scripted(hate: &'static str, source: &'static str, select: &'static str) -> MockChatBackend {
        MockChatBackend::scripted(move |p: &RenderedPrompt| {
            Ok(match p.template {
                TemplateName::AnalyzeHateType => format!("Explanation: x\nClassification: {hate}"),
                TemplateName::IdentifySource => source.to_string(),
                TemplateName::GenSubstituteText => "  \"Safety measures are important worldwide\" ".to_string(),
                TemplateName::GenImageDescription => "A sunny beach with a kite.".to_string(),
                TemplateName::SelectBestImage => select.to_string(),
                _ => unreachable!(),
            })
        })
    }

    fn mitigator(chat: MockChatBackend, n_subs: usize, k: usize) -> Mitigator {
        let embedder = MockEmbeddingBackend::new(16, 9);
        let subs = collection(n_subs, &embedder);
        let gateway = Arc::new(Gateway::new(Arc::new(chat), Arc::new(embedder)));
        Mitigator::new(gateway, subs, Compositor::default(), k)
    }

    #[test]
    fn generation_cleanup() {
        assert_eq!(
            clean_generation("\"Safety measures are important worldwide\"").unwrap(),
            "Safety measures are important worldwide"
        );
        assert_eq!(clean_generation("  padded \n").unwrap(), "padded");
        assert_eq!(clean_generation("“curly”").unwrap(), "curly");
        assert!(matches!(clean_generation(""), Err(MitigateFailure::EmptyGeneration)));
        assert!(matches!(clean_generation("\"\""), Err(MitigateFailure::EmptyGeneration)));
    }

    #[test]
    fn image_substitution_picks_among_candidates() {
        let m = mitigator(scripted("unimodal-hate", "hate from image", "image 1"), 6, 4);
        let SubstitutionAction::ImageSub { candidate_ids, chosen_id, .. } = m.generate_image(&meme("1")).unwrap() else {
            panic!()
        };
        assert_eq!(candidate_ids.len(), 4);
        assert_eq!(chosen_id, candidate_ids[0]);
    }

    #[test]
    fn small_collection_yields_fewer_candidates() {
        let m = mitigator(scripted("unimodal-hate", "hate from image", "the second one"), 2, 4);
        let SubstitutionAction::ImageSub { candidate_ids, chosen_id, .. } = m.generate_image(&meme("1")).unwrap() else {
            panic!()
        };
        assert_eq!(candidate_ids.len(), 2);
        assert_eq!(chosen_id, candidate_ids[1]);
    }

    #[test]
    fn unimodal_routes() {
        for (source, variant, text, image) in [
            ("hate from text", Variant::TextSubstituted, true, false),
            ("hate from image", Variant::ImageSubstituted, false, true),
            ("hate from both", Variant::BothSubstituted, true, true),
        ] {
            let m = mitigator(scripted("unimodal-hate", source, "image 2"), 5, 4);
            let out = m.mitigate(&meme("7"), MultimodalChoice::Both).unwrap();
            assert_eq!(out.outputs.len(), 1, "{source}");
            let o = &out.outputs[0];
            assert_eq!(o.variant, variant);
            assert_eq!(o.new_text.is_some(), text);
            assert_eq!(o.new_image_id.is_some(), image);
            assert!(o.is_consistent());
        }
    }

    #[test]
    fn multimodal_choice_controls_output_count() {
        for (choice, n) in [(MultimodalChoice::Both, 2), (MultimodalChoice::Text, 1), (MultimodalChoice::Image, 1)] {
            let m = mitigator(scripted("multimodal-hate", "unused", "image 1"), 5, 4);
            let out = m.mitigate(&meme("9"), choice).unwrap();
            assert_eq!(out.outputs.len(), n);
            assert_eq!(out.plan.source, None);
        }
    }

    #[test]
    fn text_substitution_keeps_dimensions_and_image_substitution_keeps_text() {
        let m = mitigator(scripted("multimodal-hate", "", "image 1"), 3, 4);
        let out = m.mitigate(&meme("9"), MultimodalChoice::Both).unwrap();
        let text_sub = out.outputs.iter().find(|o| o.variant == Variant::TextSubstituted).unwrap();
        assert_eq!(text_sub.composed_image.raster().unwrap().dimensions(), (240, 180));
        assert_eq!(text_sub.new_text.as_deref(), Some("Safety measures are important worldwide"));
        let image_sub = out.outputs.iter().find(|o| o.variant == Variant::ImageSubstituted).unwrap();
        assert_eq!(image_sub.new_text, None);
        assert_eq!(image_sub.composed_image.raster().unwrap().dimensions(), (200, 220));
    }

    #[test]
    fn refusal_becomes_a_tagged_failure() {
        let chat = MockChatBackend::scripted(|p| match p.template {
            TemplateName::AnalyzeHateType => Err(BackendError::ProviderRefusal("no".into())),
            _ => unreachable!(),
        });
        let m = mitigator(chat, 2, 4);
        let run = m.run(&[meme("a"), meme("b")], MultimodalChoice::Both);
        assert_eq!(run.failures.len(), 2);
        assert!(run.failures.iter().all(|f| f.refusal && f.stage == Stage::HateType));
        assert!(run.identity_holds());
    }

    #[test]
    fn empty_collection_is_an_index_error() {
        let m = mitigator(scripted("unimodal-hate", "hate from image", "1"), 0, 4);
        let err = m.mitigate(&meme("x"), MultimodalChoice::Both).unwrap_err();
        assert_eq!(err.stage, Stage::SubstituteImage);
        assert!(matches!(err.kind, MitigateFailure::Index(IndexError::EmptyIndex)));
    }

    #[test]
    fn run_artifacts_are_written() {
        let m = mitigator(scripted("multimodal-hate", "", "image 1"), 3, 2);
        let run = m.run(&[meme("b"), meme("a")], MultimodalChoice::Both);
        assert!(run.identity_holds());
        let dir = tempfile::tempdir().unwrap();
        run.write(dir.path()).unwrap();
        let outputs = std::fs::read_to_string(dir.path().join("outputs.jsonl")).unwrap();
        let ids: Vec<String> = outputs
            .lines()
            .map(|l| serde_json::from_str::<OutputLine>(l).unwrap().variant_id)
            .collect();
        assert_eq!(ids, ["a.image", "a.text", "b.image", "b.text"]);
        assert!(dir.path().join("a.text.png").is_file());
        assert_eq!(std::fs::read_to_string(dir.path().join("plans.jsonl")).unwrap().lines().count(), 2);
    }
}
