//! Deterministic offline backends.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{chat_fingerprint, embed_fingerprint, BackendError, Capabilities, ChatBackend, EmbedItem, EmbeddingBackend};
use crate::model::ImageHandle;
use crate::prompt::{RenderedPrompt, TemplateName};

type Responder = Box<dyn Fn(&RenderedPrompt) -> Result<String, BackendError> + Send + Sync>;

/// Chat mock. Lookup order: canned replies by fingerprint, then the
/// responder (if any); otherwise [`BackendError::Unscripted`].
pub struct MockChatBackend {
    caps: Capabilities,
    canned: HashMap<String, String>,
    responder: Option<Responder>,
    calls: AtomicUsize,
}

impl MockChatBackend {
    fn empty() -> Self {
        MockChatBackend {
            caps: Capabilities {
                name: "mock".into(),
                supports_images: true,
                max_attachments: 16,
            },
            canned: HashMap::new(),
            responder: None,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn canned(entries: impl IntoIterator<Item = (String, String)>) -> Self {
        let mut m = Self::empty();
        m.canned.extend(entries);
        m
    }

    pub fn scripted(f: impl Fn(&RenderedPrompt) -> Result<String, BackendError> + Send + Sync + 'static) -> Self {
        let mut m = Self::empty();
        m.responder = Some(Box::new(f));
        m
    }

    /// Plausible replies in the format each template asks for, chosen by
    /// hashing `seed` with the request fingerprint.
    pub fn heuristic(seed: u64) -> Self {
        Self::scripted(move |p| heuristic_reply(p, seed))
    }

    pub fn with_canned(mut self, fingerprint: impl Into<String>, reply: impl Into<String>) -> Self {
        self.canned.insert(fingerprint.into(), reply.into());
        self
    }

    pub fn with_max_attachments(mut self, max: usize) -> Self {
        self.caps.max_attachments = max;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for MockChatBackend {
    fn capabilities(&self) -> &Capabilities {
        &self.caps
    }

    fn complete(&self, prompt: &RenderedPrompt) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let fp = chat_fingerprint(prompt)?;
        if let Some(reply) = self.canned.get(&fp) {
            return Ok(reply.clone());
        }
        match &self.responder {
            Some(f) => f(prompt),
            None => Err(BackendError::Unscripted(fp)),
        }
    }
}

fn seeded_digest(seed: u64, fingerprint: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(fingerprint.as_bytes());
    h.finalize().into()
}

const DESCRIPTIONS: [&str; 4] = [
    "A group of friends laughing together at a picnic in a sunny park.",
    "A golden retriever wearing sunglasses on a beach.",
    "A family cooking dinner together in a bright kitchen.",
    "Colorful balloons floating over a city street festival.",
];

const CAPTIONS: [&str; 4] = [
    "When the weekend finally arrives",
    "Safety measures are important worldwide",
    "Me watching my plants grow one leaf at a time",
    "Recycling is cool, pass it on",
];

pub fn heuristic_reply(prompt: &RenderedPrompt, seed: u64) -> Result<String, BackendError> {
    let d = seeded_digest(seed, &chat_fingerprint(prompt)?);
    let pick = |n: usize| d[1] as usize % n;
    Ok(match prompt.template {
        TemplateName::DetectZeroShot | TemplateName::DetectFewShot => {
            let p = d[0] as f64 / 255.0;
            let label = if p >= 0.5 { "hateful" } else { "non-hateful" };
            format!(
                "The image and caption were considered together against the definition.\nClassification: {label}\nProbability of the meme being hateful (from 0 to 1): {p:.2}"
            )
        }
        TemplateName::AnalyzeHateType => {
            let class = if d[0].is_multiple_of(3) { "multimodal-hate" } else { "unimodal-hate" };
            format!("Explanation: each part was assessed on its own first.\nClassification: {class}")
        }
        TemplateName::IdentifySource => ["hate from image", "hate from text", "hate from both"][pick(3)].to_string(),
        TemplateName::GenImageDescription => DESCRIPTIONS[pick(DESCRIPTIONS.len())].to_string(),
        TemplateName::SelectBestImage => {
            let k = prompt.final_turn().attachments.len().max(1);
            format!("I would choose image {}.", pick(k) + 1)
        }
        TemplateName::GenSubstituteText => format!("\"{}\"", CAPTIONS[pick(CAPTIONS.len())]),
    })
}

/// Hash-to-sphere embeddings: each distinct input maps to a fixed Gaussian
/// direction seeded by its fingerprint.
pub struct MockEmbeddingBackend {
    dim: usize,
    output_dim: usize,
    seed: u64,
}

impl MockEmbeddingBackend {
    pub fn new(dim: usize, seed: u64) -> Self {
        MockEmbeddingBackend {
            dim,
            output_dim: dim,
            seed,
        }
    }

    /// Make the mock emit vectors of a different length than it advertises.
    pub fn with_output_dim(mut self, n: usize) -> Self {
        self.output_dim = n;
        self
    }

    fn vector(&self, item: EmbedItem<'_>) -> Result<Vec<f32>, BackendError> {
        let rng_seed = seeded_digest(self.seed, &embed_fingerprint(item)?);
        let mut rng = ChaCha8Rng::from_seed(rng_seed);
        let raw: Vec<f64> = (0..self.output_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        Ok(raw.iter().map(|x| (x / norm) as f32).collect())
    }
}

impl EmbeddingBackend for MockEmbeddingBackend {
    fn name(&self) -> &str {
        "mock"
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MemeRecord;
    use crate::prompt::{parse_detection_response, render_detection_prompt};
    use image::RgbImage;

    #[test]
    fn heuristic_detection_reply_parses() {
        let meme = MemeRecord::new("m", ImageHandle::from_raster(RgbImage::new(3, 3)), "x");
        let p = render_detection_prompt(&meme, &[], false).unwrap();
        let mock = MockChatBackend::heuristic(1);
        let reply = mock.complete(&p).unwrap();
        assert_eq!(reply, mock.complete(&p).unwrap());
        let r = parse_detection_response(&reply).unwrap();
        assert!(!r.probability_fallback);
        assert_eq!(mock.calls(), 2);
    }

    #[test]
    fn unscripted_mock_errors() {
        let meme = MemeRecord::new("m", ImageHandle::from_raster(RgbImage::new(3, 3)), "x");
        let p = render_detection_prompt(&meme, &[], false).unwrap();
        assert!(matches!(MockChatBackend::canned([]).complete(&p), Err(BackendError::Unscripted(_))));
    }
}
