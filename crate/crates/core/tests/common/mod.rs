//! Fixture corpora shared by the integration targets.
#![allow(dead_code)]

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{Rgb, RgbImage};
use serde_json::json;
use unhate::backend::mock::MockChatBackend;
use unhate::compositor::{render_caption, Placement};
use unhate::model::Label;
use unhate::prompt::{RenderedPrompt, TemplateName};

pub fn meme_image(i: usize, w: u32, h: u32, caption: &str) -> RgbImage {
    let base = Rgb([(i * 37 % 200) as u8 + 20, (i * 91 % 180) as u8 + 40, (i * 13 % 150) as u8 + 60]);
    let mut img = RgbImage::from_fn(w, h, |x, y| {
        let shade = ((x / 16 + y / 16) % 2) as u8 * 18;
        Rgb([base[0].saturating_add(shade), base[1], base[2].saturating_sub(shade)])
    });
    if !caption.is_empty() {
        img = render_caption(&img, caption, Placement::Bottom).expect("fixture caption fits");
    }
    img
}

pub struct MemeSpec {
    pub id: String,
    pub text: String,
    pub label: Option<Label>,
}

/// Write `<dir>/img/<id>.png` for each meme plus `<dir>/<name>.jsonl`.
pub fn write_corpus(dir: &Path, name: &str, memes: &[MemeSpec], size: (u32, u32)) -> PathBuf {
    std::fs::create_dir_all(dir.join("img")).unwrap();
    let mut lines = String::new();
    for (i, m) in memes.iter().enumerate() {
        let img = meme_image(i, size.0, size.1, &m.text);
        img.save(dir.join("img").join(format!("{}.png", m.id))).unwrap();
        let mut line = json!({ "id": m.id, "img": format!("img/{}.png", m.id), "text": m.text });
        if let Some(l) = m.label {
            line["label"] = json!(l.code());
        }
        lines.push_str(&line.to_string());
        lines.push('\n');
    }
    let path = dir.join(format!("{name}.jsonl"));
    std::fs::write(&path, lines).unwrap();
    path
}

/// `n` memes alternating hateful / non-hateful.
pub fn labeled(prefix: &str, n: usize) -> Vec<MemeSpec> {
    (0..n)
        .map(|i| MemeSpec {
            id: format!("{prefix}{i:03}"),
            text: format!("{prefix} caption {i}"),
            label: Some(if i % 2 == 0 { Label::Hateful } else { Label::NonHateful }),
        })
        .collect()
}

/// Unlabeled substitute pool images without captions.
pub fn substitutes(n: usize) -> Vec<MemeSpec> {
    (0..n)
        .map(|i| MemeSpec {
            id: format!("sub{i:02}"),
            text: String::new(),
            label: None,
        })
        .collect()
}

/// Route prefixes of fixture meme ids.
pub const ROUTES: [&str; 4] = ["rt-text", "rt-image", "rt-both", "rt-multi"];

/// Hateful memes whose id names their route.
pub fn routed(counts: [usize; 4]) -> Vec<MemeSpec> {
    let mut out = Vec::new();
    for (route, n) in ROUTES.iter().zip(counts) {
        for i in 0..n {
            out.push(MemeSpec {
                id: format!("{route}-{i:03}"),
                text: format!("{route} {i}"),
                label: Some(Label::Hateful),
            });
        }
    }
    out
}

/// Route index per meme image digest, read from the id prefix.
pub fn route_table(records: &[unhate::model::MemeRecord]) -> HashMap<[u8; 32], usize> {
    records
        .iter()
        .filter_map(|r| {
            let route = ROUTES.iter().position(|p| r.id.starts_with(p))?;
            Some((r.image.digest().unwrap(), route))
        })
        .collect()
}

/// Chat backend that routes each meme by its image, since mitigation prompts
/// carry no text.
pub fn routing_chat(routes: HashMap<[u8; 32], usize>) -> Arc<MockChatBackend> {
    Arc::new(MockChatBackend::scripted(move |p: &RenderedPrompt| {
        let route = p.images().find_map(|h| routes.get(&h.digest().ok()?).copied());
        Ok(match p.template {
            TemplateName::AnalyzeHateType => {
                let class = if route == Some(3) { "multimodal-hate" } else { "unimodal-hate" };
                format!("Explanation: fixture.\nClassification: {class}")
            }
            TemplateName::IdentifySource => match route {
                Some(0) => "hate from text",
                Some(1) => "hate from image",
                _ => "hate from both",
            }
            .to_string(),
            TemplateName::GenSubstituteText => "\"Kind words\"".to_string(),
            TemplateName::GenImageDescription => "A calm lake at dawn.".to_string(),
            TemplateName::SelectBestImage => "Image 1".to_string(),
            TemplateName::DetectZeroShot | TemplateName::DetectFewShot => {
                "Classification: hateful\nProbability of the meme being hateful (from 0 to 1): 0.80".to_string()
            }
        })
    }))
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_unhate")
}

pub const GOLDEN_NAMES: [&str; 8] = [
    "detect_zero_shot",
    "detect_zero_shot_ocr",
    "detect_few_shot",
    "analyze_hate_type",
    "identify_source",
    "gen_image_description",
    "gen_substitute_text",
    "select_best_image",
];

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn solid(c: u8) -> unhate::model::ImageHandle {
    unhate::model::ImageHandle::from_raster(RgbImage::from_pixel(6, 4, Rgb([c, c, c])))
}

/// Rendered prompt for each golden name, plus the images it attaches.
pub fn render_golden(name: &str) -> RenderedPrompt {
    use unhate::model::MemeRecord;
    use unhate::prompt::{render_detection_prompt, render_mitigation_prompt, Demonstration, MitigationPrompt};
    let test = MemeRecord::new("test", solid(0), "when the golden file matches").with_ocr("WHEN THE GOLDEN FILE MATCHES");
    let demos: Vec<Demonstration> = (1..=4)
        .map(|i| Demonstration {
            meme: MemeRecord::new(format!("demo{i}"), solid(i * 10), "x"),
            label: if i % 2 == 1 { Label::Hateful } else { Label::NonHateful },
        })
        .collect();
    let candidates: Vec<_> = (1..=4).map(|i| solid(100 + i)).collect();
    match name {
        "detect_zero_shot" => render_detection_prompt(&test, &[], false),
        "detect_zero_shot_ocr" => render_detection_prompt(&test, &[], true),
        "detect_few_shot" => render_detection_prompt(&test, &demos, false),
        "analyze_hate_type" => render_mitigation_prompt(MitigationPrompt::AnalyzeHateType, &test),
        "identify_source" => render_mitigation_prompt(MitigationPrompt::IdentifySource, &test),
        "gen_image_description" => render_mitigation_prompt(MitigationPrompt::GenImageDescription, &test),
        "gen_substitute_text" => render_mitigation_prompt(MitigationPrompt::GenSubstituteText, &test),
        "select_best_image" => render_mitigation_prompt(
            MitigationPrompt::SelectBestImage {
                description: "A golden retriever flying a kite on a beach.",
                candidates: &candidates,
            },
            &test,
        ),
        other => panic!("no golden case {other}"),
    }
    .unwrap()
}

/// Expected attachment order, as gray levels of the solid fixture images.
pub fn golden_image_order(name: &str) -> Vec<u8> {
    match name {
        "detect_few_shot" => vec![10, 20, 30, 40, 0],
        "select_best_image" => vec![0, 101, 102, 103, 104],
        _ => vec![0],
    }
}

/// Compare one golden; `Err` carries the first differing line.
pub fn check_golden(name: &str) -> Result<(), String> {
    let prompt = render_golden(name);
    let expected = std::fs::read_to_string(golden_dir().join(format!("{name}.txt"))).map_err(|e| e.to_string())?;
    let expected = expected.strip_suffix('\n').unwrap_or(&expected);
    let got = prompt.transcript();
    if got != expected {
        let (i, (g, e)) = got
            .lines()
            .zip(expected.lines())
            .enumerate()
            .find(|(_, (g, e))| g != e)
            .unwrap_or((got.lines().count().min(expected.lines().count()), ("<end>", "<end>")));
        return Err(format!("{name}: line {} differs\n  got:      {g}\n  expected: {e}", i + 1));
    }
    let order: Vec<u8> = prompt.images().map(|h| h.raster().unwrap().get_pixel(0, 0)[0]).collect();
    if order != golden_image_order(name) {
        return Err(format!("{name}: attachments in order {order:?}"));
    }
    Ok(())
}
