//! Meme raster assembly: find burned-in caption lines, erase them, draw new
//! captions and paste substitute images.

pub mod caption;
pub mod eraser;

use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use caption::{layout_caption, render_caption, CaptionError, CaptionLayout, Placement, FONT_SHA256};
pub use eraser::{BaselineEraser, EraseError, EraserBackend, RemoteEraser};

use crate::model::ImageLoadError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextRegion {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    /// Row-major `w * h` coverage inside the box; absent means the whole box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<bool>>,
}

impl TextRegion {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        TextRegion { x, y, w, h, mask: None }
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        let mask_ok = self.mask.as_ref().is_none_or(|m| m.len() as u64 == self.area());
        self.w > 0
            && self.h > 0
            && self.x as u64 + self.w as u64 <= width as u64
            && self.y as u64 + self.h as u64 <= height as u64
            && mask_ok
    }

    /// Whether box-relative pixel `(dx, dy)` is part of the region.
    pub fn covers(&self, dx: u32, dy: u32) -> bool {
        dx < self.w
            && dy < self.h
            && self.mask.as_ref().is_none_or(|m| m.get((dy * self.w + dx) as usize).copied().unwrap_or(false))
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && y >= self.y && self.covers(x - self.x, y - self.y)
    }

    /// Intersect with the image; `None` when nothing remains. The mask is cropped along.
    pub fn clamp(&self, width: u32, height: u32) -> Option<TextRegion> {
        let x1 = (self.x as u64 + self.w as u64).min(width as u64) as u32;
        let y1 = (self.y as u64 + self.h as u64).min(height as u64) as u32;
        if self.x >= x1 || self.y >= y1 {
            return None;
        }
        let (w, h) = (x1 - self.x, y1 - self.y);
        let mask = match &self.mask {
            Some(m) if m.len() as u64 == self.area() => Some(
                (0..h)
                    .flat_map(|dy| (0..w).map(move |dx| (dx, dy)))
                    .map(|(dx, dy)| m[(dy * self.w + dx) as usize])
                    .collect(),
            ),
            // a malformed mask is dropped in favor of the full box
            _ => None,
        };
        Some(TextRegion { x: self.x, y: self.y, w, h, mask })
    }
}

/// Intersection over union of two boxes (masks ignored).
pub fn iou(a: &TextRegion, b: &TextRegion) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w).saturating_sub(a.x.max(b.x)) as u64;
    let iy = (a.y + a.h).min(b.y + b.h).saturating_sub(a.y.max(b.y)) as u64;
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Minimum luminance jump between neighbors that counts as a glyph edge.
const EDGE_JUMP: i32 = 96;
const NEAR_BLACK: i32 = 55;
const NEAR_WHITE: i32 = 200;
/// Edges a row needs before it is considered part of a text line.
const MIN_ROW_EDGES: usize = 4;
/// Text rows separated by at most this many quiet rows share a line box.
const MAX_ROW_GAP: u32 = 2;
const MIN_LINE_ROWS: u32 = 3;
/// Widest dark outline ring the box may grow through on each side.
const MAX_OUTLINE_GROW: u32 = 6;

fn luma(p: &image::Rgb<u8>) -> i32 {
    (299 * p[0] as i32 + 587 * p[1] as i32 + 114 * p[2] as i32) / 1000
}

/// Columns in row `y` where a near-white or near-black pixel meets a
/// sharply different neighbor.
fn row_edges(image: &RgbImage, y: u32) -> Vec<u32> {
    let mut edges = Vec::new();
    let mut prev = luma(image.get_pixel(0, y));
    for x in 1..image.width() {
        let cur = luma(image.get_pixel(x, y));
        let extreme = prev.max(cur) >= NEAR_WHITE || prev.min(cur) <= NEAR_BLACK;
        if (cur - prev).abs() >= EDGE_JUMP && extreme {
            edges.push(x);
        }
        prev = cur;
    }
    edges
}

fn heuristic_regions(image: &RgbImage) -> Vec<TextRegion> {
    struct Band {
        y0: u32,
        y1: u32,
        x0: u32,
        x1: u32,
    }
    let mut bands: Vec<Band> = Vec::new();
    if image.width() < 2 {
        return Vec::new();
    }
    for y in 0..image.height() {
        let edges = row_edges(image, y);
        if edges.len() < MIN_ROW_EDGES {
            continue;
        }
        let (lo, hi) = (edges[0], *edges.last().unwrap());
        match bands.last_mut() {
            Some(b) if y - b.y1 <= MAX_ROW_GAP + 1 => {
                b.y1 = y;
                b.x0 = b.x0.min(lo);
                b.x1 = b.x1.max(hi);
            }
            _ => bands.push(Band { y0: y, y1: y, x0: lo, x1: hi }),
        }
    }
    bands
        .into_iter()
        .filter(|b| b.y1 - b.y0 + 1 >= MIN_LINE_ROWS && b.x1 > b.x0)
        // the first edge is the first ink column; the last edge is one past the last
        .map(|b| grow_outline(image, TextRegion::new(b.x0, b.y0, b.x1 - b.x0, b.y1 - b.y0 + 1)))
        .collect()
}

fn inky(l: i32) -> bool {
    l <= NEAR_BLACK || l >= NEAR_WHITE
}

/// Outline pixels next to the glyph fill are often too close to the
/// background to register as edges. Extend each side while the line just
/// outside holds a near-black pixel whose inner neighbor is ink.
fn grow_outline(image: &RgbImage, mut r: TextRegion) -> TextRegion {
    let l = |x: u32, y: u32| luma(image.get_pixel(x, y));
    let (w, h) = image.dimensions();
    for _ in 0..MAX_OUTLINE_GROW {
        let mut grew = false;
        if r.y > 0 && (r.x..r.x + r.w).any(|x| l(x, r.y - 1) <= NEAR_BLACK && inky(l(x, r.y))) {
            r.y -= 1;
            r.h += 1;
            grew = true;
        }
        let below = r.y + r.h;
        if below < h && (r.x..r.x + r.w).any(|x| l(x, below) <= NEAR_BLACK && inky(l(x, below - 1))) {
            r.h += 1;
            grew = true;
        }
        if r.x > 0 && (r.y..r.y + r.h).any(|y| l(r.x - 1, y) <= NEAR_BLACK && inky(l(r.x, y))) {
            r.x -= 1;
            r.w += 1;
            grew = true;
        }
        let right = r.x + r.w;
        if right < w && (r.y..r.y + r.h).any(|y| l(right, y) <= NEAR_BLACK && inky(l(right - 1, y))) {
            r.w += 1;
            grew = true;
        }
        if !grew {
            break;
        }
    }
    r
}

/// Caption line boxes: the hint (clamped to the image) when given, else a
/// high-contrast row scan. Never fails; may return nothing.
pub fn detect_text_regions(image: &RgbImage, ocr_hint: Option<&[TextRegion]>) -> Vec<TextRegion> {
    match ocr_hint {
        Some(hint) => hint.iter().filter_map(|r| r.clamp(image.width(), image.height())).collect(),
        None => heuristic_regions(image),
    }
}

#[derive(Debug, Error)]
pub enum ComposeError {
    #[error(transparent)]
    Erase(#[from] EraseError),
    #[error(transparent)]
    Caption(#[from] CaptionError),
    #[error(transparent)]
    Image(#[from] ImageLoadError),
}

#[derive(Debug, Clone, Copy)]
pub enum Composition<'a> {
    /// Original image, its text erased, new caption drawn.
    TextSub { text: &'a str },
    /// Substitute image carrying the original caption.
    ImageSub { substitute: &'a RgbImage },
    /// Substitute image carrying the new caption.
    BothSub { text: &'a str, substitute: &'a RgbImage },
}

#[derive(Clone)]
pub struct Compositor {
    eraser: Arc<dyn EraserBackend>,
    placement: Placement,
}

impl Default for Compositor {
    fn default() -> Self {
        Compositor::new(Arc::new(BaselineEraser), Placement::Top)
    }
}

impl Compositor {
    pub fn new(eraser: Arc<dyn EraserBackend>, placement: Placement) -> Self {
        Compositor { eraser, placement }
    }

    pub fn eraser_name(&self) -> &str {
        self.eraser.name()
    }

    pub fn compose(
        &self,
        original: &RgbImage,
        original_text: &str,
        ocr_hint: Option<&[TextRegion]>,
        comp: Composition<'_>,
    ) -> Result<RgbImage, ComposeError> {
        Ok(match comp {
            Composition::TextSub { text } => {
                let regions = detect_text_regions(original, ocr_hint);
                let erased = self.eraser.erase(original, &regions)?;
                render_caption(&erased, text, self.placement)?
            }
            Composition::ImageSub { substitute } => render_caption(substitute, original_text, self.placement)?,
            Composition::BothSub { text, substitute } => render_caption(substitute, text, self.placement)?,
        })
    }
}
