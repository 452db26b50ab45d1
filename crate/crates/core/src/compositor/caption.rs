//! Meme-style caption rendering with a bundled 8×8 bitmap font.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// 128 ASCII glyphs, 8 rows each, bit 0 = leftmost pixel.
pub(crate) static FONT: &[u8; 1024] = include_bytes!("../../assets/font8x8_basic.bin");
pub const FONT_SHA256: &str = "66bba26c3b351634ed4dd3ad7561f6cc892e1727d4887204bd4d1d3883a18b37";

pub const MIN_FONT_PX: u32 = 8;
const WIDTH_FRACTION: f64 = 0.92;
const FILL: Rgb<u8> = Rgb([255, 255, 255]);
const OUTLINE: Rgb<u8> = Rgb([0, 0, 0]);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CaptionError {
    #[error("caption does not fit a {width}x{height} image even at {MIN_FONT_PX}px")]
    TextTooLong { width: u32, height: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    #[default]
    Top,
    Bottom,
    /// First half of the lines at the top, the rest at the bottom.
    Split,
}

impl std::str::FromStr for Placement {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "top" => Ok(Placement::Top),
            "bottom" => Ok(Placement::Bottom),
            "split" | "top+bottom" => Ok(Placement::Split),
            other => Err(format!("unknown placement `{other}` (top|bottom|split)")),
        }
    }
}

/// Where one caption line lands, in image pixels (outline included).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineBox {
    pub text: String,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionLayout {
    pub font_px: u32,
    pub outline_px: u32,
    pub lines: Vec<LineBox>,
}

fn glyph_row(c: char, row: usize) -> u8 {
    let code = if c.is_ascii() { c as usize } else { '?' as usize };
    FONT[code * 8 + row]
}

fn outline_for(font_px: u32) -> u32 {
    (font_px / 12).max(1)
}

/// Greedy word wrap; words longer than a line are split.
fn wrap(text: &str, max_chars: usize) -> Vec<String> {
    let mut lines = Vec::new();
    let mut current = String::new();
    for word in text.split_whitespace() {
        let mut word: Vec<char> = word.chars().collect();
        while word.len() > max_chars {
            if !current.is_empty() {
                lines.push(std::mem::take(&mut current));
            }
            lines.push(word.drain(..max_chars).collect());
        }
        let word: String = word.into_iter().collect();
        if word.is_empty() {
            continue;
        }
        let needed = if current.is_empty() { word.len() } else { current.chars().count() + 1 + word.len() };
        if needed <= max_chars {
            if !current.is_empty() {
                current.push(' ');
            }
            current.push_str(&word);
        } else {
            lines.push(std::mem::replace(&mut current, word));
        }
    }
    if !current.is_empty() {
        lines.push(current);
    }
    lines
}

fn try_layout(width: u32, height: u32, text: &str, placement: Placement, font_px: u32) -> Option<CaptionLayout> {
    let outline = outline_for(font_px);
    let max_w = (width as f64 * WIDTH_FRACTION).floor() as u32;
    let max_chars = (max_w.checked_sub(2 * outline)? / font_px) as usize;
    if max_chars == 0 {
        return None;
    }
    let lines = wrap(text, max_chars);
    let line_h = font_px + 2 * outline;
    let gap = font_px / 4;
    let margin = height / 40;
    let block_h = |n: u32| n * line_h + n.saturating_sub(1) * gap;

    let (top_n, bottom_n) = match placement {
        Placement::Top => (lines.len(), 0),
        Placement::Bottom => (0, lines.len()),
        Placement::Split => (lines.len().div_ceil(2), lines.len() / 2),
    };
    let (top_h, bottom_h) = (block_h(top_n as u32), block_h(bottom_n as u32));
    let fits = match placement {
        Placement::Split => top_h + margin <= height / 2 && bottom_h + margin <= height - height / 2,
        _ => top_h.max(bottom_h) + 2 * margin <= height,
    };
    if !fits {
        return None;
    }

    let mut boxes = Vec::with_capacity(lines.len());
    for (i, line) in lines.into_iter().enumerate() {
        let w = line.chars().count() as u32 * font_px + 2 * outline;
        let y = if i < top_n {
            margin + i as u32 * (line_h + gap)
        } else {
            let j = (i - top_n) as u32;
            height - margin - bottom_h + j * (line_h + gap)
        };
        boxes.push(LineBox {
            text: line,
            x: (width - w) / 2,
            y,
            w,
            h: line_h,
        });
    }
    Some(CaptionLayout {
        font_px,
        outline_px: outline,
        lines: boxes,
    })
}

/// Pick the largest font from `max(height/12, 12)` down to 8 px at which
/// the uppercased, wrapped caption fits. Blank text yields no lines.
pub fn layout_caption(width: u32, height: u32, text: &str, placement: Placement) -> Result<CaptionLayout, CaptionError> {
    let upper = text.to_uppercase();
    if upper.trim().is_empty() {
        return Ok(CaptionLayout {
            font_px: 0,
            outline_px: 0,
            lines: Vec::new(),
        });
    }
    let start = (height / 12).max(12);
    (MIN_FONT_PX..=start)
        .rev()
        .find_map(|px| try_layout(width, height, &upper, placement, px))
        .ok_or(CaptionError::TextTooLong { width, height })
}

/// Glyph coverage for one line at `font_px`, as a row-major bool grid.
fn line_mask(text: &str, font_px: u32) -> (u32, u32, Vec<bool>) {
    let n = text.chars().count() as u32;
    let (w, h) = (n * font_px, font_px);
    let mut mask = vec![false; (w * h) as usize];
    for (ci, c) in text.chars().enumerate() {
        for py in 0..h {
            let row = glyph_row(c, (py * 8 / font_px) as usize);
            for px in 0..font_px {
                if row >> (px * 8 / font_px) & 1 == 1 {
                    mask[(py * w + ci as u32 * font_px + px) as usize] = true;
                }
            }
        }
    }
    (w, h, mask)
}

pub fn draw_layout(image: &mut RgbImage, layout: &CaptionLayout) {
    let o = layout.outline_px as i64;
    for line in &layout.lines {
        let (w, h, mask) = line_mask(&line.text, layout.font_px);
        let ox = line.x as i64 + o;
        let oy = line.y as i64 + o;
        let mut put = |x: i64, y: i64, color| {
            if x >= 0 && y >= 0 && (x as u32) < image.width() && (y as u32) < image.height() {
                image.put_pixel(x as u32, y as u32, color);
            }
        };
        // outline pass, then fill on top
        for (pass, color) in [(o, OUTLINE), (0, FILL)] {
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    if !mask[(y * w as i64 + x) as usize] {
                        continue;
                    }
                    for dy in -pass..=pass {
                        for dx in -pass..=pass {
                            put(ox + x + dx, oy + y + dy, color);
                        }
                    }
                }
            }
        }
    }
}

pub fn render_caption(image: &RgbImage, text: &str, placement: Placement) -> Result<RgbImage, CaptionError> {
    let layout = layout_caption(image.width(), image.height(), text, placement)?;
    let mut out = image.clone();
    draw_layout(&mut out, &layout);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    #[test]
    fn font_digest_is_pinned() {
        assert_eq!(hex::encode(Sha256::digest(FONT)), FONT_SHA256);
    }

    #[test]
    fn glyph_a_has_expected_bitmap() {
        let rows: Vec<u8> = (0..8).map(|r| glyph_row('A', r)).collect();
        assert_eq!(rows, [0x0C, 0x1E, 0x33, 0x33, 0x3F, 0x33, 0x33, 0x00]);
    }

    #[test]
    fn short_word_is_one_top_line() {
        let layout = layout_caption(100, 100, "hello", Placement::Top).unwrap();
        assert_eq!(layout.lines.len(), 1);
        assert_eq!(layout.lines[0].text, "HELLO");
        assert!(layout.font_px >= 12);
        assert!(layout.lines[0].y < 50);
    }

    #[test]
    fn overflowing_text_is_rejected() {
        let text = "word ".repeat(100);
        assert_eq!(
            render_caption(&RgbImage::new(64, 64), &text, Placement::Top),
            Err(CaptionError::TextTooLong { width: 64, height: 64 })
        );
    }

    #[test]
    fn empty_text_is_identity() {
        let img = RgbImage::from_fn(9, 7, |x, y| Rgb([x as u8, y as u8, 3]));
        assert_eq!(render_caption(&img, "", Placement::Split).unwrap(), img);
        assert_eq!(render_caption(&img, "  \n", Placement::Top).unwrap(), img);
    }

    #[test]
    fn lines_stay_within_width_and_bounds() {
        for (w, h, text) in [(200, 150, "a fairly long caption that has to wrap onto several lines"), (320, 90, "split me in two halves please")] {
            for placement in [Placement::Top, Placement::Bottom, Placement::Split] {
                let layout = layout_caption(w, h, text, placement).unwrap();
                for line in &layout.lines {
                    assert!(line.w as f64 <= w as f64 * 0.92, "{line:?}");
                    assert!(line.y + line.h <= h);
                }
            }
        }
    }

    #[test]
    fn shrinks_before_giving_up() {
        // too long at 12 px on one 100 px-wide line pair, fits smaller
        let layout = layout_caption(100, 40, "abcdefghijklmnop", Placement::Top).unwrap();
        assert!(layout.font_px < 12 && layout.font_px >= MIN_FONT_PX);
    }

    #[test]
    fn wrap_splits_long_words() {
        assert_eq!(wrap("ab cdefgh i", 3), ["ab", "cde", "fgh", "i"]);
    }

    #[test]
    fn rendering_is_deterministic_and_touches_only_caption_band() {
        let img = RgbImage::from_pixel(120, 90, Rgb([90, 120, 150]));
        let a = render_caption(&img, "same input", Placement::Bottom).unwrap();
        assert_eq!(a, render_caption(&img, "same input", Placement::Bottom).unwrap());
        let layout = layout_caption(120, 90, "same input", Placement::Bottom).unwrap();
        let band_top = layout.lines[0].y;
        for (x, y, p) in a.enumerate_pixels() {
            if y < band_top {
                assert_eq!(p, img.get_pixel(x, y));
            }
        }
        assert_ne!(a, img);
    }
}
