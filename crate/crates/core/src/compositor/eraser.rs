//! Text removal behind a pluggable backend.

use std::time::Duration;

use image::{Rgb, RgbImage};
use reqwest::blocking::{multipart, Client};
use thiserror::Error;

use super::TextRegion;
use crate::model::encode_png;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EraseError {
    #[error("region {index} lies outside the {width}x{height} image")]
    RegionOutOfBounds { index: usize, width: u32, height: u32 },
    #[error("remote eraser: {0}")]
    Remote(String),
    #[error("eraser changed dimensions from {expected:?} to {found:?}")]
    DimensionChanged { expected: (u32, u32), found: (u32, u32) },
}

pub trait EraserBackend: Send + Sync {
    fn name(&self) -> &str;
    /// Returns an image of identical dimensions with the regions removed.
    fn erase(&self, image: &RgbImage, regions: &[TextRegion]) -> Result<RgbImage, EraseError>;
}

pub fn check_regions(image: &RgbImage, regions: &[TextRegion]) -> Result<(), EraseError> {
    for (index, r) in regions.iter().enumerate() {
        if !r.within(image.width(), image.height()) {
            return Err(EraseError::RegionOutOfBounds {
                index,
                width: image.width(),
                height: image.height(),
            });
        }
    }
    Ok(())
}

fn lerp(a: Rgb<u8>, b: Rgb<u8>, num: u32, den: u32) -> Rgb<u8> {
    let mut out = [0u8; 3];
    for c in 0..3 {
        let (a, b) = (a[c] as i64, b[c] as i64);
        // rounded a + (b - a) * num / den
        let v = a * den as i64 + (b - a) * num as i64;
        out[c] = ((2 * v + den as i64) / (2 * den as i64)) as u8;
    }
    Rgb(out)
}

/// Fills each region row by row, interpolating between the pixels just left
/// and right of it. A side touching the image border borrows the opposite
/// side; regions spanning the full width interpolate vertically instead,
/// and a region covering the whole image is flattened to its mean color.
pub struct BaselineEraser;

impl BaselineEraser {
    fn mean(img: &RgbImage, r: &TextRegion) -> Rgb<u8> {
        let mut sum = [0u64; 3];
        let mut n = 0u64;
        for dy in 0..r.h {
            for dx in 0..r.w {
                if r.covers(dx, dy) {
                    let p = img.get_pixel(r.x + dx, r.y + dy);
                    (0..3).for_each(|c| sum[c] += p[c] as u64);
                    n += 1;
                }
            }
        }
        let n = n.max(1);
        Rgb(sum.map(|s| ((2 * s + n) / (2 * n)) as u8))
    }

    fn fill(img: &mut RgbImage, r: &TextRegion) {
        let (iw, ih) = img.dimensions();
        let left = r.x.checked_sub(1);
        let right = (r.x + r.w < iw).then_some(r.x + r.w);
        let above = r.y.checked_sub(1);
        let below = (r.y + r.h < ih).then_some(r.y + r.h);
        let flat = (left, right, above, below) == (None, None, None, None);
        let mean = if flat { Self::mean(img, r) } else { Rgb([0, 0, 0]) };
        for dy in 0..r.h {
            let y = r.y + dy;
            for dx in 0..r.w {
                if !r.covers(dx, dy) {
                    continue;
                }
                let x = r.x + dx;
                let color = match (left, right) {
                    (Some(l), Some(rt)) => lerp(*img.get_pixel(l, y), *img.get_pixel(rt, y), dx + 1, r.w + 1),
                    (Some(l), None) => *img.get_pixel(l, y),
                    (None, Some(rt)) => *img.get_pixel(rt, y),
                    (None, None) => match (above, below) {
                        (Some(a), Some(b)) => lerp(*img.get_pixel(x, a), *img.get_pixel(x, b), dy + 1, r.h + 1),
                        (Some(a), None) => *img.get_pixel(x, a),
                        (None, Some(b)) => *img.get_pixel(x, b),
                        (None, None) => mean,
                    },
                };
                img.put_pixel(x, y, color);
            }
        }
    }
}

impl EraserBackend for BaselineEraser {
    fn name(&self) -> &str {
        "baseline"
    }

    fn erase(&self, image: &RgbImage, regions: &[TextRegion]) -> Result<RgbImage, EraseError> {
        check_regions(image, regions)?;
        let mut out = image.clone();
        for r in regions {
            Self::fill(&mut out, r);
        }
        Ok(out)
    }
}

/// Posts `image` (PNG) and `regions` (JSON) as multipart form fields and
/// expects a PNG of the same size back.
pub struct RemoteEraser {
    url: String,
    client: Client,
}

impl RemoteEraser {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Result<Self, EraseError> {
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EraseError::Remote(e.to_string()))?;
        Ok(RemoteEraser { url: url.into(), client })
    }
}

impl EraserBackend for RemoteEraser {
    fn name(&self) -> &str {
        "remote"
    }

    fn erase(&self, image: &RgbImage, regions: &[TextRegion]) -> Result<RgbImage, EraseError> {
        check_regions(image, regions)?;
        let remote = |e: &dyn std::fmt::Display| EraseError::Remote(e.to_string());
        let png = encode_png(image).map_err(|e| remote(&e))?;
        let boxes = serde_json::to_string(regions).map_err(|e| remote(&e))?;
        let form = multipart::Form::new()
            .part(
                "image",
                multipart::Part::bytes(png).file_name("image.png").mime_str("image/png").map_err(|e| remote(&e))?,
            )
            .part(
                "regions",
                multipart::Part::text(boxes).mime_str("application/json").map_err(|e| remote(&e))?,
            );
        let resp = self.client.post(&self.url).multipart(form).send().map_err(|e| remote(&e))?;
        let status = resp.status();
        let body = resp.bytes().map_err(|e| remote(&e))?;
        if !status.is_success() {
            return Err(EraseError::Remote(format!("HTTP {status}")));
        }
        let out = image::load_from_memory(&body).map_err(|e| remote(&e))?.to_rgb8();
        if out.dimensions() != image.dimensions() {
            return Err(EraseError::DimensionChanged {
                expected: image.dimensions(),
                found: out.dimensions(),
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn region(x: u32, y: u32, w: u32, h: u32) -> TextRegion {
        TextRegion::new(x, y, w, h)
    }

    #[test]
    fn uniform_image_is_unchanged() {
        let img = RgbImage::from_pixel(20, 10, Rgb([77, 77, 77]));
        let out = BaselineEraser.erase(&img, &[region(3, 2, 9, 5), region(0, 0, 20, 10)]).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn white_box_on_black_becomes_black() {
        let mut img = RgbImage::from_pixel(30, 20, Rgb([0, 0, 0]));
        for y in 5..12 {
            for x in 8..20 {
                img.put_pixel(x, y, Rgb([255, 255, 255]));
            }
        }
        let out = BaselineEraser.erase(&img, &[region(8, 5, 12, 7)]).unwrap();
        assert!(out.pixels().all(|p| *p == Rgb([0, 0, 0])));
    }

    #[test]
    fn no_regions_is_bit_exact_identity() {
        let img = RgbImage::from_fn(13, 11, |x, y| Rgb([(x * 19) as u8, (y * 23) as u8, (x ^ y) as u8]));
        assert_eq!(BaselineEraser.erase(&img, &[]).unwrap(), img);
    }

    #[test]
    fn interpolates_between_edges() {
        let mut img = RgbImage::from_pixel(5, 1, Rgb([0, 0, 0]));
        img.put_pixel(4, 0, Rgb([200, 100, 40]));
        let out = BaselineEraser.erase(&img, &[region(1, 0, 3, 1)]).unwrap();
        let got: Vec<_> = (1..4).map(|x| out.get_pixel(x, 0).0).collect();
        assert_eq!(got, [[50, 25, 10], [100, 50, 20], [150, 75, 30]]);
    }

    #[test]
    fn border_regions_borrow_the_other_side() {
        let img = RgbImage::from_fn(6, 3, |x, _| if x < 3 { Rgb([9, 9, 9]) } else { Rgb([200, 0, 0]) });
        let out = BaselineEraser.erase(&img, &[region(0, 0, 4, 3)]).unwrap();
        assert!((0..4).all(|x| *out.get_pixel(x, 1) == Rgb([200, 0, 0])));
        let whole = BaselineEraser.erase(&img, &[region(0, 0, 6, 3)]).unwrap();
        // mean of 9 and 200, rounded
        assert!(whole.pixels().all(|p| *p == Rgb([105, 5, 5])));
    }

    #[test]
    fn mask_limits_the_fill() {
        let img = RgbImage::from_fn(4, 1, |x, _| Rgb([x as u8 * 60, 0, 0]));
        let mut r = region(1, 0, 2, 1);
        r.mask = Some(vec![false, true]);
        let out = BaselineEraser.erase(&img, &[r]).unwrap();
        assert_eq!(out.get_pixel(1, 0), img.get_pixel(1, 0));
        assert_eq!(out.get_pixel(2, 0).0, [120, 0, 0]);
    }

    #[test]
    fn out_of_bounds_region_is_rejected() {
        let img = RgbImage::new(5, 5);
        assert_eq!(
            BaselineEraser.erase(&img, &[region(0, 0, 1, 1), region(3, 3, 3, 1)]),
            Err(EraseError::RegionOutOfBounds { index: 1, width: 5, height: 5 })
        );
    }

    proptest! {
        #[test]
        fn pixels_outside_regions_are_untouched(
            seed in any::<u64>(),
            boxes in proptest::collection::vec((0u32..40, 0u32..30, 1u32..20, 1u32..15), 0..6),
        ) {
            let img = RgbImage::from_fn(40, 30, |x, y| {
                let v = seed.wrapping_mul(x as u64 * 31 + y as u64 * 7 + 1);
                Rgb([v as u8, (v >> 8) as u8, (v >> 16) as u8])
            });
            let regions: Vec<_> = boxes.iter().map(|&(x, y, w, h)| region(x, y, w.min(40 - x), h.min(30 - y))).collect();
            let out = BaselineEraser.erase(&img, &regions).unwrap();
            prop_assert_eq!(out.dimensions(), img.dimensions());
            for (x, y, p) in img.enumerate_pixels() {
                if !regions.iter().any(|r| r.contains(x, y)) {
                    prop_assert_eq!(out.get_pixel(x, y), p);
                }
            }
        }
    }
}
