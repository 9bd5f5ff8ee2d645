//! Static overlays: annotations as outlines, predictions as crosses with
//! their transcripts drawn in the bitmap font.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::image::Image;
use crate::seqcodec::{Prediction, TextInstance};
use crate::synth::{ink, ADVANCE, GLYPH_H, GLYPH_W};

const GT: Rgb<u8> = Rgb([0, 200, 0]);
const DONT_CARE: Rgb<u8> = Rgb([120, 120, 120]);
const PRED: Rgb<u8> = Rgb([255, 40, 40]);
const TEXT: Rgb<u8> = Rgb([255, 220, 0]);

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, a: Point, b: Point, c: Rgb<u8>) {
    let steps = (b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        put(img, (a[0] + (b[0] - a[0]) * t).floor() as i64, (a[1] + (b[1] - a[1]) * t).floor() as i64, c);
    }
}

fn text(img: &mut RgbImage, s: &str, x: i64, y: i64, px: i64, c: Rgb<u8>) {
    for (i, ch) in s.chars().enumerate() {
        let ox = x + i as i64 * ADVANCE as i64 * px;
        for col in 0..GLYPH_W {
            for row in 0..GLYPH_H {
                if ink(ch, col, row) {
                    for dy in 0..px {
                        for dx in 0..px {
                            put(img, ox + col as i64 * px + dx, y + row as i64 * px + dy, c);
                        }
                    }
                }
            }
        }
    }
}

/// Render `image` upscaled by `zoom` with annotations and predictions on top.
pub fn overlay(image: &Image, gt: &[TextInstance], preds: &[Prediction], zoom: usize) -> RgbImage {
    let z = zoom as f64;
    let mut out = RgbImage::new((image.width * zoom) as u32, (image.height * zoom) as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let v = (image.get(0, y as usize / zoom, x as usize / zoom).clamp(0.0, 1.0) * 255.0).round() as u8;
        *px = Rgb([v, v, v]);
    }
    for t in gt {
        let c = if t.dont_care { DONT_CARE } else { GT };
        let n = t.polygon.len();
        for i in 0..n {
            let (a, b) = (t.polygon[i], t.polygon[(i + 1) % n]);
            line(&mut out, [a[0] * z, a[1] * z], [b[0] * z, b[1] * z], c);
        }
    }
    let px = (zoom as i64 / 2).max(1);
    for (i, p) in preds.iter().enumerate() {
        let (x, y) = match p.point {
            Some(pt) => ((pt[0] * z).floor() as i64, (pt[1] * z).floor() as i64),
            // Transcription-only predictions are listed down the left edge.
            None => (2, 2 + i as i64 * (GLYPH_H as i64 + 2) * px),
        };
        if p.point.is_some() {
            let r = 2 * px;
            for d in -r..=r {
                put(&mut out, x + d, y, PRED);
                put(&mut out, x, y + d, PRED);
            }
        }
        text(&mut out, &p.transcript, x + 3 * px, y - GLYPH_H as i64 * px / 2, px, TEXT);
    }
    out
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {}", path.display(), e)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn marks_land_where_expected() {
        let img = Image::zeros(1, 16, 16);
        let gt = vec![TextInstance {
            polygon: vec![[2.0, 2.0], [10.0, 2.0], [10.0, 6.0], [2.0, 6.0]],
            transcript: "A".into(),
            dont_care: false,
        }];
        let preds = vec![Prediction { point: Some([8.0, 12.0]), transcript: "A".into(), score: 0.9 }];
        let out = overlay(&img, &gt, &preds, 4);
        assert_eq!(out.dimensions(), (64, 64));
        assert_eq!(*out.get_pixel(8, 8), GT);
        assert_eq!(*out.get_pixel(32, 48), PRED);
        assert!(out.pixels().any(|p| *p == TEXT));
        assert_eq!(*out.get_pixel(60, 2), Rgb([0, 0, 0]));
    }
}
