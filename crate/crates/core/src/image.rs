//! Channels-first images with values in `[0, 1]` and portable-bitmap IO.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_gray_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width {
            return Err(Error::invalid(format!(
                "{}x{} grayscale image needs {} bytes, got {}",
                height,
                width,
                height * width,
                bytes.len()
            )));
        }
        Ok(Self { channels: 1, height, width, data: bytes.iter().map(|&b| b as f32 / 255.0).collect() })
    }

    pub fn to_gray_bytes(&self) -> Vec<u8> {
        self.data[..self.height * self.width]
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Bilinear sample with zero outside the image.
    pub fn sample(&self, c: usize, y: f64, x: f64) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = (x - x0) as f32;
        let fy = (y - y0) as f32;
        let at = |yy: f64, xx: f64| -> f32 {
            if yy < 0.0 || xx < 0.0 || yy >= self.height as f64 || xx >= self.width as f64 {
                0.0
            } else {
                self.get(c, yy as usize, xx as usize)
            }
        };
        let a = at(y0, x0);
        let b = at(y0, x0 + 1.0);
        let cc = at(y0 + 1.0, x0);
        let d = at(y0 + 1.0, x0 + 1.0);
        (a * (1.0 - fx) + b * fx) * (1.0 - fy) + (cc * (1.0 - fx) + d * fx) * fy
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.to_gray_bytes())
            .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
        buf.save_with_format(path, image::ImageFormat::Pnm)
            .map_err(|e| Error::Image(format!("{}: {}", path.display(), e)))
    }

    pub fn load_gray(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image(format!("{}: {}", path.display(), e)))?;
        let g = img.to_luma8();
        Self::from_gray_bytes(g.height() as usize, g.width() as usize, g.as_raw())
    }

    /// Paste onto a zero square canvas of the given side, scaling down when
    /// larger. Returns the canvas and the scale applied to coordinates.
    pub fn fit_square(&self, side: usize) -> (Image, f64) {
        if self.height == side && self.width == side {
            return (self.clone(), 1.0);
        }
        let long = self.height.max(self.width) as f64;
        let scale = if long > side as f64 { side as f64 / long } else { 1.0 };
        let mut out = Image::zeros(self.channels, side, side);
        let oh = ((self.height as f64 * scale).round() as usize).min(side);
        let ow = ((self.width as f64 * scale).round() as usize).min(side);
        for c in 0..self.channels {
            for y in 0..oh {
                for x in 0..ow {
                    let v = self.sample(c, (y as f64 + 0.5) / scale - 0.5, (x as f64 + 0.5) / scale - 0.5);
                    out.data[(c * side + y) * side + x] = v;
                }
            }
        }
        (out, scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let bytes: Vec<u8> = (0..12u8).map(|v| v * 20).collect();
        let img = Image::from_gray_bytes(3, 4, &bytes).unwrap();
        let p = dir.path().join("a.pgm");
        img.save_pgm(&p).unwrap();
        let back = Image::load_gray(&p).unwrap();
        assert_eq!(back.to_gray_bytes(), bytes);
    }

    #[test]
    fn fit_square_keeps_matching_side() {
        let img = Image::zeros(1, 8, 8);
        let (out, s) = img.fit_square(8);
        assert_eq!(s, 1.0);
        assert_eq!(out, img);
        let (out, s) = Image::zeros(1, 4, 16).fit_square(8);
        assert_eq!((out.height, out.width, s), (8, 8, 0.5));
    }
}
