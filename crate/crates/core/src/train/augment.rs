//! Random resize, crop and rotation applied consistently to pixels and
//! polygons.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::Point;
use crate::image::Image;
use crate::seqcodec::TextInstance;

pub const CROP_RETRIES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Resize factor range applied to the canvas side.
    pub scale: [f64; 2],
    /// Maximum absolute rotation in degrees.
    pub rotation: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { scale: [0.8, 1.2], rotation: 10.0 }
    }
}

/// Similarity transform on a square canvas: scale and rotate about the
/// centre, then shift.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub scale: f64,
    /// Radians, counter-clockwise in image coordinates (y down).
    pub angle: f64,
    pub shift: Point,
    pub side: f64,
}

impl Transform {
    pub fn identity(side: f64) -> Self {
        Self { scale: 1.0, angle: 0.0, shift: [0.0, 0.0], side }
    }

    pub fn is_identity(&self) -> bool {
        self.scale == 1.0 && self.angle == 0.0 && self.shift == [0.0, 0.0]
    }

    pub fn apply(&self, p: Point) -> Point {
        let c = self.side / 2.0;
        let (s, cs) = self.angle.sin_cos();
        let (x, y) = (p[0] - c, p[1] - c);
        [
            self.scale * (cs * x + s * y) + c + self.shift[0],
            self.scale * (-s * x + cs * y) + c + self.shift[1],
        ]
    }

    pub fn invert(&self, p: Point) -> Point {
        let c = self.side / 2.0;
        let (s, cs) = self.angle.sin_cos();
        let (x, y) = ((p[0] - c - self.shift[0]) / self.scale, (p[1] - c - self.shift[1]) / self.scale);
        [cs * x - s * y + c, s * x + cs * y + c]
    }

    pub fn warp(&self, image: &Image) -> Image {
        if self.is_identity() {
            return image.clone();
        }
        let mut out = Image::zeros(image.channels, image.height, image.width);
        for y in 0..image.height {
            for x in 0..image.width {
                let p = self.invert([x as f64 + 0.5, y as f64 + 0.5]);
                for c in 0..image.channels {
                    out.data[(c * image.height + y) * image.width + x] = image.sample(c, p[1] - 0.5, p[0] - 0.5);
                }
            }
        }
        out
    }

    /// Transformed instances. Instances wholly outside the canvas are dropped;
    /// those cut by its edge become dont-care.
    pub fn instances(&self, instances: &[TextInstance]) -> Vec<TextInstance> {
        let s = self.side;
        let inside = |p: &Point| (0.0..=s).contains(&p[0]) && (0.0..=s).contains(&p[1]);
        instances
            .iter()
            .filter_map(|t| {
                let polygon: Vec<Point> = t.polygon.iter().map(|&p| self.apply(p)).collect();
                let n_in = polygon.iter().filter(|p| inside(p)).count();
                if n_in == 0 {
                    return None;
                }
                let dont_care = t.dont_care || n_in < polygon.len();
                Some(TextInstance { polygon, transcript: t.transcript.clone(), dont_care })
            })
            .collect()
    }
}

fn draw(cfg: &AugmentConfig, side: f64, rng: &mut ChaCha8Rng) -> Transform {
    let scale = if cfg.scale[0] < cfg.scale[1] { rng.random_range(cfg.scale[0]..=cfg.scale[1]) } else { cfg.scale[0] };
    let angle = if cfg.rotation > 0.0 { rng.random_range(-cfg.rotation..=cfg.rotation).to_radians() } else { 0.0 };
    // Scaling about the centre leaves a margin of (scale - 1) side / 2 on each
    // side; the crop window moves within it.
    let slack = (scale - 1.0).abs() * side / 2.0;
    let shift = if slack > 0.0 { [rng.random_range(-slack..=slack), rng.random_range(-slack..=slack)] } else { [0.0, 0.0] };
    Transform { scale, angle, shift, side }
}

/// Draw a transform keeping at least one whole scored instance, retrying up
/// to [`CROP_RETRIES`] times before falling back to the identity.
pub fn choose(cfg: &AugmentConfig, side: f64, instances: &[TextInstance], seed: u64) -> Transform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scored = instances.iter().any(|t| !t.dont_care);
    for _ in 0..CROP_RETRIES {
        let t = draw(cfg, side, &mut rng);
        if !scored || t.instances(instances).iter().any(|i| !i.dont_care) {
            return t;
        }
    }
    Transform::identity(side)
}

pub fn augment(image: &Image, instances: &[TextInstance], cfg: &AugmentConfig, seed: u64) -> (Image, Vec<TextInstance>) {
    let t = choose(cfg, image.width as f64, instances, seed);
    (t.warp(image), t.instances(instances))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::central_point;

    fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> TextInstance {
        TextInstance { polygon: vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]], transcript: "ab".into(), dont_care: false }
    }

    fn noise_image(side: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut img = Image::zeros(1, side, side);
        img.data.iter_mut().for_each(|v| *v = rng.random());
        img
    }

    #[test]
    fn identity_leaves_sample_unchanged() {
        let img = noise_image(16);
        let inst = vec![rect(2.0, 3.0, 10.0, 7.0)];
        let cfg = AugmentConfig { scale: [1.0, 1.0], rotation: 0.0 };
        let (a, b) = augment(&img, &inst, &cfg, 5);
        assert_eq!(a, img);
        assert_eq!(b, inst);
        // The resampling path itself is exact at unit scale.
        let t = Transform { scale: 1.0, angle: 0.0, shift: [0.0, 0.0], side: 16.0 };
        let forced = Transform { shift: [1e-300, 0.0], ..t };
        assert_eq!(forced.warp(&img), img);
    }

    #[test]
    fn quarter_turn_fixes_the_centre() {
        let t = Transform { scale: 1.0, angle: std::f64::consts::FRAC_PI_2, shift: [0.0, 0.0], side: 64.0 };
        let p = t.apply([32.0, 32.0]);
        assert!((p[0] - 32.0).abs() < 1e-12 && (p[1] - 32.0).abs() < 1e-12);
        let q = t.apply([48.0, 32.0]);
        assert!((q[0] - 32.0).abs() < 1e-12 && (q[1] - 16.0).abs() < 1e-12);
    }

    #[test]
    fn indicator_commutes_with_transform() {
        let cfg = AugmentConfig { scale: [0.7, 1.3], rotation: 30.0 };
        let poly = vec![[20.0, 30.0], [35.0, 26.0], [50.0, 30.0], [48.0, 40.0], [35.0, 36.0], [22.0, 40.0]];
        for seed in 0..50 {
            let t = draw(&cfg, 64.0, &mut ChaCha8Rng::seed_from_u64(seed));
            let moved: Vec<Point> = poly.iter().map(|&p| t.apply(p)).collect();
            let a = central_point(&moved);
            let b = t.apply(central_point(&poly));
            assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
            let back = t.invert(t.apply([3.0, 7.0]));
            assert!((back[0] - 3.0).abs() < 1e-9 && (back[1] - 7.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pixels_follow_polygons() {
        let side = 32;
        let mut img = Image::zeros(1, side, side);
        for y in 12..16 {
            for x in 8..20 {
                img.data[y * side + x] = 1.0;
            }
        }
        let inst = vec![rect(8.0, 12.0, 20.0, 16.0)];
        let cfg = AugmentConfig { scale: [0.9, 1.1], rotation: 15.0 };
        for seed in 0..20 {
            let (a, b) = augment(&img, &inst, &cfg, seed);
            let c = central_point(&b[0].polygon);
            assert!(a.sample(0, c[1] - 0.5, c[0] - 0.5) > 0.9, "seed {}", seed);
        }
    }

    #[test]
    fn crops_keep_a_scored_instance() {
        let cfg = AugmentConfig { scale: [1.5, 2.0], rotation: 0.0 };
        let inst = vec![rect(1.0, 1.0, 6.0, 4.0)];
        for seed in 0..30 {
            let t = choose(&cfg, 64.0, &inst, seed);
            let out = t.instances(&inst);
            assert!(out.iter().any(|i| !i.dont_care) || t.is_identity());
        }
    }

    #[test]
    fn edge_instances_become_dont_care() {
        let t = Transform { scale: 1.0, angle: 0.0, shift: [-5.0, 0.0], side: 32.0 };
        let out = t.instances(&[rect(2.0, 2.0, 10.0, 6.0), rect(0.0, 10.0, 4.0, 14.0), rect(12.0, 12.0, 20.0, 16.0)]);
        assert_eq!(out.len(), 2);
        assert!(out[0].dont_care);
        assert!(!out[1].dont_care);
    }
}
