//! Seeded synthetic scenes: bitmap-font words on straight or arc baselines
//! over a noisy background, with polygon annotations.

mod glyphs;

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use glyphs::{glyph, ink, ADVANCE, GLYPH_H, GLYPH_W};

use crate::annotations::{write_annotations, AnnotationLine};
use crate::error::{Error, Result};
use crate::geometry::{central_point, polygon_distance, Point};
use crate::image::Image;
use crate::seqcodec::{default_charset, quantize, TextInstance};

pub const PLACEMENT_RETRIES: usize = 100;
pub const DATASET_VERSION: u32 = 1;

/// Vertices per chain on arc baselines.
const ARC_CHAIN: usize = 9;
/// Clear pixels kept between neighbouring instances.
const GAP: f64 = 1.5;
const SUPERSAMPLE: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub side: usize,
    /// Inclusive instance count range.
    pub instances: [usize; 2],
    /// Image pixels per glyph pixel.
    pub scale: [f64; 2],
    /// Maximum absolute baseline rotation in degrees.
    pub rotation: f64,
    /// Baseline curvature magnitude in 1/px; 0 is straight.
    pub curvature: [f64; 2],
    pub min_separation: f64,
    /// Standard deviation of additive background noise.
    pub noise: f64,
    /// Inclusive word length range.
    pub word_len: [usize; 2],
    /// Characters words are drawn from.
    pub charset: String,
    /// Coordinate bins the separation must respect.
    pub n_bins: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            side: 128,
            instances: [1, 6],
            scale: [1.5, 2.5],
            rotation: 20.0,
            curvature: [0.0, 0.02],
            min_separation: 8.0,
            noise: 0.03,
            word_len: [1, 8],
            charset: default_charset().into_iter().filter(|c| *c != ' ').collect(),
            n_bins: 1000,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("scene spec: {}", m)));
        if self.side < 8 {
            return bad(format!("side {} too small", self.side));
        }
        if self.instances[0] > self.instances[1] || self.word_len[0] > self.word_len[1] {
            return bad("inverted count range".into());
        }
        if self.word_len[0] == 0 {
            return bad("words need at least one character".into());
        }
        if !(self.scale[0] > 0.0 && self.scale[0] <= self.scale[1]) {
            return bad(format!("scale range {:?}", self.scale));
        }
        if !(self.curvature[0] >= 0.0 && self.curvature[0] <= self.curvature[1]) {
            return bad(format!("curvature range {:?}", self.curvature));
        }
        if !(self.rotation >= 0.0 && self.noise >= 0.0) {
            return bad("rotation and noise must be nonnegative".into());
        }
        if self.n_bins < 2 {
            return bad("n_bins must be at least 2".into());
        }
        let floor = 2.0 * self.side as f64 / (self.n_bins - 1) as f64;
        if self.min_separation <= floor {
            return bad(format!("min_separation {} must exceed {}", self.min_separation, floor));
        }
        if self.charset.is_empty() {
            return bad("empty charset".into());
        }
        if let Some(c) = self.charset.chars().find(|&c| glyph(c).is_none() || c.is_whitespace()) {
            return bad(format!("no drawable glyph for {:?}", c));
        }
        Ok(())
    }
}

/// Text-space to image mapping. `u` runs along the word, `v` down from its
/// top edge.
#[derive(Clone, Copy, Debug)]
enum Baseline {
    Line { o: Point, d: Point, n: Point },
    /// `sigma = 1` bulges upward, `-1` downward. `r` is the radius of the
    /// word's midline and `mid` the angle of its centre.
    Arc { c: Point, r: f64, mid: f64, sigma: f64, w: f64, h: f64 },
}

impl Baseline {
    fn new(center: Point, w: f64, h: f64, rot: f64, kappa: f64, sigma: f64) -> Self {
        if kappa == 0.0 {
            let d = [rot.cos(), rot.sin()];
            let n = [-rot.sin(), rot.cos()];
            let o = [center[0] - w / 2.0 * d[0] - h / 2.0 * n[0], center[1] - w / 2.0 * d[1] - h / 2.0 * n[1]];
            Baseline::Line { o, d, n }
        } else {
            let r = 1.0 / kappa;
            let mid = -sigma * PI / 2.0 + rot;
            let c = [center[0] - r * mid.cos(), center[1] - r * mid.sin()];
            Baseline::Arc { c, r, mid, sigma, w, h }
        }
    }

    fn forward(&self, u: f64, v: f64) -> Point {
        match *self {
            Baseline::Line { o, d, n } => [o[0] + u * d[0] + v * n[0], o[1] + u * d[1] + v * n[1]],
            Baseline::Arc { c, r, mid, sigma, w, h } => {
                let phi = mid + sigma * (u - w / 2.0) / r;
                let rr = r + sigma * (h / 2.0 - v);
                [c[0] + rr * phi.cos(), c[1] + rr * phi.sin()]
            }
        }
    }

    fn inverse(&self, p: Point) -> (f64, f64) {
        match *self {
            Baseline::Line { o, d, n } => {
                let q = [p[0] - o[0], p[1] - o[1]];
                (q[0] * d[0] + q[1] * d[1], q[0] * n[0] + q[1] * n[1])
            }
            Baseline::Arc { c, r, mid, sigma, w, h } => {
                let q = [p[0] - c[0], p[1] - c[1]];
                let rr = q[0].hypot(q[1]);
                let mut dphi = q[1].atan2(q[0]) - mid;
                dphi -= (dphi / (2.0 * PI)).round() * 2.0 * PI;
                (w / 2.0 + sigma * dphi * r, h / 2.0 - sigma * (rr - r))
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Placed {
    word: Vec<char>,
    scale: f64,
    base: Baseline,
    polygon: Vec<Point>,
    level: f32,
}

impl Placed {
    fn inked(&self, p: Point) -> bool {
        let (u, v) = self.base.inverse(p);
        if u < 0.0 || v < 0.0 {
            return false;
        }
        let cell = ADVANCE as f64 * self.scale;
        let j = (u / cell) as usize;
        if j >= self.word.len() {
            return false;
        }
        let col = ((u - j as f64 * cell) / self.scale) as usize;
        let row = (v / self.scale) as usize;
        ink(self.word[j], col, row)
    }

    /// Fraction of subsamples inked within pixel `(x, y)`.
    fn coverage(&self, x: usize, y: usize) -> f32 {
        let mut hits = 0;
        for i in 0..SUPERSAMPLE {
            for j in 0..SUPERSAMPLE {
                let p = [
                    x as f64 + (j as f64 + 0.5) / SUPERSAMPLE as f64,
                    y as f64 + (i as f64 + 0.5) / SUPERSAMPLE as f64,
                ];
                hits += self.inked(p) as usize;
            }
        }
        hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32
    }

    /// Pixel bounds `(x0, y0, x1, y1)` of the polygon grown by `pad`, clipped.
    fn bounds(&self, side: usize, pad: f64) -> (usize, usize, usize, usize) {
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for p in &self.polygon {
            x0 = x0.min(p[0]);
            y0 = y0.min(p[1]);
            x1 = x1.max(p[0]);
            y1 = y1.max(p[1]);
        }
        let lo = |v: f64| (v - pad).floor().max(0.0) as usize;
        let hi = |v: f64| ((v + pad).ceil().max(0.0) as usize).min(side);
        (lo(x0), lo(y0), hi(x1), hi(y1))
    }

    fn instance(&self) -> TextInstance {
        TextInstance { polygon: self.polygon.clone(), transcript: self.word.iter().collect(), dont_care: false }
    }
}

fn envelope(base: &Baseline, w: f64, h: f64, pad: f64, points: usize) -> Vec<Point> {
    let us: Vec<f64> = (0..points).map(|k| -pad + (w + 2.0 * pad) * k as f64 / (points - 1) as f64).collect();
    let top = us.iter().map(|&u| base.forward(u, -pad));
    let bottom = us.iter().rev().map(|&u| base.forward(u, h + pad));
    top.chain(bottom).collect()
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn place(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Placed> {
    let charset: Vec<char> = spec.charset.chars().collect();
    let side = spec.side;
    let s = side as f64;
    let target = rng.random_range(spec.instances[0]..=spec.instances[1]);
    let mut occupied = vec![false; side * side];
    let mut placed: Vec<Placed> = Vec::new();
    let mut centers: Vec<Point> = Vec::new();
    for _ in 0..target {
        for _ in 0..PLACEMENT_RETRIES {
            let len = rng.random_range(spec.word_len[0]..=spec.word_len[1]);
            let word: Vec<char> = (0..len).map(|_| charset[rng.random_range(0..charset.len())]).collect();
            let scale = uniform(rng, spec.scale);
            let w = (ADVANCE * len - 1) as f64 * scale;
            let h = GLYPH_H as f64 * scale;
            let pad = 0.5 * scale;
            let rot = uniform(rng, [-spec.rotation, spec.rotation]).to_radians();
            let sigma = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            // Keep arcs under about 115 degrees and the inner edge off the centre.
            let kappa = uniform(rng, spec.curvature).min(2.0 / w).min(1.0 / (2.0 * h));
            let center = [rng.random_range(0.0..s), rng.random_range(0.0..s)];
            let base = Baseline::new(center, w, h, rot, kappa, sigma);
            let points = if kappa == 0.0 { 2 } else { ARC_CHAIN };
            let polygon = envelope(&base, w, h, pad, points);
            if polygon.iter().any(|p| p[0] < 0.0 || p[1] < 0.0 || p[0] > s || p[1] > s) {
                continue;
            }
            let c = central_point(&polygon);
            if centers.iter().any(|o| (o[0] - c[0]).hypot(o[1] - c[1]) <= spec.min_separation) {
                continue;
            }
            let cand = Placed { word, scale, base, polygon, level: 0.0 };
            let (x0, y0, x1, y1) = cand.bounds(side, GAP);
            let mut footprint = Vec::new();
            let mut clash = false;
            'scan: for y in y0..y1 {
                for x in x0..x1 {
                    let p = [x as f64 + 0.5, y as f64 + 0.5];
                    if polygon_distance(p, &cand.polygon) <= GAP {
                        if occupied[y * side + x] {
                            clash = true;
                            break 'scan;
                        }
                        footprint.push(y * side + x);
                    }
                }
            }
            if clash {
                continue;
            }
            footprint.into_iter().for_each(|i| occupied[i] = true);
            centers.push(c);
            placed.push(cand);
            break;
        }
    }
    placed
}

/// One rendered scene and its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub instances: Vec<TextInstance>,
}

fn render_placed(spec: &SceneSpec, seed: u64) -> Result<(Scene, Vec<Placed>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut placed = place(spec, &mut rng);
    let side = spec.side;
    let bg: f32 = rng.random_range(0.0..0.3);
    let mut px = vec![bg; side * side];
    for p in placed.iter_mut() {
        p.level = rng.random_range(0.65..1.0);
        let (x0, y0, x1, y1) = p.bounds(side, 1.0);
        for y in y0..y1 {
            for x in x0..x1 {
                let cov = p.coverage(x, y);
                if cov > 0.0 {
                    let v = &mut px[y * side + x];
                    *v = *v * (1.0 - cov) + p.level * cov;
                }
            }
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise as f32).expect("finite noise");
        px.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    let bytes: Vec<u8> = px.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let image = Image::from_gray_bytes(side, side, &bytes)?;
    let instances = placed.iter().map(Placed::instance).collect();
    Ok((Scene { image, instances }, placed))
}

/// Render one scene. Placement gives up on an instance after
/// [`PLACEMENT_RETRIES`] rejected draws, so scenes may hold fewer instances
/// than requested.
pub fn render_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    render_placed(spec, seed).map(|(s, _)| s)
}

/// Seed of scene `index` in a dataset with base seed `base`.
pub fn scene_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub count: usize,
    pub spec: SceneSpec,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATION_FILE: &str = "annotations.jsonl";

pub fn image_name(index: usize) -> String {
    format!("images/{:06}.pgm", index)
}

/// Write `n` scenes under `out`: `images/*.pgm`, `annotations.jsonl` and
/// `manifest.json`. With `n == 0` only the manifest is written.
pub fn generate_dataset(spec: &SceneSpec, n: usize, out: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    if n > 0 {
        let dir = out.join("images");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut lines = Vec::with_capacity(n);
        for i in 0..n {
            let scene = render_scene(spec, scene_seed(spec.seed, i))?;
            let name = image_name(i);
            scene.image.save_pgm(&out.join(&name))?;
            lines.push(AnnotationLine { image: name, instances: scene.instances });
        }
        write_annotations(&out.join(ANNOTATION_FILE), &lines)?;
    }
    let manifest = DatasetManifest { version: DATASET_VERSION, count: n, spec: spec.clone() };
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), line: e.line(), msg: e.to_string() })?;
    if m.version != DATASET_VERSION {
        return Err(Error::Config(format!("dataset version {} (expected {})", m.version, DATASET_VERSION)));
    }
    Ok(m)
}

/// Rebuild a dataset from its manifest into `out`.
pub fn regenerate(manifest: &Path, out: &Path) -> Result<DatasetManifest> {
    let m = read_manifest(manifest)?;
    generate_dataset(&m.spec, m.count, out)
}

/// Indicator bin pair of each instance under central points.
pub fn bin_pairs(instances: &[TextInstance], side: usize, n_bins: usize) -> Vec<(usize, usize)> {
    instances
        .iter()
        .map(|t| {
            let c = central_point(&t.polygon);
            (quantize(c[0], side as f64, n_bins), quantize(c[1], side as f64, n_bins))
        })
        .collect()
}
