//! Token sequences for the two decoding stages.
//!
//! One flat id space serves both stages: coordinate bins occupy
//! `[0, n_bins)`, characters `[n_bins, n_bins + n_cls)`, then PAD, SOS, EOS.
//! The location sequence is `SOS x1 y1 … xN yN EOS`; each instance's
//! recognition row holds `K + 1` targets (characters, EOS, PAD fill).

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{indicator, Point, PointMode};

static CLAMPED_COORDS: AtomicU64 = AtomicU64::new(0);
static UNPAIRED_TOKENS: AtomicU64 = AtomicU64::new(0);

/// Coordinates clamped into range by [`quantize`] since process start.
pub fn clamped_coordinates() -> u64 {
    CLAMPED_COORDS.load(Ordering::Relaxed)
}

/// Unpaired trailing coordinate tokens dropped by [`parse`] since process start.
pub fn unpaired_tokens() -> u64 {
    UNPAIRED_TOKENS.load(Ordering::Relaxed)
}

/// The 97-class English charset: printable ASCII (space through `~`) plus
/// the degree and euro signs.
pub fn default_charset() -> Vec<char> {
    let mut cs: Vec<char> = (0x20u8..=0x7e).map(char::from).collect();
    cs.push('°');
    cs.push('€');
    cs
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Token {
    Bin(usize),
    Char(char),
    Pad,
    Sos,
    Eos,
}

#[derive(Clone, Debug)]
pub struct Vocab {
    n_bins: usize,
    charset: Vec<char>,
    index: BTreeMap<char, usize>,
}

impl Vocab {
    pub fn new(n_bins: usize, charset: Vec<char>) -> Result<Self> {
        if n_bins < 2 {
            return Err(Error::invalid("n_bins must be at least 2"));
        }
        let mut index = BTreeMap::new();
        for (i, &c) in charset.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(Error::invalid(format!("duplicate character {:?} in charset", c)));
            }
        }
        Ok(Self { n_bins, charset, index })
    }

    pub fn with_default_charset(n_bins: usize) -> Self {
        Self::new(n_bins, default_charset()).expect("default charset is valid")
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn n_cls(&self) -> usize {
        self.charset.len()
    }

    pub fn charset(&self) -> &[char] {
        &self.charset
    }

    pub fn size(&self) -> usize {
        self.n_bins + self.charset.len() + 3
    }

    /// Size of the recognition sub-dictionary (characters plus specials).
    pub fn recognition_size(&self) -> usize {
        self.charset.len() + 3
    }

    pub fn pad(&self) -> usize {
        self.n_bins + self.charset.len()
    }

    pub fn sos(&self) -> usize {
        self.pad() + 1
    }

    pub fn eos(&self) -> usize {
        self.pad() + 2
    }

    pub fn char_range(&self) -> std::ops::Range<usize> {
        self.n_bins..self.n_bins + self.charset.len()
    }

    pub fn is_bin(&self, id: usize) -> bool {
        id < self.n_bins
    }

    pub fn char_id(&self, c: char) -> Option<usize> {
        self.index.get(&c).map(|i| self.n_bins + i)
    }

    pub fn encode(&self, t: Token) -> Option<usize> {
        match t {
            Token::Bin(b) if b < self.n_bins => Some(b),
            Token::Bin(_) => None,
            Token::Char(c) => self.char_id(c),
            Token::Pad => Some(self.pad()),
            Token::Sos => Some(self.sos()),
            Token::Eos => Some(self.eos()),
        }
    }

    pub fn decode(&self, id: usize) -> Option<Token> {
        if id < self.n_bins {
            Some(Token::Bin(id))
        } else if id < self.pad() {
            Some(Token::Char(self.charset[id - self.n_bins]))
        } else if id == self.pad() {
            Some(Token::Pad)
        } else if id == self.sos() {
            Some(Token::Sos)
        } else if id == self.eos() {
            Some(Token::Eos)
        } else {
            None
        }
    }

    /// Keep only characters the vocabulary can express.
    pub fn strip(&self, s: &str) -> String {
        s.chars().filter(|c| self.index.contains_key(c)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextInstance {
    pub polygon: Vec<Point>,
    pub transcript: String,
    #[serde(default)]
    pub dont_care: bool,
}

impl TextInstance {
    pub fn validate(&self) -> Result<()> {
        if self.polygon.len() < 4 || self.polygon.len() % 2 != 0 {
            return Err(Error::invalid(format!(
                "polygon needs an even count of at least 4 points, got {}",
                self.polygon.len()
            )));
        }
        if self.polygon.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::invalid("polygon has non-finite coordinates"));
        }
        Ok(())
    }
}

/// Training target for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    pub iad_tokens: Vec<usize>,
    pub prd_targets: Vec<Vec<usize>>,
    /// Indices into the caller's instance list, in sequence order.
    pub permutation: Vec<usize>,
    /// Indicator points (pixels) in sequence order; empty for NPTS.
    pub points: Vec<Point>,
    pub image_side: f64,
    pub npts: bool,
}

impl EncodedSample {
    pub fn n_instances(&self) -> usize {
        self.prd_targets.len()
    }

    /// Coordinate tokens `(x, y)` per instance.
    pub fn coord_pairs(&self) -> Vec<(usize, usize)> {
        if self.npts {
            return Vec::new();
        }
        self.iad_tokens[1..self.iad_tokens.len() - 1]
            .chunks(2)
            .map(|c| (c[0], c[1]))
            .collect()
    }

    /// The sample viewed as a perfectly confident decoder output.
    pub fn as_decoded(&self, vocab: &Vocab) -> RawDecode {
        let iad_tokens = self.iad_tokens[1..].to_vec();
        let rows: Vec<Vec<usize>> = self
            .prd_targets
            .iter()
            .map(|r| {
                let end = r.iter().position(|&t| t == vocab.eos()).map(|p| p + 1).unwrap_or(r.len());
                r[..end].to_vec()
            })
            .collect();
        RawDecode {
            iad_probs: vec![1.0; iad_tokens.len()],
            iad_tokens,
            row_probs: rows.iter().map(|r| vec![1.0; r.len()]).collect(),
            rows,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BuildConfig {
    pub point_mode: PointMode,
    pub max_chars: usize,
    pub max_instances: usize,
    pub image_side: f64,
    pub n_bins: usize,
}

/// `round(coord / side * (n_bins - 1))`, clamped into range.
pub fn quantize(coord: f64, side: f64, n_bins: usize) -> usize {
    let c = if coord < 0.0 || coord > side || !coord.is_finite() {
        CLAMPED_COORDS.fetch_add(1, Ordering::Relaxed);
        if coord.is_finite() {
            coord.clamp(0.0, side)
        } else {
            0.0
        }
    } else {
        coord
    };
    let b = (c / side * (n_bins - 1) as f64).round();
    (b as usize).min(n_bins - 1)
}

pub fn dequantize(bin: usize, side: f64, n_bins: usize) -> Result<f64> {
    if bin >= n_bins {
        return Err(Error::invalid(format!("bin {} outside [0, {})", bin, n_bins)));
    }
    Ok(bin as f64 / (n_bins - 1) as f64 * side)
}

/// Instances usable as supervision, paired with their original index.
pub fn usable_instances(instances: &[TextInstance], vocab: &Vocab) -> Vec<(usize, String)> {
    instances
        .iter()
        .enumerate()
        .filter(|(_, inst)| !inst.dont_care)
        .filter_map(|(i, inst)| {
            let t = vocab.strip(&inst.transcript);
            (!t.is_empty()).then_some((i, t))
        })
        .collect()
}

fn seeded_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

fn recognition_row(vocab: &Vocab, transcript: &str, k: usize) -> Vec<usize> {
    let mut row: Vec<usize> = transcript.chars().take(k).filter_map(|c| vocab.char_id(c)).collect();
    row.push(vocab.eos());
    row.resize(k + 1, vocab.pad());
    row
}

/// Build the location sequence and recognition grid with a seeded random
/// instance order.
pub fn build(instances: &[TextInstance], vocab: &Vocab, cfg: &BuildConfig, order_seed: u64) -> Result<EncodedSample> {
    let usable = usable_instances(instances, vocab);
    let order = seeded_order(usable.len(), order_seed);
    build_ordered(instances, vocab, cfg, &order, order_seed)
}

/// Build with an explicit order over the usable instances (as returned by
/// [`usable_instances`]).
pub fn build_ordered(
    instances: &[TextInstance],
    vocab: &Vocab,
    cfg: &BuildConfig,
    order: &[usize],
    point_seed: u64,
) -> Result<EncodedSample> {
    let usable = usable_instances(instances, vocab);
    if usable.is_empty() {
        return Err(Error::invalid("no valid text instances"));
    }
    if order.len() != usable.len() {
        return Err(Error::invalid("instance order does not cover the usable instances"));
    }
    let mut iad = vec![vocab.sos()];
    let mut rows = Vec::new();
    let mut perm = Vec::new();
    let mut points = Vec::new();
    for &u in order.iter().take(cfg.max_instances) {
        let (orig, ref text) = usable[u];
        let inst = &instances[orig];
        inst.validate()?;
        let p = indicator(&inst.polygon, cfg.point_mode, point_seed.wrapping_add(orig as u64));
        iad.push(quantize(p[0], cfg.image_side, cfg.n_bins));
        iad.push(quantize(p[1], cfg.image_side, cfg.n_bins));
        rows.push(recognition_row(vocab, text, cfg.max_chars));
        perm.push(orig);
        points.push(p);
    }
    iad.push(vocab.eos());
    Ok(EncodedSample {
        iad_tokens: iad,
        prd_targets: rows,
        permutation: perm,
        points,
        image_side: cfg.image_side,
        npts: false,
    })
}

/// Transcription-only variant: one placeholder slot (the SOS id) per instance.
pub fn build_npts(instances: &[TextInstance], vocab: &Vocab, cfg: &BuildConfig, order_seed: u64) -> Result<EncodedSample> {
    let mut s = build(instances, vocab, cfg, order_seed)?;
    to_npts(&mut s, vocab);
    Ok(s)
}

pub fn to_npts(s: &mut EncodedSample, vocab: &Vocab) {
    let n = s.prd_targets.len();
    let mut iad = vec![vocab.sos(); n + 1];
    iad.push(vocab.eos());
    s.iad_tokens = iad;
    s.points.clear();
    s.npts = true;
}

/// Greedy decoder output before interpretation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawDecode {
    /// Generated location tokens after SOS, through EOS when emitted.
    pub iad_tokens: Vec<usize>,
    pub iad_probs: Vec<f64>,
    /// Generated recognition tokens per instance, through EOS when emitted.
    pub rows: Vec<Vec<usize>>,
    pub row_probs: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<Point>,
    pub transcript: String,
    pub score: f64,
}

/// Per-instance location tokens and their likelihoods.
pub fn location_groups(raw: &RawDecode, vocab: &Vocab, npts: bool) -> Vec<(Vec<usize>, Vec<f64>)> {
    let per = if npts { 1 } else { 2 };
    let mut toks = Vec::new();
    let mut probs = Vec::new();
    let start = usize::from(raw.iad_tokens.first() == Some(&vocab.sos()) && !npts);
    for (i, &t) in raw.iad_tokens.iter().enumerate().skip(start) {
        if t == vocab.eos() {
            break;
        }
        let ok = if npts { t == vocab.sos() } else { vocab.is_bin(t) };
        if !ok {
            continue;
        }
        toks.push(t);
        probs.push(raw.iad_probs.get(i).copied().unwrap_or(0.0));
    }
    let complete = toks.len() / per * per;
    if complete < toks.len() {
        UNPAIRED_TOKENS.fetch_add((toks.len() - complete) as u64, Ordering::Relaxed);
        log::warn!("dropping {} unpaired coordinate token(s)", toks.len() - complete);
    }
    toks[..complete]
        .chunks(per)
        .zip(probs[..complete].chunks(per))
        .map(|(t, p)| (t.to_vec(), p.to_vec()))
        .collect()
}

/// Split decoder output into scored predictions.
pub fn parse(raw: &RawDecode, vocab: &Vocab, side: f64, npts: bool) -> Vec<Prediction> {
    location_groups(raw, vocab, npts)
        .into_iter()
        .enumerate()
        .map(|(i, (toks, probs))| {
            let point = (!npts).then(|| {
                [
                    dequantize(toks[0], side, vocab.n_bins()).expect("bin checked"),
                    dequantize(toks[1], side, vocab.n_bins()).expect("bin checked"),
                ]
            });
            let row = raw.rows.get(i).map(Vec::as_slice).unwrap_or(&[]);
            let rp = raw.row_probs.get(i).map(Vec::as_slice).unwrap_or(&[]);
            let mut transcript = String::new();
            let mut sum: f64 = probs.iter().sum();
            let mut count = probs.len();
            for (j, &t) in row.iter().enumerate() {
                sum += rp.get(j).copied().unwrap_or(0.0);
                count += 1;
                match vocab.decode(t) {
                    Some(Token::Char(c)) => transcript.push(c),
                    _ => break,
                }
            }
            Prediction { point, transcript, score: (sum / count as f64).clamp(0.0, 1.0) }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LoopCounts {
    /// Single-stream decoding, `(2 + K) N + 1`.
    pub joint: usize,
    /// Location stream plus parallel recognition, `2N + K + 1`.
    pub split: usize,
    /// Zero when `split >= joint`, which happens only for `N = 0`.
    pub reduction: usize,
    pub reduction_rate: f64,
}

pub fn loop_counts(n: usize, k: usize) -> LoopCounts {
    let joint = (2 + k) * n + 1;
    let split = 2 * n + k + 1;
    LoopCounts {
        joint,
        split,
        reduction: joint.saturating_sub(split),
        reduction_rate: joint.saturating_sub(split) as f64 / joint as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg(side: f64, k: usize) -> BuildConfig {
        BuildConfig { point_mode: PointMode::Central, max_chars: k, max_instances: 60, image_side: side, n_bins: 1000 }
    }

    fn square(cx: f64, cy: f64, h: f64, text: &str) -> TextInstance {
        TextInstance {
            polygon: vec![[cx - h, cy - h], [cx + h, cy - h], [cx + h, cy + h], [cx - h, cy + h]],
            transcript: text.into(),
            dont_care: false,
        }
    }

    #[test]
    fn vocab_layout() {
        let v = Vocab::with_default_charset(1000);
        assert_eq!(v.n_cls(), 97);
        assert_eq!(v.recognition_size(), 100);
        assert_eq!(v.size(), 1100);
        assert_eq!(v.decode(v.eos()), Some(Token::Eos));
        assert_eq!(v.encode(Token::Char('A')), Some(1000 + 33));
        assert!(v.decode(1100).is_none());
        assert!(Vocab::new(10, vec!['a', 'a']).is_err());
    }

    #[test]
    fn vocab_is_a_bijection() {
        let v = Vocab::with_default_charset(50);
        for id in 0..v.size() {
            assert_eq!(v.encode(v.decode(id).unwrap()), Some(id));
        }
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(0.0, 800.0, 1000), 0);
        assert_eq!(quantize(800.0, 800.0, 1000), 999);
        assert_eq!(quantize(400.0, 800.0, 1000), 500);
        let before = clamped_coordinates();
        assert_eq!(quantize(-3.0, 800.0, 1000), 0);
        assert_eq!(quantize(900.0, 800.0, 1000), 999);
        assert_eq!(clamped_coordinates() - before, 2);
    }

    #[test]
    fn dequantize_examples() {
        assert_eq!(dequantize(0, 800.0, 1000).unwrap(), 0.0);
        assert_eq!(dequantize(999, 800.0, 1000).unwrap(), 800.0);
        assert!(dequantize(1000, 800.0, 1000).is_err());
    }

    #[test]
    fn quantization_error_bound_exhaustive() {
        let bound = 800.0 / (2.0 * 999.0);
        let worst = (0..=800)
            .map(|x| (dequantize(quantize(x as f64, 800.0, 1000), 800.0, 1000).unwrap() - x as f64).abs())
            .fold(0.0, f64::max);
        assert!(worst <= bound + 1e-9);
        assert!(worst <= 0.4005);
    }

    #[test]
    fn single_instance_layout() {
        let v = Vocab::with_default_charset(1000);
        let s = build(&[square(50.0, 50.0, 10.0, "AB")], &v, &cfg(100.0, 3), 0).unwrap();
        let b = quantize(50.0, 100.0, 1000);
        assert_eq!(s.iad_tokens, vec![v.sos(), b, b, v.eos()]);
        let a = v.char_id('A').unwrap();
        let bb = v.char_id('B').unwrap();
        assert_eq!(s.prd_targets, vec![vec![a, bb, v.eos(), v.pad()]]);
    }

    #[test]
    fn truncation_limits() {
        let v = Vocab::with_default_charset(1000);
        let many: Vec<TextInstance> = (0..61).map(|i| square(10.0 + i as f64 * 10.0, 50.0, 3.0, "x")).collect();
        let s = build(&many, &v, &cfg(800.0, 25), 1).unwrap();
        assert_eq!(s.n_instances(), 60);
        assert_eq!(s.iad_tokens.len(), 122);
        let long = "abcdefghijklmnopqrstuvwxyz0123";
        let s = build(&[square(50.0, 50.0, 5.0, long)], &v, &cfg(100.0, 25), 0).unwrap();
        let row = &s.prd_targets[0];
        assert_eq!(row.len(), 26);
        assert_eq!(row[25], v.eos());
        assert!(row[..25].iter().all(|&t| v.char_range().contains(&t)));
    }

    #[test]
    fn filtering_rules() {
        let v = Vocab::with_default_charset(1000);
        let mut dc = square(20.0, 20.0, 5.0, "skip");
        dc.dont_care = true;
        let insts = vec![dc, square(60.0, 60.0, 5.0, "\u{4e2d}"), square(40.0, 40.0, 5.0, "o\u{4e2d}k")];
        let s = build(&insts, &v, &cfg(100.0, 25), 0).unwrap();
        assert_eq!(s.permutation, vec![2]);
        assert_eq!(s.prd_targets[0][..2], [v.char_id('o').unwrap(), v.char_id('k').unwrap()]);
        assert!(build(&insts[..2], &v, &cfg(100.0, 25), 0).is_err());
    }

    #[test]
    fn npts_layout() {
        let v = Vocab::with_default_charset(1000);
        let insts = vec![square(20.0, 20.0, 5.0, "ab"), square(60.0, 60.0, 5.0, "cd")];
        let p = build(&insts, &v, &cfg(100.0, 25), 9).unwrap();
        let n = build_npts(&insts, &v, &cfg(100.0, 25), 9).unwrap();
        assert_eq!(n.iad_tokens.len(), 4);
        assert_eq!(n.iad_tokens, vec![v.sos(), v.sos(), v.sos(), v.eos()]);
        assert_eq!(n.prd_targets, p.prd_targets);
        let preds = parse(&n.as_decoded(&v), &v, 100.0, true);
        assert_eq!(preds.len(), 2);
        assert!(preds.iter().all(|p| p.point.is_none()));
    }

    #[test]
    fn parse_edge_cases() {
        let v = Vocab::with_default_charset(1000);
        let empty = RawDecode { iad_tokens: vec![v.eos()], iad_probs: vec![0.9], ..Default::default() };
        assert!(parse(&empty, &v, 100.0, false).is_empty());

        let before = unpaired_tokens();
        let odd = RawDecode {
            iad_tokens: vec![10, 20, 30, v.eos()],
            iad_probs: vec![1.0; 4],
            rows: vec![vec![v.char_id('a').unwrap(), v.eos()]],
            row_probs: vec![vec![1.0, 1.0]],
        };
        let preds = parse(&odd, &v, 100.0, false);
        assert_eq!(preds.len(), 1);
        assert_eq!(unpaired_tokens() - before, 1);
        assert_eq!(preds[0].score, 1.0);
        assert_eq!(preds[0].transcript, "a");
    }

    #[test]
    fn score_is_joint_mean() {
        let v = Vocab::with_default_charset(1000);
        let raw = RawDecode {
            iad_tokens: vec![1, 2, v.eos()],
            iad_probs: vec![0.5, 1.0, 1.0],
            rows: vec![vec![v.char_id('z').unwrap(), v.eos()]],
            row_probs: vec![vec![0.25, 0.25]],
        };
        let p = &parse(&raw, &v, 999.0, false)[0];
        assert!((p.score - 0.5).abs() < 1e-12);
        assert_eq!(p.point, Some([1.0, 2.0]));
    }

    #[test]
    fn loop_count_examples() {
        let lc = loop_counts(60, 25);
        assert_eq!((lc.joint, lc.split, lc.reduction), (1621, 146, 1475));
        assert_eq!(format!("{:.1}", lc.reduction_rate * 100.0), "91.0");
        let lc = loop_counts(1, 1);
        assert_eq!((lc.joint, lc.split, lc.reduction), (4, 4, 0));
        let lc = loop_counts(20, 25);
        assert_eq!((lc.joint, lc.split), (541, 66));
        let lc = loop_counts(0, 25);
        assert_eq!((lc.joint, lc.split, lc.reduction, lc.reduction_rate), (1, 26, 0, 0.0));
    }

    fn random_instances(rng: &mut ChaCha8Rng, v: &Vocab) -> Vec<TextInstance> {
        let n = rng.random_range(1..12);
        let mut out: Vec<TextInstance> = Vec::new();
        while out.len() < n {
            let cx = rng.random_range(10.0..790.0);
            let cy = rng.random_range(10.0..790.0);
            let len = rng.random_range(1..=25);
            let text: String = (0..len).map(|_| v.charset()[rng.random_range(0..v.n_cls())]).collect();
            out.push(square(cx, cy, rng.random_range(1.0..10.0), &text));
        }
        out
    }

    #[test]
    fn codec_round_trip_1000_samples() {
        let v = Vocab::with_default_charset(1000);
        let side = 800.0;
        let bound = side / (2.0 * 999.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for seed in 0..1000u64 {
            let insts = random_instances(&mut rng, &v);
            let s = build(&insts, &v, &cfg(side, 25), seed).unwrap();
            let preds = parse(&s.as_decoded(&v), &v, side, false);
            assert_eq!(preds.len(), s.n_instances());
            for (p, &orig) in preds.iter().zip(&s.permutation) {
                assert_eq!(p.transcript, insts[orig].transcript);
                let c = crate::geometry::central_point(&insts[orig].polygon);
                let pt = p.point.unwrap();
                assert!((pt[0] - c[0]).abs() <= bound + 1e-9 && (pt[1] - c[1]).abs() <= bound + 1e-9);
                assert_eq!(p.score, 1.0);
            }
        }
    }

    proptest! {
        #[test]
        fn shuffle_preserves_multiset(seed in any::<u64>(), n in 1usize..30) {
            let v = Vocab::with_default_charset(1000);
            let insts: Vec<TextInstance> = (0..n).map(|i| square(10.0 + 20.0 * i as f64, 50.0, 3.0, &format!("w{}", i))).collect();
            let s = build(&insts, &v, &cfg(800.0, 25), seed).unwrap();
            let mut p = s.permutation.clone();
            p.sort();
            prop_assert_eq!(p, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(s.iad_tokens.len(), 2 * n + 2);
            for row in &s.prd_targets {
                let e = row.iter().position(|&t| t == v.eos()).unwrap();
                prop_assert!(row[e + 1..].iter().all(|&t| t == v.pad()));
                prop_assert_eq!(row.iter().filter(|&&t| t == v.eos()).count(), 1);
            }
        }

        #[test]
        fn loop_reduction_identity(n in 1usize..500, k in 1usize..200) {
            let lc = loop_counts(n, k);
            prop_assert_eq!(lc.joint - lc.split, k * (n - 1));
        }
    }
}
