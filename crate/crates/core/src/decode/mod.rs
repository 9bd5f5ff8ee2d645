//! Greedy inference: location loop, parallel recognition with early end,
//! scoring and confidence filtering.

mod bench;
mod engine;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointMode;
use crate::image::Image;
use crate::model::{Role, TransmissionPolicy, Weights};
use crate::seqcodec::{parse, Prediction, RawDecode};

pub use bench::{bench, bench_joint, BenchRecord};
pub use engine::{Engine, Memory, StreamCache};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub max_instances: usize,
    pub max_chars: usize,
    pub threshold: f64,
    pub point_mode: PointMode,
    pub npts: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { max_instances: 60, max_chars: 25, threshold: 0.0, point_mode: PointMode::Central, npts: false }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if self.max_instances == 0 || self.max_chars == 0 {
            return Err(Error::Config("max_instances and max_chars must be positive".into()));
        }
        Ok(())
    }
}

/// Optional constraints that pin decode lengths, for benchmarking weights
/// that have not learned when to stop.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Forcing {
    /// Emit exactly this many instances.
    pub instances: Option<usize>,
    /// Emit exactly `lengths[i]` characters for instance i (capped at K).
    pub lengths: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IadResult {
    /// Generated tokens after SOS, through EOS.
    pub tokens: Vec<usize>,
    pub probs: Vec<f64>,
    /// Final hidden state of every step, `(loops, d)`.
    pub hidden: Vec<f32>,
    pub loops: usize,
}

impl IadResult {
    pub fn n_instances(&self, per: usize) -> usize {
        (self.tokens.len() - 1) / per
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrdResult {
    pub rows: Vec<Vec<usize>>,
    pub probs: Vec<Vec<f64>>,
    pub loops: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub raw: RawDecode,
    /// Scored and filtered, in descending score order.
    pub predictions: Vec<Prediction>,
    pub iad_loops: usize,
    pub prd_loops: usize,
}

impl Decoded {
    pub fn loops(&self) -> usize {
        self.iad_loops + self.prd_loops
    }
}

/// Argmax over permitted entries and its probability under a softmax
/// restricted to them. `ids[j]` names entry j of `scores`.
fn pick(scores: &[f32], ids: &[usize], permitted: impl Fn(usize) -> bool) -> (usize, f64) {
    let mut best = None::<(usize, f32)>;
    for (j, &s) in scores.iter().enumerate() {
        if permitted(ids[j]) && best.is_none_or(|(_, b)| s > b) {
            best = Some((j, s));
        }
    }
    let (j, mx) = best.expect("at least one permitted token");
    let z: f64 = scores
        .iter()
        .enumerate()
        .filter(|&(k, _)| permitted(ids[k]))
        .map(|(_, &s)| ((s - mx) as f64).exp())
        .sum();
    (ids[j], 1.0 / z)
}

impl Engine<'_> {
    fn vocab(&self) -> crate::seqcodec::Vocab {
        self.w.config.vocab()
    }

    /// Greedy location pass. Coordinates come in (x, y) pairs; EOS is only
    /// accepted at pair boundaries and forced after `max_instances` pairs.
    pub fn run_iad(&self, mem: &Memory, cfg: &DecodeConfig, forcing: &Forcing) -> IadResult {
        let v = self.vocab();
        let d = self.w.config.d_model;
        let cap = cfg.max_instances.min(self.w.config.max_instances);
        let per = if cfg.npts { 1 } else { 2 };
        let ranges = if cfg.npts { vec![v.sos()..v.sos() + 1, v.eos()..v.eos() + 1] } else { vec![0..v.n_bins(), v.eos()..v.eos() + 1] };
        let ids: Vec<usize> = ranges.iter().flat_map(|r| r.clone()).collect();
        let mut cache = StreamCache::new(self.w.config.n_decoder_layers);
        let mut tokens = Vec::new();
        let mut probs = Vec::new();
        let mut hidden = Vec::new();
        let mut prev = v.sos();
        let mut loops = 0;
        loop {
            let x = self.token_row(prev, loops);
            let h = self.step(Role::Location, mem, &mut [&mut cache], &x);
            loops += 1;
            hidden.extend_from_slice(&h);
            let scores = self.head(&h, 1, &ranges);
            let emitted = tokens.len();
            let boundary = emitted % per == 0;
            let done = emitted / per;
            let target = forcing.instances.map(|n| n.min(cap));
            let must_end = boundary && (done >= cap || target == Some(done));
            let may_end = boundary && target.is_none_or(|n| done >= n);
            let (tok, p) = pick(&scores, &ids, |t| if t == v.eos() { may_end } else { !must_end });
            tokens.push(tok);
            probs.push(p);
            if tok == v.eos() {
                break;
            }
            prev = tok;
        }
        debug_assert_eq!(hidden.len(), loops * d);
        IadResult { tokens, probs, hidden, loops }
    }

    /// Recognition queries per transmission policy: hidden state of the step
    /// that consumed each coordinate token, plus that token's embedding.
    pub fn transmit(&self, iad: &IadResult, npts: bool) -> Vec<Vec<f32>> {
        let d = self.w.config.d_model;
        let per = if npts { 1 } else { 2 };
        let n = iad.n_instances(per);
        let policy = self.w.config.transmission;
        (0..n)
            .map(|i| {
                let mut q = Vec::with_capacity(per * d);
                for j in 0..per {
                    let step = 1 + per * i + j;
                    let tok = iad.tokens[step - 1];
                    let feat = &iad.hidden[step * d..(step + 1) * d];
                    let emb = self.embedding_row(tok);
                    q.extend(feat.iter().zip(emb).map(|(&f, &e)| match policy {
                        TransmissionPolicy::TokenFeat => f + e,
                        TransmissionPolicy::Token => e,
                        TransmissionPolicy::Feat => f,
                    }));
                }
                q
            })
            .collect()
    }

    /// All instances advance one character per loop; finished instances
    /// leave the batch and the loop stops when none remain or after K loops.
    pub fn run_prd(&self, mem: &Memory, queries: &[Vec<f32>], cfg: &DecodeConfig, forcing: &Forcing) -> PrdResult {
        let n = queries.len();
        let mut rows = vec![Vec::new(); n];
        let mut probs = vec![Vec::new(); n];
        if n == 0 {
            return PrdResult { rows, probs, loops: 0 };
        }
        let v = self.vocab();
        let d = self.w.config.d_model;
        let k = cfg.max_chars.min(self.w.config.max_chars);
        let q = queries[0].len() / d;
        let ranges = vec![v.char_range(), v.eos()..v.eos() + 1];
        let ids: Vec<usize> = ranges.iter().flat_map(|r| r.clone()).collect();
        let mut caches: Vec<StreamCache> = (0..n).map(|_| StreamCache::new(self.w.config.n_decoder_layers)).collect();
        let mut active: Vec<usize> = (0..n).collect();

        // Query rows all but the last are prefilled; the last one yields c1.
        for j in 0..q - 1 {
            let x: Vec<f32> = active.iter().flat_map(|&i| add_rows(&queries[i][j * d..(j + 1) * d], self.pos_row(j))).collect();
            let mut cs: Vec<&mut StreamCache> = caches.iter_mut().collect();
            self.step(Role::Recognition, mem, &mut cs, &x);
        }
        let mut x: Vec<f32> = active
            .iter()
            .flat_map(|&i| add_rows(&queries[i][(q - 1) * d..q * d], self.pos_row(q - 1)))
            .collect();
        let mut loops = 0;
        while !active.is_empty() && loops < k {
            let mut cs: Vec<&mut StreamCache> = caches
                .iter_mut()
                .enumerate()
                .filter(|(i, _)| active.binary_search(i).is_ok())
                .map(|(_, c)| c)
                .collect();
            let h = self.step(Role::Recognition, mem, &mut cs, &x);
            loops += 1;
            let scores = self.head(&h, active.len(), &ranges);
            let width = ids.len();
            let mut next_active = Vec::new();
            let mut next_x = Vec::new();
            for (r, &i) in active.iter().enumerate() {
                let emitted = rows[i].len();
                let len = forcing.lengths.as_ref().map(|l| l.get(i).copied().unwrap_or(0).min(k));
                let (tok, p) = pick(&scores[r * width..(r + 1) * width], &ids, |t| match len {
                    Some(l) => (t == v.eos()) == (emitted >= l),
                    None => true,
                });
                rows[i].push(tok);
                probs[i].push(p);
                if tok != v.eos() {
                    next_active.push(i);
                    next_x.extend(self.token_row(tok, q + emitted));
                }
            }
            active = next_active;
            x = next_x;
        }
        PrdResult { rows, probs, loops }
    }

    pub fn decode_memory(&self, mem: &Memory, cfg: &DecodeConfig, forcing: &Forcing) -> Decoded {
        let iad = self.run_iad(mem, cfg, forcing);
        let queries = self.transmit(&iad, cfg.npts);
        let prd = self.run_prd(mem, &queries, cfg, forcing);
        let raw = RawDecode { iad_tokens: iad.tokens, iad_probs: iad.probs, rows: prd.rows, row_probs: prd.probs };
        let preds = parse(&raw, &self.vocab(), self.w.config.image_side as f64, cfg.npts);
        Decoded { predictions: filter(preds, cfg.threshold), raw, iad_loops: iad.loops, prd_loops: prd.loops }
    }

    pub fn decode_image(&self, image: &Image, cfg: &DecodeConfig) -> Result<Decoded> {
        cfg.validate()?;
        let mem = self.encode(image)?;
        Ok(self.decode_memory(&mem, cfg, &Forcing::default()))
    }
}

fn add_rows(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Keep predictions scoring at least `threshold`, highest score first; ties
/// keep their input order.
pub fn filter(mut preds: Vec<Prediction>, threshold: f64) -> Vec<Prediction> {
    preds.retain(|p| p.score >= threshold);
    preds.sort_by(|a, b| b.score.total_cmp(&a.score));
    preds
}

/// Decode one image with fresh engine state.
pub fn decode(weights: &Weights<f32>, image: &Image, cfg: &DecodeConfig) -> Result<Decoded> {
    Engine::new(weights).decode_image(image, cfg)
}

#[cfg(test)]
mod tests;
