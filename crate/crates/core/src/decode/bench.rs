use std::time::Instant;

use serde::Serialize;

use super::{DecodeConfig, Engine, Forcing, Memory, StreamCache};
use crate::error::Result;
use crate::image::Image;
use crate::model::{Role, Weights};
use crate::seqcodec::loop_counts;

/// Per-image loop accounting and decode wall-clock. Times cover the decoder
/// only; `encode_ms` is shared by both modes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRecord {
    pub n_instances: usize,
    pub joint_loops: usize,
    pub split_loops: usize,
    pub predicted_joint: usize,
    pub predicted_split: usize,
    pub joint_ms: f64,
    pub split_ms: f64,
    pub encode_ms: f64,
}

impl BenchRecord {
    pub fn speedup(&self) -> f64 {
        self.joint_ms / self.split_ms
    }
}

/// Single-stream decoding of `n` instances as `x, y, c1..cK` blocks, one
/// token per loop, with the same weights. Positions past the learned table
/// reuse its last row. Returns the number of loops.
pub fn bench_joint(engine: &Engine<'_>, mem: &Memory, n: usize, k: usize) -> usize {
    let v = engine.w.config.vocab();
    let max_pos = engine.w.config.max_positions();
    let total = (2 + k) * n + 1;
    let coords = [0..v.n_bins(), v.eos()..v.eos() + 1];
    let chars = [v.char_range(), v.eos()..v.eos() + 1];
    let mut cache = StreamCache::new(engine.w.config.n_decoder_layers);
    let mut prev = v.sos();
    for step in 0..total {
        let x = engine.token_row(prev, step.min(max_pos - 1));
        let h = engine.step(Role::Location, mem, &mut [&mut cache], &x);
        let slot = step + 1;
        let ranges: &[_] = if slot < total && (slot - 1) % (2 + k) < 2 { &coords } else { &chars };
        let scores = engine.head(&h, 1, ranges);
        let (mut best, mut bs) = (0, f32::NEG_INFINITY);
        let ids = ranges.iter().flat_map(|r| r.clone());
        for (id, &s) in ids.zip(&scores) {
            if s > bs {
                (best, bs) = (id, s);
            }
        }
        prev = best;
    }
    total
}

/// Decode `image` in split mode and in the single-stream emulation with the
/// same instance count, timing both.
pub fn bench(weights: &Weights<f32>, image: &Image, cfg: &DecodeConfig, forcing: &Forcing) -> Result<BenchRecord> {
    let engine = Engine::new(weights);
    let t = Instant::now();
    let mem = engine.encode(image)?;
    let encode_ms = t.elapsed().as_secs_f64() * 1e3;

    let t = Instant::now();
    let decoded = engine.decode_memory(&mem, cfg, forcing);
    let split_ms = t.elapsed().as_secs_f64() * 1e3;
    let per = if cfg.npts { 1 } else { 2 };
    let n = (decoded.raw.iad_tokens.len() - 1) / per;
    let k = cfg.max_chars.min(weights.config.max_chars);

    let t = Instant::now();
    let joint_loops = bench_joint(&engine, &mem, n, k);
    let joint_ms = t.elapsed().as_secs_f64() * 1e3;

    let predicted = loop_counts(n, k);
    Ok(BenchRecord {
        n_instances: n,
        joint_loops,
        split_loops: decoded.loops(),
        predicted_joint: predicted.joint,
        predicted_split: predicted.split,
        joint_ms,
        split_ms,
        encode_ms,
    })
}
