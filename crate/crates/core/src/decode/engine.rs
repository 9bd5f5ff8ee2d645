//! Graph-free incremental decoder over `f32` weights.

use std::ops::Range;

use crate::autodiff::Graph;
use crate::error::Result;
use crate::image::Image;
use crate::model::{Attn, Bound, DecoderStack, Linear, Norm, ParamId, Role, Weights};
use crate::tensor::{gemm, layer_norm_rows, MatMut, MatRef};

/// `out = x W[:, cols] + b[cols]` for `rows` rows of `x` with `W` of shape
/// `(din, ld)`.
fn matmul_cols(x: &[f32], rows: usize, w: &[f32], din: usize, ld: usize, cols: Range<usize>, out: &mut [f32]) {
    let n = cols.len();
    debug_assert_eq!(x.len(), rows * din);
    debug_assert_eq!(out.len(), rows * n);
    if rows == 1 {
        out.fill(0.0);
        for (i, &xi) in x.iter().enumerate() {
            let wr = &w[i * ld + cols.start..i * ld + cols.end];
            for (o, &wv) in out.iter_mut().zip(wr) {
                *o += xi * wv;
            }
        }
        return;
    }
    gemm(
        1.0,
        MatRef::dense(x, rows, din),
        MatRef::block(w, cols.start, din, n, ld),
        0.0,
        MatMut::dense(out, rows, n),
    );
}

/// Cached keys and values for one decoding stream.
#[derive(Clone, Debug, Default)]
pub struct StreamCache {
    k: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    len: usize,
}

impl StreamCache {
    pub fn new(layers: usize) -> Self {
        Self { k: vec![Vec::new(); layers], v: vec![Vec::new(); layers], len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Cross-attention keys and values for one decoder stack, per layer.
#[derive(Clone, Debug)]
struct MemoryKv {
    k: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

/// Encoded image with cross-attention projections precomputed.
#[derive(Clone, Debug)]
pub struct Memory {
    pub rows: usize,
    pub data: Vec<f32>,
    location: MemoryKv,
    recognition: Option<MemoryKv>,
}

impl Memory {
    fn kv(&self, role: Role) -> &MemoryKv {
        match (role, &self.recognition) {
            (Role::Recognition, Some(r)) => r,
            _ => &self.location,
        }
    }
}

pub struct Engine<'w> {
    pub w: &'w Weights<f32>,
    d: usize,
    heads: usize,
}

impl<'w> Engine<'w> {
    pub fn new(w: &'w Weights<f32>) -> Self {
        Self { w, d: w.config.d_model, heads: w.config.n_heads }
    }

    fn p(&self, id: ParamId) -> &[f32] {
        self.w.store.get(id).data()
    }

    fn linear(&self, l: &Linear, x: &[f32], rows: usize) -> Vec<f32> {
        let w = self.w.store.get(l.w);
        let (din, dout) = w.dims2();
        let mut out = vec![0.0; rows * dout];
        matmul_cols(x, rows, w.data(), din, dout, 0..dout, &mut out);
        let b = self.p(l.b);
        for r in out.chunks_mut(dout) {
            for (o, &bv) in r.iter_mut().zip(b) {
                *o += bv;
            }
        }
        out
    }

    fn norm(&self, n: &Norm, x: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; x.len()];
        layer_norm_rows(x, self.d, self.p(n.gamma), self.p(n.beta), &mut out);
        out
    }

    pub fn encode(&self, image: &Image) -> Result<Memory> {
        let mut g = Graph::<f32>::new();
        let p = Bound::frozen(&mut g, &self.w.store);
        let m = self.w.encode_image(&mut g, &p, image)?;
        let data = g.value(m).data().to_vec();
        let rows = data.len() / self.d;
        let location = self.memory_kv(&self.w.decoder, &data, rows);
        let recognition = self.w.prd_decoder.as_ref().map(|s| self.memory_kv(s, &data, rows));
        Ok(Memory { rows, data, location, recognition })
    }

    fn memory_kv(&self, stack: &DecoderStack, mem: &[f32], rows: usize) -> MemoryKv {
        let (k, v) = stack
            .layers
            .iter()
            .map(|l| (self.linear(&l.cross_attn.k, mem, rows), self.linear(&l.cross_attn.v, mem, rows)))
            .unzip();
        MemoryKv { k, v }
    }

    /// Input row for `token` at decoder position `pos`.
    pub fn token_row(&self, token: usize, pos: usize) -> Vec<f32> {
        let d = self.d;
        let e = &self.p(self.w.token_embed)[token * d..(token + 1) * d];
        let mut row = self.pos_row(pos).to_vec();
        row.iter_mut().zip(e).for_each(|(r, &v)| *r += v);
        row
    }

    pub fn pos_row(&self, pos: usize) -> &[f32] {
        let d = self.d;
        &self.p(self.w.dec_pos)[pos * d..(pos + 1) * d]
    }

    pub fn embedding_row(&self, token: usize) -> &[f32] {
        let d = self.d;
        &self.p(self.w.token_embed)[token * d..(token + 1) * d]
    }

    /// Advance every stream by one row. `x` holds one input row per stream;
    /// returns the final-normalized hidden rows.
    pub fn step(&self, role: Role, mem: &Memory, caches: &mut [&mut StreamCache], x: &[f32]) -> Vec<f32> {
        let d = self.d;
        let b = caches.len();
        debug_assert_eq!(x.len(), b * d);
        let stack = self.w.decoder_for(role);
        let kv = mem.kv(role);
        let mut x = x.to_vec();
        for (li, layer) in stack.layers.iter().enumerate() {
            let h = self.norm(&layer.ln1, &x);
            let a = self.self_attention(&layer.self_attn, li, &h, caches);
            add_in(&mut x, &self.linear(&layer.self_attn.o, &a, b));

            let h = self.norm(&layer.ln2, &x);
            let a = self.cross_attention(&layer.cross_attn, &h, b, &kv.k[li], &kv.v[li], mem.rows);
            add_in(&mut x, &self.linear(&layer.cross_attn.o, &a, b));

            let h = self.norm(&layer.ln3, &x);
            let mut f = self.linear(&layer.ffn.up, &h, b);
            f.iter_mut().for_each(|v| *v = v.max(0.0));
            add_in(&mut x, &self.linear(&layer.ffn.down, &f, b));
        }
        for c in caches.iter_mut() {
            c.len += 1;
        }
        self.norm(&stack.norm, &x)
    }

    fn self_attention(&self, attn: &Attn, layer: usize, h: &[f32], caches: &mut [&mut StreamCache]) -> Vec<f32> {
        let (d, heads) = (self.d, self.heads);
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let b = caches.len();
        let q = self.linear(&attn.q, h, b);
        let k = self.linear(&attn.k, h, b);
        let v = self.linear(&attn.v, h, b);
        let mut out = vec![0.0; b * d];
        let mut scores = Vec::new();
        for (s, cache) in caches.iter_mut().enumerate() {
            cache.k[layer].extend_from_slice(&k[s * d..(s + 1) * d]);
            cache.v[layer].extend_from_slice(&v[s * d..(s + 1) * d]);
            let (ck, cv) = (&cache.k[layer], &cache.v[layer]);
            let t = ck.len() / d;
            for hd in 0..heads {
                let qh = &q[s * d + hd * dh..s * d + (hd + 1) * dh];
                scores.clear();
                scores.extend((0..t).map(|j| {
                    let kj = &ck[j * d + hd * dh..j * d + (hd + 1) * dh];
                    qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale
                }));
                softmax_in_place(&mut scores);
                let o = &mut out[s * d + hd * dh..s * d + (hd + 1) * dh];
                for (j, &pj) in scores.iter().enumerate() {
                    let vj = &cv[j * d + hd * dh..j * d + (hd + 1) * dh];
                    for (oi, &vv) in o.iter_mut().zip(vj) {
                        *oi += pj * vv;
                    }
                }
            }
        }
        out
    }

    fn cross_attention(&self, attn: &Attn, h: &[f32], b: usize, mk: &[f32], mv: &[f32], m: usize) -> Vec<f32> {
        let (d, heads) = (self.d, self.heads);
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let q = self.linear(&attn.q, h, b);
        let mut out = vec![0.0; b * d];
        let mut scores = vec![0.0; b * m];
        for hd in 0..heads {
            gemm(
                scale,
                MatRef::block(&q, hd * dh, b, dh, d),
                MatRef::block(mk, hd * dh, m, dh, d).t(),
                0.0,
                MatMut::dense(&mut scores, b, m),
            );
            scores.chunks_mut(m).for_each(softmax_in_place);
            gemm(
                1.0,
                MatRef::dense(&scores, b, m),
                MatRef::block(mv, hd * dh, m, dh, d),
                0.0,
                MatMut::block(&mut out, hd * dh, b, dh, d),
            );
        }
        out
    }

    /// Output scores for the concatenation of `ranges`, per row.
    pub fn head(&self, h: &[f32], rows: usize, ranges: &[Range<usize>]) -> Vec<f32> {
        let w = self.w.store.get(self.w.head.w);
        let (din, v) = w.dims2();
        let bias = self.p(self.w.head.b);
        let width: usize = ranges.iter().map(|r| r.len()).sum();
        let mut out = vec![0.0; rows * width];
        let mut col = 0;
        for r in ranges {
            let mut part = vec![0.0; rows * r.len()];
            matmul_cols(h, rows, w.data(), din, v, r.clone(), &mut part);
            for row in 0..rows {
                let dst = &mut out[row * width + col..row * width + col + r.len()];
                dst.copy_from_slice(&part[row * r.len()..(row + 1) * r.len()]);
                dst.iter_mut().zip(&bias[r.clone()]).for_each(|(o, &bv)| *o += bv);
            }
            col += r.len();
        }
        out
    }
}

fn add_in(x: &mut [f32], y: &[f32]) {
    x.iter_mut().zip(y).for_each(|(a, &b)| *a += b);
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    let inv = 1.0 / s;
    row.iter_mut().for_each(|v| *v *= inv);
}
