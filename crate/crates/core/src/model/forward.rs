use std::ops::Index;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::seqcodec::EncodedSample;
use crate::tensor::{Scalar, Tensor};

use super::{ParamId, ParamStore, Role, TransmissionPolicy, Weights};

/// Graph handles for every array of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    /// Bind every array as a differentiable leaf.
    pub fn trainable<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>) -> Self {
        Self::with(g, store, |_| true)
    }

    /// Bind every array as a constant.
    pub fn frozen<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>) -> Self {
        Self::with(g, store, |_| false)
    }

    pub fn with<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = store
            .iter()
            .map(|(_, name, t)| if trainable(name) { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Self { vars }
    }

    /// Reuse handles already on a graph, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Fixed 2-D sinusoidal encoding for an `h x w` grid, row-major, `(h w, d)`.
/// The first half of each row encodes y, the second half x.
pub fn sinusoidal_2d<T: Scalar>(h: usize, w: usize, d: usize) -> Tensor<T> {
    let half = d / 2;
    let quarter = half / 2;
    let mut data = vec![T::zero(); h * w * d];
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * d..(y * w + x + 1) * d];
            for i in 0..quarter {
                let f = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                row[2 * i] = T::lit((y as f64 * f).sin());
                row[2 * i + 1] = T::lit((y as f64 * f).cos());
                row[half + 2 * i] = T::lit((x as f64 * f).sin());
                row[half + 2 * i + 1] = T::lit((x as f64 * f).cos());
            }
        }
    }
    Tensor::new(vec![h * w, d], data).expect("matching size")
}

/// Location-pass outputs for a teacher-forced sequence.
#[derive(Clone, Copy, Debug)]
pub struct IadOutput {
    /// `(L, d)` final-normalized hidden states.
    pub hidden: Var,
    /// `(L, V)`; row t scores token t + 1.
    pub logits: Var,
}

/// Recognition queries for `n` instances, `per_instance` rows each, stacked
/// instance-major as `(n * per_instance, d)`.
#[derive(Clone, Copy, Debug)]
pub struct Transmissions {
    pub queries: Var,
    pub n: usize,
    pub per_instance: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossOptions {
    /// Zero weight for PAD targets in the recognition grid.
    pub mask_pad: bool,
    /// Stop gradients through the coordinate-token embeddings of transmission.
    pub detach_embed: bool,
    /// Recognition cross-attends to a gradient-free copy of memory.
    pub detach_prd_memory: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct TrainForward {
    pub loss: Var,
    pub iad_loss: Var,
    pub prd_loss: Var,
    pub memory: Var,
    pub iad: IadOutput,
    /// `(n (K + 1), V)`
    pub prd_logits: Var,
}

impl<T: Scalar> Weights<T> {
    /// Conv stem and projection: `(side/8 * side/8, d)` rows before
    /// positional encoding.
    pub fn stem_features(&self, g: &mut Graph<T>, p: &Bound, image: &Image) -> Result<Var> {
        let c = &self.config;
        if image.channels != c.in_channels || image.height != c.image_side || image.width != c.image_side {
            return Err(Error::shape(
                "encode_image",
                format!(
                    "expected {}x{}x{}, got {}x{}x{}",
                    c.in_channels, c.image_side, c.image_side, image.channels, image.height, image.width
                ),
            ));
        }
        let t = Tensor::new(
            vec![image.channels, image.height, image.width],
            image.data.iter().map(|&v| T::lit(v as f64)).collect(),
        )?;
        let mut x = g.constant(t);
        let last = self.stem.len() - 1;
        for (i, stage) in self.stem.iter().enumerate() {
            x = stage.forward(g, p, x, i == last)?;
        }
        self.stem_proj.forward(g, p, x)
    }

    /// Encoder stack over `features + pe`.
    pub fn encode_features(&self, g: &mut Graph<T>, p: &Bound, features: Var, pe: Var) -> Result<Var> {
        let mut x = g.add(features, pe)?;
        for layer in &self.encoder {
            x = layer.forward(g, p, x, self.config.n_heads)?;
        }
        self.encoder_norm.forward(g, p, x)
    }

    /// Image to memory `(side/8 * side/8, d)`.
    pub fn encode_image(&self, g: &mut Graph<T>, p: &Bound, image: &Image) -> Result<Var> {
        let f = self.stem_features(g, p, image)?;
        let s = self.config.memory_side();
        let pe = g.constant(sinusoidal_2d(s, s, self.config.d_model));
        self.encode_features(g, p, f, pe)
    }

    fn check_ids(&self, op: &'static str, ids: &[usize]) -> Result<()> {
        let v = self.config.vocab_size();
        match ids.iter().find(|&&t| t >= v) {
            Some(t) => Err(Error::shape(op, format!("token {} outside vocabulary of {}", t, v))),
            None => Ok(()),
        }
    }

    fn decoder_input(&self, g: &mut Graph<T>, p: &Bound, x: Var, groups: usize, len: usize) -> Result<Var> {
        let pos: Vec<usize> = (0..groups).flat_map(|_| 0..len).collect();
        let pe = g.embedding(p[self.dec_pos], &pos)?;
        g.add(x, pe)
    }

    pub fn iad_forward(&self, g: &mut Graph<T>, p: &Bound, memory: Var, tokens: &[usize]) -> Result<IadOutput> {
        let c = &self.config;
        if tokens.is_empty() || tokens[0] != c.vocab().sos() {
            return Err(Error::invalid("location sequence must start with SOS"));
        }
        if tokens.len() > 2 * c.max_instances + 2 {
            return Err(Error::shape(
                "iad_forward",
                format!("sequence of {} exceeds {}", tokens.len(), 2 * c.max_instances + 2),
            ));
        }
        self.check_ids("iad_forward", tokens)?;
        let e = g.embedding(p[self.token_embed], tokens)?;
        let x = self.decoder_input(g, p, e, 1, tokens.len())?;
        let hidden = self.decoder_for(Role::Location).forward(g, p, x, memory, c.n_heads, 1)?;
        let logits = self.head.forward(g, p, hidden)?;
        Ok(IadOutput { hidden, logits })
    }

    /// Recognition queries from location hidden states and the coordinate
    /// tokens fed at those positions.
    ///
    /// `positions[i]` lists the rows of `hidden` for instance i and
    /// `tokens[i]` the matching input tokens.
    pub fn transmit(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        hidden: Var,
        positions: &[Vec<usize>],
        tokens: &[Vec<usize>],
        policy: TransmissionPolicy,
        detach_embed: bool,
    ) -> Result<Transmissions> {
        let n = positions.len();
        if n == 0 || tokens.len() != n {
            return Err(Error::shape("transmit", format!("{} position groups, {} token groups", n, tokens.len())));
        }
        let per = positions[0].len();
        if per == 0 || positions.iter().chain(tokens).any(|v| v.len() != per) {
            return Err(Error::shape("transmit", "ragged position or token groups"));
        }
        let rows = g.shape(hidden)[0];
        let pos: Vec<usize> = positions.concat();
        if let Some(&bad) = pos.iter().find(|&&r| r >= rows) {
            return Err(Error::shape("transmit", format!("position {} outside {} hidden rows", bad, rows)));
        }
        let toks: Vec<usize> = tokens.concat();
        self.check_ids("transmit", &toks)?;
        let queries = match policy {
            TransmissionPolicy::Feat => g.embedding(hidden, &pos)?,
            TransmissionPolicy::Token => self.embed_tokens(g, p, &toks, detach_embed)?,
            TransmissionPolicy::TokenFeat => {
                let f = g.embedding(hidden, &pos)?;
                let e = self.embed_tokens(g, p, &toks, detach_embed)?;
                g.add(f, e)?
            }
        };
        Ok(Transmissions { queries, n, per_instance: per })
    }

    fn embed_tokens(&self, g: &mut Graph<T>, p: &Bound, ids: &[usize], detach: bool) -> Result<Var> {
        let e = g.embedding(p[self.token_embed], ids)?;
        Ok(if detach { g.detach(e) } else { e })
    }

    /// Teacher-forced transmission for a built sample: feat rows are the
    /// hidden states where each coordinate token is the input.
    pub fn transmit_sample(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        hidden: Var,
        sample: &EncodedSample,
        detach_embed: bool,
    ) -> Result<Transmissions> {
        let n = sample.n_instances();
        let per = if sample.npts { 1 } else { 2 };
        let positions: Vec<Vec<usize>> = (0..n).map(|i| (0..per).map(|j| 1 + per * i + j).collect()).collect();
        let tokens: Vec<Vec<usize>> = positions.iter().map(|ps| ps.iter().map(|&r| sample.iad_tokens[r]).collect()).collect();
        self.transmit(g, p, hidden, &positions, &tokens, self.config.transmission, detach_embed)
    }

    /// Parallel recognition, teacher-forced. `targets[i]` has `K + 1`
    /// entries; the first `K` are fed after the queries. Returns
    /// `(n (K + 1), V)` logits, instance-major.
    pub fn prd_forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        memory: Var,
        tx: &Transmissions,
        targets: &[Vec<usize>],
    ) -> Result<Var> {
        let c = &self.config;
        let (n, q, k) = (tx.n, tx.per_instance, c.max_chars);
        if n == 0 {
            return Err(Error::invalid("recognition needs at least one transmission"));
        }
        if n > c.max_instances {
            return Err(Error::shape("prd_forward", format!("{} instances exceed {}", n, c.max_instances)));
        }
        if targets.len() != n || targets.iter().any(|t| t.len() != k + 1) {
            return Err(Error::shape("prd_forward", format!("targets must be {} rows of {}", n, k + 1)));
        }
        let len = q + k;
        if len > c.max_positions() {
            return Err(Error::shape("prd_forward", "query sequence exceeds position table"));
        }
        let chars: Vec<usize> = targets.iter().flat_map(|t| t[..k].iter().copied()).collect();
        self.check_ids("prd_forward", &chars)?;
        let ce = g.embedding(p[self.token_embed], &chars)?;
        let stacked = g.concat(&[tx.queries, ce], 0)?;
        let order: Vec<usize> = (0..n)
            .flat_map(|i| (i * q..(i + 1) * q).chain(n * q + i * k..n * q + (i + 1) * k))
            .collect();
        let x = g.embedding(stacked, &order)?;
        let x = self.decoder_input(g, p, x, n, len)?;
        let hidden = self.decoder_for(Role::Recognition).forward(g, p, x, memory, c.n_heads, n)?;
        let rows: Vec<usize> = (0..n).flat_map(|i| i * len + q - 1..(i + 1) * len).collect();
        let h = g.embedding(hidden, &rows)?;
        self.head.forward(g, p, h)
    }

    /// Full teacher-forced pass: one weighted cross-entropy over location
    /// targets and recognition targets.
    pub fn forward_train(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        image: &Image,
        sample: &EncodedSample,
        opts: LossOptions,
    ) -> Result<TrainForward> {
        let memory = self.encode_image(g, p, image)?;
        let iad = self.iad_forward(g, p, memory, &sample.iad_tokens)?;
        let l = sample.iad_tokens.len();
        let iad_rows = g.slice(iad.logits, 0, 0, l - 1)?;
        let iad_w = (l - 1) as f64;
        let iad_loss = g.cross_entropy(iad_rows, &sample.iad_tokens[1..], None)?;
        if sample.n_instances() == 0 {
            return Ok(TrainForward { loss: iad_loss, iad_loss, prd_loss: iad_loss, memory, iad, prd_logits: iad_rows });
        }
        let tx = self.transmit_sample(g, p, iad.hidden, sample, opts.detach_embed)?;
        let prd_memory = if opts.detach_prd_memory { g.detach(memory) } else { memory };
        let prd_logits = self.prd_forward(g, p, prd_memory, &tx, &sample.prd_targets)?;
        let targets: Vec<usize> = sample.prd_targets.concat();
        let pad = self.config.vocab().pad();
        let weights: Vec<T> = targets
            .iter()
            .map(|&t| if opts.mask_pad && t == pad { T::zero() } else { T::one() })
            .collect();
        let prd_w: f64 = weights.iter().map(|w| w.as_f64()).sum();
        let prd_loss = g.cross_entropy(prd_logits, &targets, Some(&weights))?;
        let total = iad_w + prd_w;
        let a = g.scale(iad_loss, T::lit(iad_w / total))?;
        let b = g.scale(prd_loss, T::lit(prd_w / total))?;
        let loss = g.add(a, b)?;
        if g.value(loss).data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite loss (location {:?}, recognition {:?})",
                g.value(iad_loss).data()[0].as_f64(),
                g.value(prd_loss).data()[0].as_f64()
            )));
        }
        Ok(TrainForward { loss, iad_loss, prd_loss, memory, iad, prd_logits })
    }
}
