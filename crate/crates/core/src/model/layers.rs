use crate::autodiff::{AttnSpec, Graph, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

use super::forward::Bound;
use super::{Init, ModelConfig, ParamId, ParamStore};

/// `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Self {
        let std = (2.0 / (din + dout) as f64).sqrt();
        let w = store.add(format!("{}.w", name), init.scaled(&[din, dout], std));
        let b = store.add(format!("{}.b", name), Tensor::zeros(&[dout]));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        g.add_row(y, p[self.b])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub(crate) fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        let gamma = store.add(format!("{}.gamma", name), Tensor::full(&[d], T::one()));
        let beta = store.add(format!("{}.beta", name), Tensor::zeros(&[d]));
        Self { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gamma], p[self.beta])
    }
}

/// Multi-head attention projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Attn {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attn {
    pub(crate) fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, d: usize) -> Self {
        Self {
            q: Linear::new(store, init, &format!("{}.q", name), d, d),
            k: Linear::new(store, init, &format!("{}.k", name), d, d),
            v: Linear::new(store, init, &format!("{}.v", name), d, d),
            o: Linear::new(store, init, &format!("{}.o", name), d, d),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        kv: Var,
        spec: AttnSpec,
    ) -> Result<Var> {
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, kv)?;
        let v = self.v.forward(g, p, kv)?;
        let a = g.attention(q, k, v, spec)?;
        self.o.forward(g, p, a)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, d: usize, mult: usize) -> Self {
        Self {
            up: Linear::new(store, init, &format!("{}.up", name), d, d * mult),
            down: Linear::new(store, init, &format!("{}.down", name), d * mult, d),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(g, p, x)?;
        let h = g.relu(h)?;
        self.down.forward(g, p, h)
    }
}

/// conv3x3 + relu.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvStage {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl ConvStage {
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        // He-normal
        let fan_in = (cin * 9) as f64;
        let w = store.add(format!("{}.w", name), init.scaled(&[cout, cin, 3, 3], (2.0 / fan_in).sqrt()));
        let b = store.add(format!("{}.b", name), Tensor::zeros(&[cout]));
        Self { w, b, stride }
    }

    /// `(c, h, w)` in, `(c', h', w')` out. With `rows_out`, the result is
    /// returned as `(h' w', c')` rows instead.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, rows_out: bool) -> Result<Var> {
        let y = g.conv2d(x, p[self.w], p[self.b], self.stride, 1)?;
        let y = g.relu(y)?;
        if !rows_out {
            return Ok(y);
        }
        let s = g.shape(y).to_vec();
        let flat = g.reshape(y, &[s[0], s[1] * s[2]])?;
        g.transpose(flat)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderLayer {
    pub ln1: Norm,
    pub attn: Attn,
    pub ln2: Norm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        d: usize,
        mult: usize,
    ) -> Self {
        Self {
            ln1: Norm::new(store, &format!("{}.ln1", name), d),
            attn: Attn::new(store, init, &format!("{}.attn", name), d),
            ln2: Norm::new(store, &format!("{}.ln2", name), d),
            ffn: FeedForward::new(store, init, &format!("{}.ffn", name), d, mult),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, heads: usize) -> Result<Var> {
        let spec = AttnSpec { heads, groups: 1, kv_shared: false, causal: false };
        let h = self.ln1.forward(g, p, x)?;
        let a = self.attn.forward(g, p, h, h, spec)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, p, x)?;
        let f = self.ffn.forward(g, p, h)?;
        g.add(x, f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderLayer {
    pub ln1: Norm,
    pub self_attn: Attn,
    pub ln2: Norm,
    pub cross_attn: Attn,
    pub ln3: Norm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, d: usize, mult: usize) -> Self {
        Self {
            ln1: Norm::new(store, &format!("{}.ln1", name), d),
            self_attn: Attn::new(store, init, &format!("{}.self_attn", name), d),
            ln2: Norm::new(store, &format!("{}.ln2", name), d),
            cross_attn: Attn::new(store, init, &format!("{}.cross_attn", name), d),
            ln3: Norm::new(store, &format!("{}.ln3", name), d),
            ffn: FeedForward::new(store, init, &format!("{}.ffn", name), d, mult),
        }
    }

    /// `x` holds `groups` stacked sequences of equal length; each attends
    /// causally to itself only and to the whole of `memory`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        memory: Var,
        heads: usize,
        groups: usize,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, p, x)?;
        let a = self.self_attn.forward(g, p, h, h, AttnSpec { heads, groups, kv_shared: false, causal: true })?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, p, x)?;
        let c = self.cross_attn.forward(g, p, h, memory, AttnSpec { heads, groups, kv_shared: true, causal: false })?;
        let x = g.add(x, c)?;
        let h = self.ln3.forward(g, p, x)?;
        let f = self.ffn.forward(g, p, h)?;
        g.add(x, f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderStack {
    pub layers: Vec<DecoderLayer>,
    pub norm: Norm,
}

impl DecoderStack {
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        config: &ModelConfig,
    ) -> Self {
        let layers = (0..config.n_decoder_layers)
            .map(|i| DecoderLayer::new(store, init, &format!("{}.{}", name, i), config.d_model, config.ffn_mult))
            .collect();
        let norm = Norm::new(store, &format!("{}.norm", name), config.d_model);
        Self { layers, norm }
    }

    /// Final-normalized hidden states.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        mut x: Var,
        memory: Var,
        heads: usize,
        groups: usize,
    ) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, p, x, memory, heads, groups)?;
        }
        self.norm.forward(g, p, x)
    }
}
