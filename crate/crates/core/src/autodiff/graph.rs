use crate::error::{Error, Result};
use crate::autodiff::attention::{attention_backward, attention_forward};
use crate::tensor::{col2im, gemm, im2col, layer_norm_rows, softmax_rows, MatMut, MatRef, Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Mean,
    Max,
}

/// Multi-head scaled dot-product attention layout.
///
/// Queries are `groups` stacked blocks of equal length. Keys and values are
/// either one block per group or a single block shared by every group.
/// Groups never attend to each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSpec {
    pub heads: usize,
    pub groups: usize,
    pub kv_shared: bool,
    pub causal: bool,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    Relu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize, col: Vec<T>, out_hw: usize },
    Pool2d { x: Var, kind: PoolKind, k: usize, stride: usize, argmax: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, scale: Vec<T>, probs: Vec<T> },
    Sum(Var),
    Attention { q: Var, k: Var, v: Var, spec: AttnSpec, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of executed operations. Forward values are computed eagerly; reverse
/// traversal in [`Graph::backward`] visits each node once, newest first.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    checked: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by recorded node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), checked: false }
    }

    /// In checked mode every op rejects non-finite inputs.
    pub fn checked() -> Self {
        Self { nodes: Vec::new(), checked: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable leaf (parameter or input requiring a gradient).
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn check(&self, op: &'static str, vs: &[Var]) -> Result<()> {
        if self.checked {
            for v in vs {
                if !self.nodes[v.0].value.is_finite() {
                    return Err(Error::NonFinite { op });
                }
            }
        }
        Ok(())
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, format!("expected a rank-2 array, got {:?}", s)));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check("matmul", &[a, b])?;
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner extents {} and {} differ", k, k2)));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            T::one(),
            self.value(a).as_mat(),
            self.value(b).as_mat(),
            T::zero(),
            MatMut::dense(out.data_mut(), m, n),
        );
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check("add", &[a, b])?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Broadcast-add a vector to every row: `x (.., c) + b (c)`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.check("add_row", &[x, b])?;
        let c = self.value(x).last_dim();
        if self.shape(b) != [c] {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} does not broadcast over {:?}", self.shape(b), self.shape(x)),
            ));
        }
        let mut out = self.value(x).clone();
        let bv = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bb) in row.iter_mut().zip(&bv) {
                *o += bb;
            }
        }
        let ng = self.needs(&[x, b]);
        Ok(self.push(out, Op::AddRow(x, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check("mul", &[a, b])?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let bv = self.value(b).data();
        let data = self.value(a).data().iter().zip(bv).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.check("scale", &[a])?;
        let out = self.value(a).map(|v| v * s);
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::Scale(a, s), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check("transpose", &[a])?;
        self.rank2("transpose", a)?;
        let out = self.value(a).transpose2();
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check("reshape", &[a])?;
        let out = self.value(a).clone().reshaped(shape)?;
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        self.check("concat", inputs)?;
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {} out of range for {:?}", axis, base)));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{:?} vs {:?} on axis {}", s, base, axis)));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(shape, data)?;
        let ng = self.needs(inputs);
        Ok(self.push(out, Op::Concat { inputs: inputs.to_vec(), axis }, ng))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check("slice", &[a])?;
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(Error::shape(
                "slice",
                format!("range {}..{} on axis {} of {:?}", start, end, axis, s),
            ));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let w = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let off = (o * len + start) * inner;
            data.extend_from_slice(&src[off..off + w * inner]);
        }
        let mut shape = s;
        shape[axis] = w;
        let out = Tensor::new(shape, data)?;
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::Slice { input: a, axis, start }, ng))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check("softmax", &[a])?;
        let mut out = self.value(a).clone();
        let c = out.last_dim();
        if c == 0 {
            return Err(Error::shape("softmax", "empty last axis"));
        }
        softmax_rows(out.data_mut(), c);
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::Softmax(a), ng))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check("layer_norm", &[x, gamma, beta])?;
        let c = self.value(x).last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!("scale/shift must be [{}], got {:?}/{:?}", c, self.shape(gamma), self.shape(beta)),
            ));
        }
        let mut out = Tensor::zeros(self.shape(x));
        let (mean, rstd) = layer_norm_rows(
            self.value(x).data(),
            c,
            self.value(gamma).data(),
            self.value(beta).data(),
            out.data_mut(),
        );
        let ng = self.needs(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, mean, rstd }, ng))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check("relu", &[a])?;
        let out = self.value(a).map(|v| v.max(T::zero()));
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::Relu(a), ng))
    }

    /// Gather rows of `table (v, d)` by id; result is `(ids.len(), d)`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check("embedding", &[table])?;
        let (v, d) = self.rank2("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape("embedding", format!("id {} outside table of {} rows", bad, v)));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let ng = self.needs(&[table]);
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }, ng))
    }

    /// 2-D convolution of a `(c, h, w)` image with `(o, c, kh, kw)` filters.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        self.check("conv2d", &[x, w, b])?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || self.shape(b) != [ws[0]] || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?}, filters {:?}, bias {:?}", xs, ws, self.shape(b)),
            ));
        }
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        let (col, oh, ow) = im2col(self.value(x).data(), c, h, wd, kh, kw, stride, pad);
        let ck = c * kh * kw;
        let mut out = Tensor::zeros(&[o, oh, ow]);
        gemm(
            T::one(),
            MatRef::dense(self.value(w).data(), o, ck),
            MatRef::dense(&col, ck, oh * ow),
            T::zero(),
            MatMut::dense(out.data_mut(), o, oh * ow),
        );
        let bv = self.value(b).data().to_vec();
        for (oc, chunk) in out.data_mut().chunks_mut(oh * ow).enumerate() {
            for v in chunk {
                *v += bv[oc];
            }
        }
        let ng = self.needs(&[x, w, b]);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad, col, out_hw: oh * ow }, ng))
    }

    /// Mean or max pooling over a `(c, h, w)` image, no padding.
    pub fn pool2d(&mut self, x: Var, kind: PoolKind, k: usize, stride: usize) -> Result<Var> {
        self.check("pool2d", &[x])?;
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || k == 0 || stride == 0 || xs[1] < k || xs[2] < k {
            return Err(Error::shape("pool2d", format!("input {:?}, window {}", xs, k)));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::new();
        let inv = T::one() / T::lit((k * k) as f64);
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    let mut best = T::neg_infinity();
                    let mut best_i = 0;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = (ci * h + oy * stride + dy) * w + ox * stride + dx;
                            acc += src[i];
                            if src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    match kind {
                        PoolKind::Mean => data.push(acc * inv),
                        PoolKind::Max => {
                            data.push(best);
                            argmax.push(best_i);
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![c, oh, ow], data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::Pool2d { x, kind, k, stride, argmax }, ng))
    }

    /// Weighted mean of per-row negative log-likelihoods:
    /// `sum_r w_r * -log softmax(logits_r)[t_r] / sum_r w_r`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[T]>) -> Result<Var> {
        self.check("cross_entropy", &[logits])?;
        let (r, v) = self.rank2("cross_entropy", logits)?;
        if targets.len() != r {
            return Err(Error::shape("cross_entropy", format!("{} rows but {} targets", r, targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::shape("cross_entropy", format!("target {} outside {} classes", bad, v)));
        }
        let w: Vec<T> = match weights {
            Some(w) if w.len() != r => {
                return Err(Error::shape("cross_entropy", format!("{} rows but {} weights", r, w.len())))
            }
            Some(w) => w.to_vec(),
            None => vec![T::one(); r],
        };
        let wsum: T = w.iter().copied().sum();
        let mut probs = self.value(logits).data().to_vec();
        softmax_rows(&mut probs, v);
        let mut loss = T::zero();
        let scale: Vec<T> = if wsum > T::zero() {
            w.iter().map(|&wi| wi / wsum).collect()
        } else {
            vec![T::zero(); r]
        };
        let tiny = T::min_positive_value();
        for (i, &t) in targets.iter().enumerate() {
            if scale[i] != T::zero() {
                loss -= scale[i] * probs[i * v + t].max(tiny).ln();
            }
        }
        let ng = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), scale, probs },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check("sum", &[a])?;
        let s = self.value(a).sum();
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), ng))
    }

    /// Fused multi-head attention; `q`, `k`, `v` are already projected.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Result<Var> {
        self.check("attention", &[q, k, v])?;
        let (qr, d) = self.rank2("attention", q)?;
        let (kr, dk) = self.rank2("attention", k)?;
        let (vr, dv) = self.rank2("attention", v)?;
        let kv_groups = if spec.kv_shared { 1 } else { spec.groups };
        if spec.heads == 0
            || spec.groups == 0
            || d % spec.heads != 0
            || dk != d
            || dv != d
            || kr != vr
            || qr % spec.groups != 0
            || kr % kv_groups != 0
        {
            return Err(Error::shape(
                "attention",
                format!("q {:?} k {:?} v {:?} with {:?}", [qr, d], [kr, dk], [vr, dv], spec),
            ));
        }
        let lq = qr / spec.groups;
        let lk = kr / kv_groups;
        if spec.causal && lk < lq {
            return Err(Error::shape("attention", "causal attention needs at least as many keys as queries"));
        }
        let mut out = Tensor::zeros(&[qr, d]);
        let probs = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            out.data_mut(),
            lq,
            lk,
            d,
            spec,
        );
        let ng = self.needs(&[q, k, v]);
        Ok(self.push(out, Op::Attention { q, k, v, spec, probs }, ng))
    }

    /// Reverse traversal from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn accum_with(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().expect("initialized").data_mut());
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                let gm = MatRef::dense(g.data(), m, n);
                let av = self.value(*a).as_mat();
                let bv = self.value(*b).as_mat();
                self.accum_with(grads, *a, |da| {
                    gemm(T::one(), gm, bv.t(), T::one(), MatMut::dense(da, m, k))
                });
                self.accum_with(grads, *b, |db| {
                    gemm(T::one(), av.t(), gm, T::one(), MatMut::dense(db, k, n))
                });
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::AddRow(x, b) => {
                self.accum(grads, *x, g.clone());
                let c = g.last_dim();
                self.accum_with(grads, *b, |db| {
                    for row in g.data().chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accum_with(grads, *a, |da| {
                    for ((d, &gv), &y) in da.iter_mut().zip(g.data()).zip(bv) {
                        *d += gv * y;
                    }
                });
                self.accum_with(grads, *b, |db| {
                    for ((d, &gv), &x) in db.iter_mut().zip(g.data()).zip(av) {
                        *d += gv * x;
                    }
                });
            }
            Op::Scale(a, s) => self.accum(grads, *a, g.map(|v| v * *s)),
            Op::Transpose(a) => self.accum(grads, *a, g.transpose2()),
            Op::Reshape(a) => {
                let shaped = g.clone().reshaped(self.shape(*a)).expect("same element count");
                self.accum(grads, *a, shaped);
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(g.shape(), *axis);
                let total = g.shape()[*axis];
                let mut start = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    self.accum_with(grads, *v, |dv| {
                        for o in 0..outer {
                            let src = &g.data()[(o * total + start) * inner..(o * total + start + len) * inner];
                            for (d, &s) in dv[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    start += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let full = self.shape(*input).to_vec();
                let (outer, len, inner) = split_axis(&full, *axis);
                let w = g.shape()[*axis];
                self.accum_with(grads, *input, |dv| {
                    for o in 0..outer {
                        let dst = &mut dv[(o * len + start) * inner..(o * len + start + w) * inner];
                        for (d, &s) in dst.iter_mut().zip(&g.data()[o * w * inner..(o + 1) * w * inner]) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let c = out.last_dim();
                self.accum_with(grads, *a, |da| {
                    for ((dr, gr), yr) in da.chunks_mut(c).zip(g.data().chunks(c)).zip(out.data().chunks(c)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let c = g.last_dim();
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let n = T::lit(c as f64);
                let rows = xv.len() / c;
                let mut xhat = vec![T::zero(); xv.len()];
                for r in 0..rows {
                    for j in 0..c {
                        xhat[r * c + j] = (xv[r * c + j] - mean[r]) * rstd[r];
                    }
                }
                self.accum_with(grads, *gamma, |dg| {
                    for r in 0..rows {
                        for j in 0..c {
                            dg[j] += g.data()[r * c + j] * xhat[r * c + j];
                        }
                    }
                });
                self.accum_with(grads, *beta, |db| {
                    for row in g.data().chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                });
                self.accum_with(grads, *x, |dx| {
                    for r in 0..rows {
                        let gr = &g.data()[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..c {
                            let dxh = gr[j] * gam[j];
                            s1 += dxh;
                            s2 += dxh * xh[j];
                        }
                        s1 = s1 / n;
                        s2 = s2 / n;
                        for j in 0..c {
                            let dxh = gr[j] * gam[j];
                            dx[r * c + j] += rstd[r] * (dxh - s1 - xh[j] * s2);
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.accum_with(grads, *a, |da| {
                    for ((d, &gv), &x) in da.iter_mut().zip(g.data()).zip(av) {
                        if x > T::zero() {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).last_dim();
                self.accum_with(grads, *table, |dt| {
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[i * d + j] += g.data()[r * d + j];
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, stride, pad, col, out_hw } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let (o, ck) = (ws[0], ws[1] * ws[2] * ws[3]);
                let gm = MatRef::dense(g.data(), o, *out_hw);
                self.accum_with(grads, *w, |dw| {
                    gemm(T::one(), gm, MatRef::dense(col, ck, *out_hw).t(), T::one(), MatMut::dense(dw, o, ck))
                });
                self.accum_with(grads, *b, |db| {
                    for (oc, chunk) in g.data().chunks(*out_hw).enumerate() {
                        db[oc] += chunk.iter().copied().sum::<T>();
                    }
                });
                if self.nodes[x.0].needs_grad {
                    let mut dcol = vec![T::zero(); ck * out_hw];
                    gemm(
                        T::one(),
                        MatRef::dense(self.value(*w).data(), o, ck).t(),
                        gm,
                        T::zero(),
                        MatMut::dense(&mut dcol, ck, *out_hw),
                    );
                    self.accum_with(grads, *x, |dx| {
                        col2im(&dcol, xs[0], xs[1], xs[2], ws[2], ws[3], *stride, *pad, dx)
                    });
                }
            }
            Op::Pool2d { x, kind, k, stride, argmax } => {
                let xs = self.shape(*x).to_vec();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (oh, ow) = (g.shape()[1], g.shape()[2]);
                self.accum_with(grads, *x, |dx| match kind {
                    PoolKind::Max => {
                        for (&i, &gv) in argmax.iter().zip(g.data()) {
                            dx[i] += gv;
                        }
                    }
                    PoolKind::Mean => {
                        let inv = T::one() / T::lit((k * k) as f64);
                        for ci in 0..c {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = g.data()[(ci * oh + oy) * ow + ox] * inv;
                                    for dy in 0..*k {
                                        for dxx in 0..*k {
                                            dx[(ci * h + oy * stride + dy) * w + ox * stride + dxx] += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, scale, probs } => {
                let v = self.value(*logits).last_dim();
                let gl = g.data()[0];
                self.accum_with(grads, *logits, |dl| {
                    for (r, &t) in targets.iter().enumerate() {
                        let s = scale[r] * gl;
                        if s == T::zero() {
                            continue;
                        }
                        for j in 0..v {
                            dl[r * v + j] += s * probs[r * v + j];
                        }
                        dl[r * v + t] -= s;
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.accum(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Attention { q, k, v, spec, probs } => {
                let (qr, d) = self.value(*q).dims2();
                let kr = self.value(*k).dims2().0;
                let kv_groups = if spec.kv_shared { 1 } else { spec.groups };
                let lq = qr / spec.groups;
                let lk = kr / kv_groups;
                let mut dq = vec![T::zero(); qr * d];
                let mut dk = vec![T::zero(); kr * d];
                let mut dv = vec![T::zero(); kr * d];
                attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g.data(),
                    &mut dq,
                    &mut dk,
                    &mut dv,
                    lq,
                    lk,
                    d,
                    *spec,
                );
                self.accum(grads, *q, Tensor::new(vec![qr, d], dq).expect("shape"));
                self.accum(grads, *k, Tensor::new(vec![kr, d], dk).expect("shape"));
                self.accum(grads, *v, Tensor::new(vec![kr, d], dv).expect("shape"));
            }
        }
    }
}
