//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and leaves gradients for
//! every node that depends on a parameter or a tracked variable.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::conv::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::{mat, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    /// `x[b,c,h,w] * a[b,0,h,w]`
    MulPlane(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    MaxPool2(Var, Vec<u32>),
    Upsample(Var, usize),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    ChannelMax(Var, Vec<u32>),
    ChannelMean(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<F>,
        inv_std: Vec<F>,
    },
    Dropout(Var, Vec<F>),
    Reshape(Var),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    tracked: bool,
}

/// Batch statistics from a training-mode batch-norm node.
#[derive(Debug, Clone)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

#[derive(Debug)]
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
    params: HashMap<ParamId, Var>,
    training: bool,
}

impl<F: Real> Graph<F> {
    pub fn new(training: bool) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            training,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is kept after `backward`.
    pub fn variable(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Loads a parameter once per graph; repeated calls share the node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.params.insert(id, v);
        v
    }

    /// 2D convolution; `w` is `[out_c, in_c, k, k]`, `b` is `[out_c, 1, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let [batch, in_c, in_h, in_w] = self.shape(x);
        let [out_c, w_in, k, k2] = self.shape(w);
        assert_eq!(w_in, in_c, "conv input channels");
        assert_eq!(k, k2, "square kernels only");
        let geom = ConvGeom {
            in_c,
            in_h,
            in_w,
            out_c,
            kernel: k,
            stride,
            pad,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let mut out = Tensor::zeros([batch, out_c, oh, ow]);
        let mut cols = Vec::new();
        {
            let xv = &self.nodes[x.0].value;
            let wv = self.nodes[w.0].value.data();
            let bv = b.map(|b| self.nodes[b.0].value.data());
            for s in 0..batch {
                conv::forward_sample(&geom, xv.sample(s), wv, bv, &mut cols, out.sample_mut(s));
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let tracked = self.tracked(&deps);
        self.push(out, Op::Conv { x, w, b, geom }, tracked)
    }

    /// `y = x · w + b` with `x` flattened per sample; `w` is `[k, n, 1, 1]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x);
        let batch = xs.batch();
        let k = xs.sample_len();
        let [wk, n, _, _] = self.shape(w);
        assert_eq!(wk, k, "dense input width");
        let mut out = Tensor::zeros([batch, n, 1, 1]);
        let bias = self.value(b).data().to_vec();
        for s in 0..batch {
            out.sample_mut(s).copy_from_slice(&bias);
        }
        mat::mm(batch, k, n, self.value(x).data(), self.value(w).data(), F::one(), out.data_mut());
        let tracked = self.tracked(&[x, w, b]);
        self.push(out, Op::Dense { x, w, b }, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let tracked = self.tracked(&[a, b]);
        self.push(out, Op::Add(a, b), tracked)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(self.shape(a), data);
        let tracked = self.tracked(&[a, b]);
        self.push(out, Op::Mul(a, b), tracked)
    }

    pub fn scale(&mut self, a: Var, k: F) -> Var {
        let out = self.value(a).map(|v| v * k);
        let tracked = self.tracked(&[a]);
        self.push(out, Op::Scale(a, k), tracked)
    }

    /// Multiplies every channel of `x` by the single-channel map `a`.
    pub fn mul_plane(&mut self, x: Var, a: Var) -> Var {
        let [b, c, h, w] = self.shape(x);
        assert_eq!(self.shape(a), [b, 1, h, w], "mul_plane expects a [b,1,h,w] map");
        let plane = h * w;
        let mut out = self.value(x).clone();
        let av = self.value(a).data();
        for s in 0..b {
            let weights = &av[s * plane..(s + 1) * plane];
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                for (o, &wt) in out.data_mut()[off..off + plane].iter_mut().zip(weights) {
                    *o *= wt;
                }
            }
        }
        let tracked = self.tracked(&[x, a]);
        self.push(out, Op::MulPlane(x, a), tracked)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(F::zero()));
        let tracked = self.tracked(&[a]);
        self.push(out, Op::Relu(a), tracked)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| F::one() / (F::one() + (-v).exp()));
        let tracked = self.tracked(&[a]);
        self.push(out, Op::Sigmoid(a), tracked)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let two = F::of(2.0);
        // exp form; noticeably faster than libm tanh
        let out = self.value(a).map(|v| two / (F::one() + (-two * v).exp()) - F::one());
        let tracked = self.tracked(&[a]);
        self.push(out, Op::Tanh(a), tracked)
    }

    /// 2×2 max pooling with stride 2; spatial sizes must be even.
    pub fn max_pool2(&mut self, a: Var) -> Var {
        let [b, c, h, w] = self.shape(a);
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial size, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut arg = Vec::with_capacity(b * c * oh * ow);
        for bc in 0..b * c {
            let base = bc * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    arg.push(best as u32);
                }
            }
        }
        let out = Tensor::from_vec([b, c, oh, ow], out);
        let tracked = self.tracked(&[a]);
        self.push(out, Op::MaxPool2(a, arg), tracked)
    }

    /// Nearest-neighbor upsampling by an integer factor.
    pub fn upsample(&mut self, a: Var, factor: usize) -> Var {
        let [b, c, h, w] = self.shape(a);
        let (uh, uw) = (h * factor, w * factor);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(b * c * uh * uw);
        for bc in 0..b * c {
            for y in 0..uh {
                let row = &src[bc * h * w + (y / factor) * w..bc * h * w + (y / factor + 1) * w];
                for &v in row {
                    out.extend(std::iter::repeat_n(v, factor));
                }
            }
        }
        let out = Tensor::from_vec([b, c, uh, uw], out);
        let tracked = self.tracked(&[a]);
        self.push(out, Op::Upsample(a, factor), tracked)
    }

    /// Channel-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let [b, _, h, w] = self.shape(parts[0]);
        let total_c: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Tensor::zeros([b, total_c, h, w]);
        let plane = h * w;
        for s in 0..b {
            let mut offset = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!([pv.batch(), pv.height(), pv.width()], [b, h, w], "concat shape mismatch");
                let n = pv.channels() * plane;
                out.sample_mut(s)[offset..offset + n].copy_from_slice(pv.sample(s));
                offset += n;
            }
        }
        let tracked = self.tracked(parts);
        self.push(out, Op::Concat(parts.to_vec()), tracked)
    }

    /// Channels `start..start+len`.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Var {
        let [b, c, h, w] = self.shape(a);
        assert!(start + len <= c, "channel slice out of range");
        let plane = h * w;
        let src = self.value(a);
        let mut out = Tensor::zeros([b, len, h, w]);
        for s in 0..b {
            out.sample_mut(s)
                .copy_from_slice(&src.sample(s)[start * plane..(start + len) * plane]);
        }
        let tracked = self.tracked(&[a]);
        self.push(out, Op::Slice { x: a, start }, tracked)
    }

    /// Maximum over channels → `[b, 1, h, w]`.
    pub fn channel_max(&mut self, a: Var) -> Var {
        let [b, c, h, w] = self.shape(a);
        let plane = h * w;
        let x = self.value(a);
        let mut out = Tensor::zeros([b, 1, h, w]);
        let mut arg = vec![0u32; b * plane];
        for s in 0..b {
            let xs = x.sample(s);
            for p in 0..plane {
                let mut best = 0;
                for ch in 1..c {
                    if xs[ch * plane + p] > xs[best * plane + p] {
                        best = ch;
                    }
                }
                out.sample_mut(s)[p] = xs[best * plane + p];
                arg[s * plane + p] = best as u32;
            }
        }
        let tracked = self.tracked(&[a]);
        self.push(out, Op::ChannelMax(a, arg), tracked)
    }

    /// Mean over channels → `[b, 1, h, w]`.
    pub fn channel_mean(&mut self, a: Var) -> Var {
        let [b, c, h, w] = self.shape(a);
        let plane = h * w;
        let x = self.value(a);
        let inv = F::one() / F::of(c as f64);
        let mut out = Tensor::zeros([b, 1, h, w]);
        for s in 0..b {
            let xs = x.sample(s);
            let os = out.sample_mut(s);
            for ch in 0..c {
                for p in 0..plane {
                    os[p] += xs[ch * plane + p];
                }
            }
            for v in os.iter_mut() {
                *v *= inv;
            }
        }
        let tracked = self.tracked(&[a]);
        self.push(out, Op::ChannelMean(a), tracked)
    }

    /// Training-mode batch normalization over `(batch, h, w)` per channel.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats<F>) {
        let [b, c, h, w] = self.shape(x);
        let plane = h * w;
        let n = F::of((b * plane) as f64);
        let xv = self.value(x);
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        for s in 0..b {
            let xs = xv.sample(s);
            for ch in 0..c {
                mean[ch] += xs[ch * plane..(ch + 1) * plane].iter().copied().sum::<F>();
            }
        }
        for m in &mut mean {
            *m = *m / n;
        }
        for s in 0..b {
            let xs = xv.sample(s);
            for ch in 0..c {
                for &v in &xs[ch * plane..(ch + 1) * plane] {
                    let d = v - mean[ch];
                    var[ch] += d * d;
                }
            }
        }
        for v in &mut var {
            *v = *v / n;
        }
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + F::of(eps)).sqrt()).collect();
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut xhat = vec![F::zero(); xv.len()];
        let mut out = Tensor::zeros([b, c, h, w]);
        for s in 0..b {
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                for p in off..off + plane {
                    let xh = (xv.data()[p] - mean[ch]) * inv_std[ch];
                    xhat[p] = xh;
                    out.data_mut()[p] = g[ch] * xh + bt[ch];
                }
            }
        }
        let tracked = self.tracked(&[x, gamma, beta]);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            tracked,
        );
        (v, BatchStats { mean, var })
    }

    /// Evaluation-mode batch normalization with fixed statistics.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var, mean: &[F], var: &[F], eps: f64) -> Var {
        let [b, c, h, w] = self.shape(x);
        let plane = h * w;
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + F::of(eps)).sqrt()).collect();
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut out = self.value(x).clone();
        for s in 0..b {
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                for v in &mut out.data_mut()[off..off + plane] {
                    *v = g[ch] * (*v - mean[ch]) * inv_std[ch] + bt[ch];
                }
            }
        }
        let tracked = self.tracked(&[x, gamma, beta]);
        self.push(
            out,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            tracked,
        )
    }

    /// Inverted dropout; identity outside training.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut ChaCha8Rng) -> Var {
        if !self.training || rate <= 0.0 {
            return a;
        }
        let keep = F::of(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < rate { F::zero() } else { keep })
            .collect();
        let data = self.value(a).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::from_vec(self.shape(a), data);
        let tracked = self.tracked(&[a]);
        self.push(out, Op::Dropout(a, mask), tracked)
    }

    pub fn reshape(&mut self, a: Var, shape: [usize; 4]) -> Var {
        let out = self.value(a).clone().reshape(shape);
        let tracked = self.tracked(&[a]);
        self.push(out, Op::Reshape(a), tracked)
    }

    /// Gradient of `v` after [`backward`](Self::backward), if any reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Propagates the seed gradients `(output, d loss / d output)` through the tape.
    pub fn backward(&mut self, seeds: Vec<(Var, Tensor<F>)>) {
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.shape(v), "seed gradient shape");
            accumulate(&mut self.grads, v, g);
        }
        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].tracked {
                continue;
            }
            let Some(dy) = self.grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &dy);
            self.grads[idx] = Some(dy);
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn backward_node(&mut self, idx: usize, dy: &Tensor<F>) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let wants = |v: &Var| nodes[v.0].tracked;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let xv = &nodes[x.0].value;
                let wv = nodes[w.0].value.data();
                let batch = xv.batch();
                let mut dw = wants(w).then(|| Tensor::zeros(nodes[w.0].value.shape()));
                let mut db = b.filter(wants).map(|b| Tensor::zeros(nodes[b.0].value.shape()));
                let mut dx = wants(x).then(|| Tensor::zeros(xv.shape()));
                let (mut cols, mut dcols) = (Vec::new(), Vec::new());
                for s in 0..batch {
                    conv::backward_sample(
                        geom,
                        xv.sample(s),
                        wv,
                        dy.sample(s),
                        dw.as_mut().map(|t| t.data_mut()),
                        db.as_mut().map(|t| t.data_mut()),
                        dx.as_mut().map(|t| t.sample_mut(s)),
                        &mut cols,
                        &mut dcols,
                    );
                }
                if let Some(g) = dw {
                    accumulate(grads, *w, g);
                }
                if let (Some(g), Some(b)) = (db, b) {
                    accumulate(grads, *b, g);
                }
                if let Some(g) = dx {
                    accumulate(grads, *x, g);
                }
            }
            Op::Dense { x, w, b } => {
                let xv = &nodes[x.0].value;
                let wv = &nodes[w.0].value;
                let batch = xv.batch();
                let k = xv.sample_len();
                let n = wv.shape()[1];
                if wants(w) {
                    let mut dw = Tensor::zeros(wv.shape());
                    mat::mm_at(k, batch, n, xv.data(), dy.data(), F::zero(), dw.data_mut());
                    accumulate(grads, *w, dw);
                }
                if wants(b) {
                    let mut db = Tensor::zeros(nodes[b.0].value.shape());
                    for s in 0..batch {
                        for (acc, &g) in db.data_mut().iter_mut().zip(dy.sample(s)) {
                            *acc += g;
                        }
                    }
                    accumulate(grads, *b, db);
                }
                if wants(x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    mat::mm_bt(batch, n, k, dy.data(), wv.data(), F::zero(), dx.data_mut());
                    accumulate(grads, *x, dx);
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    accumulate(grads, *a, dy.clone());
                }
                if wants(b) {
                    accumulate(grads, *b, dy.clone());
                }
            }
            Op::Mul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if wants(a) {
                    let d = dy.data().iter().zip(bv.data()).map(|(&g, &y)| g * y).collect();
                    accumulate(grads, *a, Tensor::from_vec(av.shape(), d));
                }
                if wants(b) {
                    let d = dy.data().iter().zip(av.data()).map(|(&g, &x)| g * x).collect();
                    accumulate(grads, *b, Tensor::from_vec(bv.shape(), d));
                }
            }
            Op::Scale(a, k) => {
                let k = *k;
                accumulate(grads, *a, dy.map(|g| g * k));
            }
            Op::MulPlane(x, a) => {
                let xv = &nodes[x.0].value;
                let av = &nodes[a.0].value;
                let [b, c, h, w] = xv.shape();
                let plane = h * w;
                if wants(x) {
                    let mut dx = dy.clone();
                    for s in 0..b {
                        let weights = &av.data()[s * plane..(s + 1) * plane];
                        for ch in 0..c {
                            let off = (s * c + ch) * plane;
                            for (g, &wt) in dx.data_mut()[off..off + plane].iter_mut().zip(weights) {
                                *g *= wt;
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if wants(a) {
                    let mut da = Tensor::zeros(av.shape());
                    for s in 0..b {
                        for ch in 0..c {
                            let off = (s * c + ch) * plane;
                            for p in 0..plane {
                                da.data_mut()[s * plane + p] += dy.data()[off + p] * xv.data()[off + p];
                            }
                        }
                    }
                    accumulate(grads, *a, da);
                }
            }
            Op::Relu(a) => {
                let av = &nodes[a.0].value;
                let d = dy
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&g, &x)| if x > F::zero() { g } else { F::zero() })
                    .collect();
                accumulate(grads, *a, Tensor::from_vec(av.shape(), d));
            }
            Op::Sigmoid(a) => {
                let y = &nodes[idx].value;
                let d = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &s)| g * s * (F::one() - s))
                    .collect();
                accumulate(grads, *a, Tensor::from_vec(y.shape(), d));
            }
            Op::Tanh(a) => {
                let y = &nodes[idx].value;
                let d = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &t)| g * (F::one() - t * t))
                    .collect();
                accumulate(grads, *a, Tensor::from_vec(y.shape(), d));
            }
            Op::MaxPool2(a, arg) => {
                let mut dx = Tensor::zeros(nodes[a.0].value.shape());
                for (&src, &g) in arg.iter().zip(dy.data()) {
                    dx.data_mut()[src as usize] += g;
                }
                accumulate(grads, *a, dx);
            }
            Op::Upsample(a, factor) => {
                let f = *factor;
                let shape = nodes[a.0].value.shape();
                let [b, c, h, w] = shape;
                let mut dx = Tensor::zeros(shape);
                let (uh, uw) = (h * f, w * f);
                for bc in 0..b * c {
                    for y in 0..uh {
                        for x in 0..uw {
                            dx.data_mut()[bc * h * w + (y / f) * w + x / f] += dy.data()[bc * uh * uw + y * uw + x];
                        }
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::Concat(parts) => {
                let [b, _, h, w] = dy.shape();
                let plane = h * w;
                let mut offset = 0;
                for p in parts {
                    let c = nodes[p.0].value.channels();
                    if wants(p) {
                        let mut d = Tensor::zeros([b, c, h, w]);
                        for s in 0..b {
                            d.sample_mut(s)
                                .copy_from_slice(&dy.sample(s)[offset..offset + c * plane]);
                        }
                        accumulate(grads, *p, d);
                    }
                    offset += c * plane;
                }
            }
            Op::Slice { x, start } => {
                let shape = nodes[x.0].value.shape();
                let [b, _, h, w] = shape;
                let plane = h * w;
                let len = dy.channels();
                let dx = grads[x.0].get_or_insert_with(|| Tensor::zeros(shape));
                for s in 0..b {
                    let dst = &mut dx.sample_mut(s)[start * plane..(start + len) * plane];
                    for (d, &g) in dst.iter_mut().zip(dy.sample(s)) {
                        *d += g;
                    }
                }
            }
            Op::ChannelMax(a, arg) => {
                let shape = nodes[a.0].value.shape();
                let [b, _, h, w] = shape;
                let plane = h * w;
                let mut dx = Tensor::zeros(shape);
                for s in 0..b {
                    for p in 0..plane {
                        let ch = arg[s * plane + p] as usize;
                        dx.sample_mut(s)[ch * plane + p] += dy.data()[s * plane + p];
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::ChannelMean(a) => {
                let shape = nodes[a.0].value.shape();
                let [b, c, h, w] = shape;
                let plane = h * w;
                let inv = F::one() / F::of(c as f64);
                let mut dx = Tensor::zeros(shape);
                for s in 0..b {
                    for ch in 0..c {
                        for p in 0..plane {
                            dx.sample_mut(s)[ch * plane + p] = dy.data()[s * plane + p] * inv;
                        }
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let [b, c, h, w] = dy.shape();
                let plane = h * w;
                let n = F::of((b * plane) as f64);
                let mut sum_dy = vec![F::zero(); c];
                let mut sum_dy_xhat = vec![F::zero(); c];
                for s in 0..b {
                    for ch in 0..c {
                        let off = (s * c + ch) * plane;
                        for p in off..off + plane {
                            sum_dy[ch] += dy.data()[p];
                            sum_dy_xhat[ch] += dy.data()[p] * xhat[p];
                        }
                    }
                }
                if wants(gamma) {
                    accumulate(grads, *gamma, Tensor::from_vec([c, 1, 1, 1], sum_dy_xhat.clone()));
                }
                if wants(beta) {
                    accumulate(grads, *beta, Tensor::from_vec([c, 1, 1, 1], sum_dy.clone()));
                }
                if wants(x) {
                    let g = nodes[gamma.0].value.data();
                    let mut dx = Tensor::zeros(dy.shape());
                    for s in 0..b {
                        for ch in 0..c {
                            let k = g[ch] * inv_std[ch] / n;
                            let off = (s * c + ch) * plane;
                            for p in off..off + plane {
                                dx.data_mut()[p] = k * (n * dy.data()[p] - sum_dy[ch] - xhat[p] * sum_dy_xhat[ch]);
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xv = &nodes[x.0].value;
                let [b, c, h, w] = xv.shape();
                let plane = h * w;
                let g = nodes[gamma.0].value.data();
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                let mut dx = Tensor::zeros(xv.shape());
                for s in 0..b {
                    for ch in 0..c {
                        let off = (s * c + ch) * plane;
                        for p in off..off + plane {
                            let gy = dy.data()[p];
                            dgamma[ch] += gy * (xv.data()[p] - mean[ch]) * inv_std[ch];
                            dbeta[ch] += gy;
                            dx.data_mut()[p] = gy * g[ch] * inv_std[ch];
                        }
                    }
                }
                if wants(gamma) {
                    accumulate(grads, *gamma, Tensor::from_vec([c, 1, 1, 1], dgamma));
                }
                if wants(beta) {
                    accumulate(grads, *beta, Tensor::from_vec([c, 1, 1, 1], dbeta));
                }
                if wants(x) {
                    accumulate(grads, *x, dx);
                }
            }
            Op::Dropout(a, mask) => {
                let d = dy.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                accumulate(grads, *a, Tensor::from_vec(dy.shape(), d));
            }
            Op::Reshape(a) => {
                let shape = nodes[a.0].value.shape();
                accumulate(grads, *a, dy.clone().reshape(shape));
            }
        }
    }

    /// Adds parameter gradients from the last backward pass into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<F>) {
        for (&id, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                let p = store.get_mut(id);
                if p.trainable {
                    p.grad.add_assign(g);
                }
            }
        }
    }

    /// Node count, mostly for diagnostics.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[doc(hidden)]
    pub fn is_tracked(&self, v: Var) -> bool {
        self.wants(v)
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

