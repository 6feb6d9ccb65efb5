//! Parameterized layers built on [`Graph`] and a forward-pass [`Session`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{BatchStats, Graph, Var};
use super::params::{Collection, Init, ParamId, ParamStore};
use super::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// One forward pass: the tape, a read-only view of the parameters, the
/// dropout stream and side outputs collected along the way.
pub struct Session<'a, F: Real> {
    pub graph: Graph<F>,
    pub store: &'a ParamStore<F>,
    rng: ChaCha8Rng,
    bn_updates: Vec<(BatchNorm, BatchStats<F>)>,
    attention: Vec<Var>,
}

impl<'a, F: Real> Session<'a, F> {
    pub fn new(store: &'a ParamStore<F>, training: bool, seed: u64) -> Self {
        Self {
            graph: Graph::new(training),
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_updates: Vec::new(),
            attention: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.graph.is_training()
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        self.graph.dropout(x, rate, &mut self.rng)
    }

    pub fn record_attention(&mut self, alpha: Var) {
        self.attention.push(alpha);
    }

    /// Every attention-coefficient map produced so far.
    pub fn attention(&self) -> &[Var] {
        &self.attention
    }

    pub fn into_parts(self) -> (Graph<F>, Vec<(BatchNorm, BatchStats<F>)>) {
        (self.graph, self.bn_updates)
    }
}

/// Folds training-batch statistics into the running buffers.
pub fn apply_bn_updates<F: Real>(store: &mut ParamStore<F>, updates: &[(BatchNorm, BatchStats<F>)]) {
    let m = F::of(BN_MOMENTUM);
    let one_m = F::one() - m;
    for (bn, stats) in updates {
        for (r, &b) in store.get_mut(bn.running_mean).value.data_mut().iter_mut().zip(&stats.mean) {
            *r = m * *r + one_m * b;
        }
        for (r, &b) in store.get_mut(bn.running_var).value.data_mut().iter_mut().zip(&stats.var) {
            *r = m * *r + one_m * b;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    /// "Same" padding; output size is `ceil(input / stride)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        collection: Collection,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let init = Init::Glorot {
            fan_in: in_c * kernel * kernel,
            fan_out: out_c * kernel * kernel,
        };
        let w = store.add(format!("{name}.w"), collection, [out_c, in_c, kernel, kernel], init, rng);
        let b = bias.then(|| store.add(format!("{name}.b"), collection, [out_c, 1, 1, 1], Init::Zeros, rng));
        Self {
            w,
            b,
            in_c,
            out_c,
            kernel,
            stride,
        }
    }

    pub fn forward<F: Real>(&self, s: &mut Session<F>, x: Var) -> Var {
        let w = s.param(self.w);
        let b = self.b.map(|b| s.param(b));
        s.graph.conv2d(x, w, b, self.stride, self.kernel / 2)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        collection: Collection,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let init = Init::Glorot {
            fan_in: in_dim,
            fan_out: out_dim,
        };
        let w = store.add(format!("{name}.w"), collection, [in_dim, out_dim, 1, 1], init, rng);
        let b = store.add(format!("{name}.b"), collection, [out_dim, 1, 1, 1], Init::Zeros, rng);
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward<F: Real>(&self, s: &mut Session<F>, x: Var) -> Var {
        let w = s.param(self.w);
        let b = s.param(self.b);
        s.graph.dense(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        collection: Collection,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let shape = [channels, 1, 1, 1];
        Self {
            gamma: store.add(format!("{name}.gamma"), collection, shape, Init::Ones, rng),
            beta: store.add(format!("{name}.beta"), collection, shape, Init::Zeros, rng),
            running_mean: store.add_buffer(format!("{name}.running_mean"), collection, Tensor::zeros(shape)),
            running_var: store.add_buffer(format!("{name}.running_var"), collection, Tensor::full(shape, F::one())),
        }
    }

    pub fn forward<F: Real>(&self, s: &mut Session<F>, x: Var) -> Var {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        if s.training() {
            let (y, stats) = s.graph.batch_norm(x, gamma, beta, BN_EPS);
            s.bn_updates.push((*self, stats));
            y
        } else {
            let mean = s.store.value(self.running_mean).data().to_vec();
            let var = s.store.value(self.running_var).data().to_vec();
            s.graph.channel_affine(x, gamma, beta, &mean, &var, BN_EPS)
        }
    }
}

/// Convolutional LSTM with 3×3 kernels and gate order (input, forget, cell, output).
#[derive(Debug, Clone, Copy)]
pub struct ConvLstm {
    pub input: Conv2d,
    /// Absent when the layer only ever sees length-1 sequences from a zero state.
    pub recurrent: Option<Conv2d>,
    pub hidden: usize,
}

impl ConvLstm {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        collection: Collection,
        in_c: usize,
        hidden: usize,
        seq_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let input = Conv2d::new(store, &format!("{name}.wx"), collection, in_c, 4 * hidden, 3, 1, true, rng);
        let recurrent = (seq_len > 1)
            .then(|| Conv2d::new(store, &format!("{name}.wh"), collection, hidden, 4 * hidden, 3, 1, false, rng));
        if let Some(b) = input.b {
            let data = store.get_mut(b).value.data_mut();
            data[hidden..2 * hidden].fill(F::one());
        }
        Self {
            input,
            recurrent,
            hidden,
        }
    }

    /// Runs the sequence from a zero state and returns the last hidden state.
    pub fn forward<F: Real>(&self, s: &mut Session<F>, steps: &[Var]) -> Var {
        assert!(!steps.is_empty(), "ConvLSTM needs at least one step");
        let hd = self.hidden;
        let mut state: Option<(Var, Var)> = None;
        for &x in steps {
            let mut gates = self.input.forward(s, x);
            if let Some((h, _)) = state {
                let rec = self.recurrent.expect("recurrent weights for sequences longer than one");
                let r = rec.forward(s, h);
                gates = s.graph.add(gates, r);
            }
            let g = &mut s.graph;
            let i = g.slice_channels(gates, 0, hd);
            let i = g.sigmoid(i);
            let cand = g.slice_channels(gates, 2 * hd, hd);
            let cand = g.tanh(cand);
            let o = g.slice_channels(gates, 3 * hd, hd);
            let o = g.sigmoid(o);
            let mut c = g.mul(i, cand);
            if let Some((_, c_prev)) = state {
                let f = g.slice_channels(gates, hd, hd);
                let f = g.sigmoid(f);
                let kept = g.mul(f, c_prev);
                c = g.add(c, kept);
            }
            let tc = g.tanh(c);
            let h = g.mul(o, tc);
            state = Some((h, c));
        }
        state.expect("nonempty sequence").0
    }
}
