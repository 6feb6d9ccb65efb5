use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};

/// Top-level parameter group; each is persisted as its own checkpoint blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Collection {
    Lfm,
    Convlstm,
    Unet,
}

impl Collection {
    pub const ALL: [Collection; 3] = [Collection::Lfm, Collection::Convlstm, Collection::Unet];

    pub fn name(self) -> &'static str {
        match self {
            Collection::Lfm => "lfm",
            Collection::Convlstm => "convlstm",
            Collection::Unet => "unet",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    Glorot { fan_in: usize, fan_out: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub collection: Collection,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    /// Running statistics are stored here too but never optimized.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        collection: Collection,
        shape: [usize; 4],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, F::one()),
            Init::Const(v) => Tensor::full(shape, F::of(v)),
            Init::Glorot { fan_in, fan_out } => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::from_fn(shape, |_| F::of(rng.random_range(-limit..limit)))
            }
        };
        self.push(name.into(), collection, value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, collection: Collection, value: Tensor<F>) -> ParamId {
        self.push(name.into(), collection, value, false)
    }

    fn push(&mut self, name: String, collection: Collection, value: Tensor<F>, trainable: bool) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name,
            collection,
            value,
            grad,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(F::zero());
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn count_where(&self, pred: impl Fn(&Param<F>) -> bool) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable && pred(p))
            .map(|p| p.value.len())
            .sum()
    }

    /// All values of one collection, concatenated in registration order.
    pub fn flatten(&self, collection: Collection) -> Vec<F> {
        self.params
            .iter()
            .filter(|p| p.collection == collection)
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    /// Inverse of [`flatten`](Self::flatten); returns false on length mismatch.
    pub fn load_flat(&mut self, collection: Collection, values: &[F]) -> bool {
        let expected: usize = self
            .params
            .iter()
            .filter(|p| p.collection == collection)
            .map(|p| p.value.len())
            .sum();
        if expected != values.len() {
            return false;
        }
        let mut offset = 0;
        for p in self.params.iter_mut().filter(|p| p.collection == collection) {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        true
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let zeros = || store.params.iter().map(|p| vec![F::zero(); p.value.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step_size = F::of(lr * bc2.sqrt() / bc1);
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - self.beta1), F::of(1.0 - self.beta2));
        let eps = F::of(self.eps * bc2.sqrt());
        for ((p, m), v) in store.params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = grads[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                values[i] -= step_size * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}
