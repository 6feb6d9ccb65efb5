use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::datagen::{apply_intervention, CausalDataset, InterventionSpec};
use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

use super::ModelConfig;

/// Per-variable affine standardization fitted on the factual training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub x_mean: f64,
    pub x_std: f64,
    pub z_mean: f64,
    pub z_std: f64,
    pub y_mean: f64,
    pub y_std: f64,
}

fn moments(values: &Array3<f32>) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > 1e-12 { std } else { 1.0 })
}

impl Normalizer {
    pub fn identity() -> Self {
        Self {
            x_mean: 0.0,
            x_std: 1.0,
            z_mean: 0.0,
            z_std: 1.0,
            y_mean: 0.0,
            y_std: 1.0,
        }
    }

    pub fn fit(dataset: &CausalDataset) -> Self {
        let (x_mean, x_std) = moments(&dataset.x.values);
        let (z_mean, z_std) = moments(&dataset.z.values);
        let (y_mean, y_std) = moments(&dataset.y.values);
        Self {
            x_mean,
            x_std,
            z_mean,
            z_std,
            y_mean,
            y_std,
        }
    }

    pub fn y_to_original(&self, v: f64) -> f64 {
        v * self.y_std + self.y_mean
    }
}

/// Checks that the dataset is usable with `config` and returns the valid
/// intervention steps `first_step .. T - lag`.
pub(crate) fn sample_steps(dataset: &CausalDataset, config: &ModelConfig) -> Result<std::ops::Range<usize>> {
    let t_total = dataset.grid.n_steps;
    let first = config.first_step();
    if t_total <= first + config.lag {
        return Err(Error::validation(format!(
            "dataset has {t_total} steps; need more than history {} + lag {}",
            first, config.lag
        )));
    }
    Ok(first..t_total - config.lag)
}

/// Network inputs for one batch of intervention steps.
pub(crate) struct BatchInputs<F> {
    pub current: Tensor<F>,
    pub history: Tensor<F>,
}

/// Fills `[B, 2·current_len, N, M]` and `[B, 2h, N, M]` input tensors. When
/// `intervention` is given it rewrites `X` at step `t` only.
pub(crate) fn batch_inputs<F: Real>(
    dataset: &CausalDataset,
    steps: &[usize],
    config: &ModelConfig,
    norm: &Normalizer,
    intervention: Option<&InterventionSpec>,
) -> Result<BatchInputs<F>> {
    let (_, n, m) = dataset.x.values.dim();
    let plane = n * m;
    let (h, c) = (config.history_len, config.current_len);
    let mut current = Tensor::zeros([steps.len(), 2 * c, n, m]);
    let mut history = Tensor::zeros([steps.len(), 2 * h, n, m]);
    let fx = |v: f32| F::of((v as f64 - norm.x_mean) / norm.x_std);
    let fz = |v: f32| F::of((v as f64 - norm.z_mean) / norm.z_std);
    let write = |dst: &mut [F], src: ndarray::ArrayView2<'_, f32>, f: &dyn Fn(f32) -> F| {
        for (d, &v) in dst.iter_mut().zip(src.iter()) {
            *d = f(v);
        }
    };
    for (b, &t) in steps.iter().enumerate() {
        let cur = current.sample_mut(b);
        for k in 0..c {
            let step = t + 1 + k - c;
            let off = 2 * k * plane;
            let x_frame = dataset.x.slice(step);
            match intervention {
                Some(spec) if step == t => {
                    let xf: Array2<f64> = x_frame.mapv(|v| v as f64);
                    let xi = apply_intervention(xf.view(), spec, t)?;
                    for (d, &v) in cur[off..off + plane].iter_mut().zip(xi.iter()) {
                        *d = F::of((v - norm.x_mean) / norm.x_std);
                    }
                }
                _ => write(&mut cur[off..off + plane], x_frame, &fx),
            }
            write(&mut cur[off + plane..off + 2 * plane], dataset.z.slice(step), &fz);
        }
        let hist = history.sample_mut(b);
        for k in 0..h {
            let step = t - h + k;
            let off = 2 * k * plane;
            write(&mut hist[off..off + plane], dataset.x.slice(step), &fx);
            write(&mut hist[off + plane..off + 2 * plane], dataset.z.slice(step), &fz);
        }
    }
    Ok(BatchInputs { current, history })
}

/// Standardized targets `Y[t + lag]` as `[B, 1, N, M]`.
pub(crate) fn batch_targets<F: Real>(
    dataset: &CausalDataset,
    steps: &[usize],
    lag: usize,
    norm: &Normalizer,
) -> Tensor<F> {
    let (_, n, m) = dataset.y.values.dim();
    let mut out = Tensor::zeros([steps.len(), 1, n, m]);
    for (b, &t) in steps.iter().enumerate() {
        for (d, &v) in out.sample_mut(b).iter_mut().zip(dataset.y.slice(t + lag).iter()) {
            *d = F::of((v as f64 - norm.y_mean) / norm.y_std);
        }
    }
    out
}
