use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::grid::RegionMask;
use crate::lfm::{reconstruction_loss, HistoryWindow};
use crate::nn::{Real, Tensor};

/// Per-pixel loss weights with mean 1; treated cells weigh `treated_weight`
/// times the others.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub w: Array2<f64>,
}

impl WeightMap {
    pub fn uniform(n: usize, m: usize) -> Self {
        Self {
            w: Array2::ones((n, m)),
        }
    }

    pub fn mean(&self) -> f64 {
        self.w.mean().unwrap_or(0.0)
    }
}

pub fn build_weight_map(region: &RegionMask, treated_weight: f64) -> Result<WeightMap> {
    if treated_weight.is_nan() || treated_weight <= 0.0 || !treated_weight.is_finite() {
        return Err(Error::validation(format!("treated_weight must be positive, got {treated_weight}")));
    }
    let raw = region.as_array().mapv(|t| if t { treated_weight } else { 1.0 });
    let mean = raw.mean().expect("nonempty region");
    Ok(WeightMap { w: raw / mean })
}

fn check_lambdas(lambda1: f64, lambda2: f64) -> Result<()> {
    if lambda1 < 0.0 || lambda2 < 0.0 || (lambda1 + lambda2 - 1.0).abs() > 1e-9 {
        return Err(Error::validation(format!(
            "loss weights must be nonnegative and sum to 1, got {lambda1} + {lambda2}"
        )));
    }
    Ok(())
}

/// `mean_ij W_ij · (λ1·L_lfm + λ2·(ŷ_ij − y_ij)²)` for a single sample.
pub fn total_loss(
    y_pred: ArrayView2<'_, f32>,
    y_true: ArrayView2<'_, f32>,
    window: &HistoryWindow,
    reconstructed: &HistoryWindow,
    w: &WeightMap,
    lambda1: f64,
    lambda2: f64,
) -> Result<f64> {
    check_lambdas(lambda1, lambda2)?;
    if y_pred.dim() != y_true.dim() || y_pred.dim() != w.w.dim() {
        return Err(Error::validation(format!(
            "prediction {:?}, target {:?} and weight map {:?} must agree",
            y_pred.dim(),
            y_true.dim(),
            w.w.dim()
        )));
    }
    let l_lfm = reconstruction_loss(window, reconstructed)?;
    let n = y_pred.len() as f64;
    let sum: f64 = y_pred
        .iter()
        .zip(y_true.iter())
        .zip(w.w.iter())
        .map(|((&p, &t), &wt)| {
            let d = p as f64 - t as f64;
            wt * (lambda1 * l_lfm + lambda2 * d * d)
        })
        .sum();
    Ok(sum / n)
}

/// Batch-averaged loss with gradients for the prediction and reconstruction.
#[derive(Debug, Clone)]
pub struct BatchLoss<F> {
    pub total: f64,
    pub lfm: f64,
    pub unet: f64,
    pub d_pred: Tensor<F>,
    pub d_recon: Option<Tensor<F>>,
}

/// Mean over the batch of [`total_loss`]; the reconstruction term is absent
/// for models without an LFM. `w` is the flattened weight map.
pub fn batch_loss<F: Real>(
    pred: &Tensor<F>,
    target: &Tensor<F>,
    recon: Option<(&Tensor<F>, &Tensor<F>)>,
    w: &[F],
    lambda1: f64,
    lambda2: f64,
) -> BatchLoss<F> {
    assert_eq!(pred.shape(), target.shape(), "prediction/target shape");
    let plane = pred.plane();
    assert_eq!(w.len(), plane, "weight map size");
    let batch = pred.batch();
    let denom = (batch * plane) as f64;
    let w_mean = w.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64;

    let mut unet = 0.0;
    let mut d_pred = Tensor::zeros(pred.shape());
    let k = F::of(2.0 * lambda2 / denom);
    for (idx, ((&p, &t), g)) in pred.data().iter().zip(target.data()).zip(d_pred.data_mut()).enumerate() {
        let wt = w[idx % plane];
        let d = p - t;
        unet += (wt * d * d).as_f64();
        *g = k * wt * d;
    }
    unet /= denom;

    let (lfm, d_recon) = match recon {
        Some((r, h)) => {
            assert_eq!(r.shape(), h.shape(), "reconstruction shape");
            let len = r.len() as f64;
            let kr = F::of(2.0 * lambda1 * w_mean / len);
            let mut sum = 0.0;
            let mut grad = Tensor::zeros(r.shape());
            for ((&a, &b), g) in r.data().iter().zip(h.data()).zip(grad.data_mut()) {
                let d = a - b;
                sum += (d * d).as_f64();
                *g = kr * d;
            }
            (sum / len, Some(grad))
        }
        None => (0.0, None),
    };
    BatchLoss {
        total: lambda1 * w_mean * lfm + lambda2 * unet,
        lfm,
        unet,
        d_pred,
        d_recon,
    }
}
