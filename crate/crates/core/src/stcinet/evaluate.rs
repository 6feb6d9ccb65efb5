use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::datagen::{true_effects, CausalDataset};
use crate::effects::{rmse, sqrt_pehe, EffectEstimates};
use crate::error::{Error, Result};

use super::train::{predict_counterfactual, TrainedModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectSummary {
    pub date: f64,
    pub iate: f64,
    pub late: f64,
}

impl From<&EffectEstimates> for EffectSummary {
    fn from(e: &EffectEstimates) -> Self {
        Self {
            date: e.date,
            iate: e.iate,
            late: e.late,
        }
    }
}

/// √PEHE over individual pixels instead of region means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerPixelPehe {
    pub date: f64,
    pub iate: f64,
    pub late: f64,
}

/// Scores against the oracle. The `*_pehe` fields compare the per-step
/// region-mean effect series (S for DATE, S′ for IATE, the whole grid for
/// LATE); `rmse` scores factual predictions in original units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub date_pehe: f64,
    pub iate_pehe: f64,
    pub late_pehe: f64,
    pub rmse: f64,
    pub oracle: EffectSummary,
    pub predicted: EffectSummary,
    pub per_pixel_pehe: PerPixelPehe,
    pub lag: usize,
    pub first_step: usize,
    pub effect_steps: usize,
}

#[derive(Debug, Clone)]
pub struct EvaluationOutput {
    pub metrics: Evaluation,
    pub oracle: EffectEstimates,
    pub predicted: EffectEstimates,
    pub factual_prediction: Array3<f32>,
    pub counterfactual_prediction: Array3<f32>,
}

pub fn evaluate(model: &TrainedModel, dataset: &CausalDataset) -> Result<EvaluationOutput> {
    let (f, cf) = predict_counterfactual(model, dataset, &dataset.intervention)?;
    evaluate_predictions(dataset, model.config.lag, model.first_step(), f, cf)
}

/// Scores externally produced `[steps][N][M]` predictions of `Y[t + lag]`
/// for `t = first_step ..`.
pub fn evaluate_predictions(
    dataset: &CausalDataset,
    lag: usize,
    first_step: usize,
    factual: Array3<f32>,
    counterfactual: Array3<f32>,
) -> Result<EvaluationOutput> {
    if factual.dim() != counterfactual.dim() {
        return Err(Error::validation(format!(
            "factual {:?} and counterfactual {:?} predictions differ in shape",
            factual.dim(),
            counterfactual.dim()
        )));
    }
    let (steps, n, m) = factual.dim();
    if (n, m) != (dataset.grid.n_rows, dataset.grid.n_cols) || steps == 0 {
        return Err(Error::validation(format!(
            "predictions {:?} do not match dataset grid {}x{}",
            factual.dim(),
            dataset.grid.n_rows,
            dataset.grid.n_cols
        )));
    }
    if first_step + steps + lag > dataset.grid.n_steps {
        return Err(Error::validation(format!(
            "{steps} prediction steps from {first_step} with lag {lag} exceed {} dataset steps",
            dataset.grid.n_steps
        )));
    }
    let region = dataset.intervention.region.clone();
    let oracle = true_effects(dataset, lag)?.window(first_step, first_step + steps)?;
    let tau = (&counterfactual.mapv(f64::from) - &factual.mapv(f64::from)).to_owned();
    let predicted = EffectEstimates::from_tau_map(tau, region.clone(), lag, first_step)?;

    let y_true = dataset
        .y
        .values
        .slice(s![first_step + lag..first_step + lag + steps, .., ..]);
    let score = rmse(&y_true, &factual)?;

    let per_pixel = {
        let (mut s_in, mut s_out) = (0.0, 0.0);
        for ((t_idx, i, j), &truth) in oracle.tau_map.indexed_iter() {
            let d = truth - predicted.tau_map[[t_idx, i, j]];
            if region.contains(i, j) {
                s_in += d * d;
            } else {
                s_out += d * d;
            }
        }
        let n_in = (region.treated_count() * steps) as f64;
        let n_out = (region.untreated_count() * steps) as f64;
        PerPixelPehe {
            date: (s_in / n_in).sqrt(),
            iate: (s_out / n_out).sqrt(),
            late: ((s_in + s_out) / (n_in + n_out)).sqrt(),
        }
    };

    let metrics = Evaluation {
        date_pehe: sqrt_pehe(&oracle.date_series(), &predicted.date_series())?,
        iate_pehe: sqrt_pehe(&oracle.iate_series(), &predicted.iate_series())?,
        late_pehe: sqrt_pehe(&oracle.late_series(), &predicted.late_series())?,
        rmse: score,
        oracle: EffectSummary::from(&oracle),
        predicted: EffectSummary::from(&predicted),
        per_pixel_pehe: per_pixel,
        lag,
        first_step,
        effect_steps: steps,
    };
    Ok(EvaluationOutput {
        metrics,
        oracle,
        predicted,
        factual_prediction: factual,
        counterfactual_prediction: counterfactual,
    })
}
