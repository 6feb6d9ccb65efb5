use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{CausalDataset, InterventionSpec};
use crate::error::{Error, Result};
use crate::nn::layers::apply_bn_updates;
use crate::nn::{Adam, Collection, FlushDenormals, ParamStore, Session, Tensor};

use super::data::{batch_inputs, batch_targets, sample_steps, Normalizer};
use super::loss::{batch_loss, build_weight_map};
use super::{ModelConfig, Stcinet};

const SHUFFLE_STREAM: u64 = 0x5eed_0001;
const DROPOUT_STREAM: u64 = 0x5eed_0002;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub lfm_loss: f64,
    pub unet_loss: f64,
}

/// `lr0 · exp(−rate · max(0, epoch − decay_start))` with 1-based epochs.
pub fn learning_rate(config: &ModelConfig, epoch: usize) -> f64 {
    let over = epoch.saturating_sub(config.decay_start_epoch) as f64;
    config.learning_rate * (-config.decay_rate * over).exp()
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub normalizer: Normalizer,
    pub store: ParamStore<f32>,
    pub training_log: Vec<EpochRecord>,
    pub(crate) net: Stcinet,
}

impl TrainedModel {
    /// Freshly initialized (untrained) model for an `n × m` grid.
    pub fn init(config: &ModelConfig, n: usize, m: usize, normalizer: Normalizer) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let net = Stcinet::new(config.clone(), n, m, &mut store, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            normalizer,
            store,
            training_log: Vec::new(),
            net,
        })
    }

    pub fn net(&self) -> &Stcinet {
        &self.net
    }

    pub fn grid(&self) -> (usize, usize) {
        self.net.grid()
    }

    pub fn parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn collection_parameter_count(&self, collection: Collection) -> usize {
        self.store.count_where(|p| p.collection == collection)
    }

    pub fn first_step(&self) -> usize {
        self.config.first_step()
    }

    fn check_dataset(&self, dataset: &CausalDataset) -> Result<()> {
        let (n, m) = self.grid();
        if (dataset.grid.n_rows, dataset.grid.n_cols) != (n, m) {
            return Err(Error::validation(format!(
                "model grid {n}x{m} does not match dataset grid {}x{}",
                dataset.grid.n_rows, dataset.grid.n_cols
            )));
        }
        Ok(())
    }

    /// Evaluation-mode predictions of `Y[t + lag]` in original units for every
    /// valid step `t`, optionally with `X[t]` rewritten by `intervention`.
    pub fn predict(&self, dataset: &CausalDataset, intervention: Option<&InterventionSpec>) -> Result<Array3<f32>> {
        self.check_dataset(dataset)?;
        let _ftz = FlushDenormals::enable();
        if let Some(spec) = intervention {
            spec.validate(&dataset.grid)?;
        }
        let steps: Vec<usize> = sample_steps(dataset, &self.config)?.collect();
        let (n, m) = self.grid();
        let mut out = Array3::zeros((steps.len(), n, m));
        let norm = &self.normalizer;
        for (chunk_idx, chunk) in steps.chunks(self.config.batch_size).enumerate() {
            let inputs = batch_inputs::<f32>(dataset, chunk, &self.config, norm, intervention)?;
            let pred = self.forward_eval(inputs.current, inputs.history)?;
            for (b, _) in chunk.iter().enumerate() {
                let row = chunk_idx * self.config.batch_size + b;
                for (dst, &v) in out
                    .index_axis_mut(ndarray::Axis(0), row)
                    .iter_mut()
                    .zip(pred.sample(b))
                {
                    *dst = norm.y_to_original(v as f64) as f32;
                }
            }
        }
        Ok(out)
    }

    /// Standardized-unit forward pass in evaluation mode.
    pub fn forward_eval(&self, current: Tensor<f32>, history: Tensor<f32>) -> Result<Tensor<f32>> {
        let mut s = Session::new(&self.store, false, 0);
        let c = s.graph.input(current);
        let h = s.graph.input(history);
        let (pred, _) = self.net.forward(&mut s, c, h)?;
        Ok(s.graph.value(pred).clone())
    }
}

/// Factual and counterfactual predictions; histories stay observed.
pub fn predict_counterfactual(
    model: &TrainedModel,
    dataset: &CausalDataset,
    spec: &InterventionSpec,
) -> Result<(Array3<f32>, Array3<f32>)> {
    let factual = model.predict(dataset, None)?;
    let counterfactual = model.predict(dataset, Some(spec))?;
    Ok((factual, counterfactual))
}

pub fn train(dataset: &CausalDataset, config: &ModelConfig) -> Result<TrainedModel> {
    train_with_progress(dataset, config, |_| {})
}

/// Trains on factual data only; `on_epoch` sees each finished epoch.
pub fn train_with_progress(
    dataset: &CausalDataset,
    config: &ModelConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainedModel> {
    let _ftz = FlushDenormals::enable();
    config.validate()?;
    dataset.validate()?;
    let steps: Vec<usize> = sample_steps(dataset, config)?.collect();
    let mut model = TrainedModel::init(config, dataset.grid.n_rows, dataset.grid.n_cols, Normalizer::fit(dataset))?;
    let weights: Vec<f32> = build_weight_map(&dataset.intervention.region, config.treated_weight)?
        .w
        .iter()
        .map(|&v| v as f32)
        .collect();
    let mut adam = Adam::new(&model.store);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
    let mut order = steps.clone();
    let mut best = f64::INFINITY;
    let mut stale = 0;

    for epoch in 1..=config.epochs {
        let lr = learning_rate(config, epoch);
        order.shuffle(&mut shuffle_rng);
        let (mut total, mut lfm, mut unet) = (0.0, 0.0, 0.0);
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let inputs = batch_inputs::<f32>(dataset, chunk, config, &model.normalizer, None)?;
            let target = batch_targets::<f32>(dataset, chunk, config.lag, &model.normalizer);
            let seed = config
                .seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(DROPOUT_STREAM)
                .wrapping_add(((epoch as u64) << 32) | batch_idx as u64);
            let (loss, updates) = {
                let mut s = Session::new(&model.store, true, seed);
                let history_tensor = inputs.history;
                let c = s.graph.input(inputs.current);
                let h = s.graph.input(history_tensor.clone());
                let (pred, recon) = model.net.forward(&mut s, c, h)?;
                let recon_pair = recon.map(|r| (s.graph.value(r), &history_tensor));
                let loss = batch_loss(s.graph.value(pred), &target, recon_pair, &weights, config.lambda1, config.lambda2);
                if !loss.total.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        reason: format!("non-finite loss in batch {batch_idx}"),
                    });
                }
                let mut seeds = vec![(pred, loss.d_pred.clone())];
                if let (Some(r), Some(d)) = (recon, loss.d_recon.clone()) {
                    seeds.push((r, d));
                }
                let (mut graph, updates) = s.into_parts();
                graph.backward(seeds);
                model.store.zero_grads();
                graph.accumulate_param_grads(&mut model.store);
                (loss, updates)
            };
            adam.step(&mut model.store, lr);
            apply_bn_updates(&mut model.store, &updates);
            let share = chunk.len() as f64 / order.len() as f64;
            total += loss.total * share;
            lfm += loss.lfm * share;
            unet += loss.unet * share;
        }
        if model.store.iter().any(|(_, p)| !p.value.is_finite()) {
            return Err(Error::Training {
                epoch,
                reason: "non-finite parameters after update".into(),
            });
        }
        let record = EpochRecord {
            epoch,
            learning_rate: lr,
            loss: total,
            lfm_loss: lfm,
            unet_loss: unet,
        };
        log::info!(
            "epoch {epoch}: loss {total:.6} (lfm {lfm:.6}, unet {unet:.6}) lr {lr:.2e}"
        );
        on_epoch(&record);
        model.training_log.push(record);
        if total < best - config.min_delta {
            best = total;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.early_stop_patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    Ok(model)
}
