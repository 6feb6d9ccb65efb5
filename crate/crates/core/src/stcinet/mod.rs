//! The assembled estimator: a ConvLSTM over the current frame, the latent
//! factor model over the history, and the attention U-Net on top.

mod checkpoint;
mod data;
mod evaluate;
mod loss;
mod train;

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attn_unet::{AttnUnet, UnetConfig};
use crate::error::{Error, Result};
use crate::lfm::{Lfm, LfmConfig};
use crate::nn::{Collection, ConvLstm, ParamStore, Real, Session, Var};

pub use checkpoint::{CHECKPOINT_SCHEMA_VERSION, MODEL_FILE};
pub use data::Normalizer;
pub use evaluate::{evaluate, evaluate_predictions, EffectSummary, Evaluation, EvaluationOutput, PerPixelPehe};
pub use loss::{batch_loss, build_weight_map, total_loss, BatchLoss, WeightMap};
pub use train::{learning_rate, predict_counterfactual, train, train_with_progress, EpochRecord, TrainedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Full,
    /// No LFM and no attention.
    Dagger,
    /// LFM, no attention.
    Na,
    /// LFM with spatial attention only.
    Sa,
    /// LFM with attention gates only.
    Ag,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::Dagger, Variant::Na, Variant::Sa, Variant::Ag];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Dagger => "dagger",
            Variant::Na => "na",
            Variant::Sa => "sa",
            Variant::Ag => "ag",
        }
    }

    /// Row label for result tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "STCINet",
            Variant::Dagger => "STCINet†",
            Variant::Na => "STCINet-NA",
            Variant::Sa => "STCINet-SA",
            Variant::Ag => "STCINet-AG",
        }
    }

    pub fn uses_lfm(self) -> bool {
        self != Variant::Dagger
    }

    pub fn spatial_attention(self) -> bool {
        matches!(self, Variant::Full | Variant::Sa)
    }

    pub fn attention_gate(self) -> bool {
        matches!(self, Variant::Full | Variant::Ag)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}; expected one of full, dagger, na, sa, ag")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub history_len: usize,
    /// Frames fed to the current-path ConvLSTM, ending at `t`.
    pub current_len: usize,
    pub lag: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub treated_weight: f64,
    pub base_channels: usize,
    pub lstm_channels: usize,
    pub c_lat: usize,
    pub lfm_lstm_channels: usize,
    pub lfm_mid_channels: usize,
    pub decoder_hidden: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub decay_start_epoch: usize,
    pub decay_rate: f64,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub min_delta: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            history_len: 4,
            current_len: 1,
            lag: 1,
            lambda1: 0.25,
            lambda2: 0.75,
            treated_weight: 2.0,
            base_channels: 16,
            lstm_channels: 16,
            c_lat: 32,
            lfm_lstm_channels: 8,
            lfm_mid_channels: 16,
            decoder_hidden: 8,
            dropout: 0.2,
            learning_rate: 1e-3,
            epochs: 60,
            decay_start_epoch: 10,
            decay_rate: 0.1,
            batch_size: 64,
            early_stop_patience: 10,
            min_delta: 1e-4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || (self.lambda1 + self.lambda2 - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "loss weights must be nonnegative and sum to 1, got {} + {}",
                self.lambda1, self.lambda2
            )));
        }
        if self.treated_weight.is_nan() || self.treated_weight <= 0.0 {
            return Err(Error::config(format!("treated_weight must be positive, got {}", self.treated_weight)));
        }
        if self.history_len == 0 || self.current_len == 0 || self.lag == 0 {
            return Err(Error::config("history_len, current_len and lag must be at least 1"));
        }
        if self.base_channels == 0 || self.lstm_channels == 0 {
            return Err(Error::config("channel widths must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be positive"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.decay_rate < 0.0 || self.min_delta < 0.0 {
            return Err(Error::config("decay_rate and min_delta must be nonnegative"));
        }
        self.lfm_config().validate()
    }

    pub fn lfm_config(&self) -> LfmConfig {
        LfmConfig {
            history_len: self.history_len,
            lstm_hidden: self.lfm_lstm_channels,
            mid_channels: self.lfm_mid_channels,
            c_lat: self.c_lat,
            decoder_hidden: self.decoder_hidden,
            dropout: self.dropout,
        }
    }

    /// First intervention step with a full history and current window.
    pub fn first_step(&self) -> usize {
        self.history_len.max(self.current_len - 1)
    }
}

/// Model structure; parameter values live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Stcinet {
    pub config: ModelConfig,
    n: usize,
    m: usize,
    current: ConvLstm,
    lfm: Option<Lfm>,
    unet: AttnUnet,
}

/// Builds the network for `config.variant` and registers its parameters.
pub fn make_variant<F: Real>(
    config: &ModelConfig,
    n: usize,
    m: usize,
    store: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
) -> Result<Stcinet> {
    Stcinet::new(config.clone(), n, m, store, rng)
}

impl Stcinet {
    pub fn new<F: Real>(
        config: ModelConfig,
        n: usize,
        m: usize,
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        if !n.is_multiple_of(4) || !m.is_multiple_of(4) || n == 0 || m == 0 {
            return Err(Error::config(format!("grid {n}x{m} must be divisible by 4")));
        }
        let variant = config.variant;
        let current = ConvLstm::new(
            store,
            "convlstm",
            Collection::Convlstm,
            2,
            config.lstm_channels,
            config.current_len,
            rng,
        );
        let lfm = if variant.uses_lfm() {
            Some(Lfm::new(config.lfm_config(), n, m, store, rng)?)
        } else {
            None
        };
        let in_channels = config.lstm_channels + if variant.uses_lfm() { config.c_lat } else { 0 };
        let unet = AttnUnet::new(
            UnetConfig {
                in_channels,
                base_channels: config.base_channels,
                spatial_attention: variant.spatial_attention(),
                attention_gate: variant.attention_gate(),
            },
            store,
            rng,
        )?;
        Ok(Self {
            config,
            n,
            m,
            current,
            lfm,
            unet,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.n, self.m)
    }

    pub fn lfm(&self) -> Option<&Lfm> {
        self.lfm.as_ref()
    }

    /// `current` is `[B, 2·current_len, N, M]`, `history` is `[B, 2·h, N, M]`.
    /// Returns the predicted outcome `[B, 1, N, M]` and, with an LFM, the
    /// reconstructed history.
    pub fn forward<F: Real>(&self, s: &mut Session<F>, current: Var, history: Var) -> Result<(Var, Option<Var>)> {
        let [b, cc, cn, cm] = s.graph.shape(current);
        let [hb, hc, hn, hm] = s.graph.shape(history);
        let c = &self.config;
        if cc != 2 * c.current_len || (cn, cm) != (self.n, self.m) {
            return Err(Error::config(format!(
                "current input {:?} does not match {}x{} with {} frames",
                [b, cc, cn, cm],
                self.n,
                self.m,
                c.current_len
            )));
        }
        if hb != b || hc != 2 * c.history_len || (hn, hm) != (self.n, self.m) {
            return Err(Error::config(format!(
                "history input {:?} does not match {}x{} with {} frames",
                [hb, hc, hn, hm],
                self.n,
                self.m,
                c.history_len
            )));
        }
        let frames: Vec<Var> = (0..c.current_len)
            .map(|k| s.graph.slice_channels(current, 2 * k, 2))
            .collect();
        let features = self.current.forward(s, &frames);
        let (unet_in, recon) = match &self.lfm {
            Some(lfm) => {
                let phi = lfm.encode_graph(s, history);
                let recon = lfm.decode_graph(s, phi);
                let up = s.graph.upsample(phi, 4);
                (s.graph.concat(&[features, up]), Some(recon))
            }
            None => (features, None),
        };
        let pred = self.unet.forward(s, unet_in)?;
        Ok((pred, recon))
    }
}

/// Trainable parameters whose name marks them as attention weights.
pub fn attention_parameter_count<F: Real>(store: &ParamStore<F>) -> usize {
    store.count_where(|p| p.name.contains(".sa.") || p.name.contains(".gate."))
}
