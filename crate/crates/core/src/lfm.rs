//! Latent factor model: an autoencoder over the treatment/covariate history.
//!
//! The encoder runs a ConvLSTM over the `h` most recent `(X, Z)` frames,
//! then two stride-2 convolutions shrink the final hidden state to a latent
//! map at a quarter of the grid resolution. The decoder is a pair of dense
//! layers that reconstruct the whole window.

use ndarray::{s, Array3, Array4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::SpatioTemporalField;
use crate::nn::{BatchNorm, Collection, Conv2d, ConvLstm, Dense, ParamStore, Real, Session, Tensor, Var};

const COLLECTION: Collection = Collection::Lfm;

/// The `h` frames strictly before `t`, channel 0 = X, channel 1 = Z.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryWindow {
    /// `[h][2][N][M]`
    pub values: Array4<f32>,
}

impl HistoryWindow {
    pub fn new(values: Array4<f32>) -> Result<Self> {
        let (h, c, _, _) = values.dim();
        if h == 0 || c != 2 {
            return Err(Error::config(format!(
                "history window must be [h>=1][2][N][M], got {:?}",
                values.dim()
            )));
        }
        Ok(Self { values })
    }

    /// Frames `t-h .. t-1`; never touches step `t` or later.
    pub fn from_fields(x: &SpatioTemporalField, z: &SpatioTemporalField, t: usize, h: usize) -> Result<Self> {
        if h == 0 || t < h || t > x.n_steps() || x.values.dim() != z.values.dim() {
            return Err(Error::validation(format!(
                "cannot take a {h}-step history before step {t} of {} steps",
                x.n_steps()
            )));
        }
        let (_, n, m) = x.values.dim();
        let mut values = Array4::zeros((h, 2, n, m));
        values.slice_mut(s![.., 0, .., ..]).assign(&x.values.slice(s![t - h..t, .., ..]));
        values.slice_mut(s![.., 1, .., ..]).assign(&z.values.slice(s![t - h..t, .., ..]));
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, _, n, m) = self.values.dim();
        (n, m)
    }

    /// Single-sample `[1, 2h, N, M]` tensor.
    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        let (h, _, n, m) = self.values.dim();
        Tensor::from_vec([1, 2 * h, n, m], self.values.iter().map(|&v| F::of(v as f64)).collect())
    }

    pub fn from_tensor<F: Real>(t: &Tensor<F>) -> Result<Self> {
        let [b, c, n, m] = t.shape();
        if b != 1 || c % 2 != 0 {
            return Err(Error::config(format!("tensor {:?} is not a single history window", t.shape())));
        }
        let data = t.data().iter().map(|v| v.as_f64() as f32).collect();
        Self::new(Array4::from_shape_vec((c / 2, 2, n, m), data).expect("shape checked"))
    }
}

/// Latent map `[c_lat][N/4][M/4]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub phi: Array3<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LfmConfig {
    pub history_len: usize,
    pub lstm_hidden: usize,
    pub mid_channels: usize,
    pub c_lat: usize,
    pub decoder_hidden: usize,
    pub dropout: f64,
}

impl Default for LfmConfig {
    fn default() -> Self {
        Self {
            history_len: 4,
            lstm_hidden: 8,
            mid_channels: 16,
            c_lat: 32,
            decoder_hidden: 8,
            dropout: 0.2,
        }
    }
}

impl LfmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history_len == 0 || self.lstm_hidden == 0 || self.mid_channels == 0 || self.c_lat == 0 {
            return Err(Error::config("LFM widths and history length must be positive"));
        }
        if self.decoder_hidden == 0 {
            return Err(Error::config("LFM decoder width must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Lfm {
    pub config: LfmConfig,
    n: usize,
    m: usize,
    lstm: ConvLstm,
    conv1: Conv2d,
    conv2: Conv2d,
    bn: BatchNorm,
    dec1: Dense,
    dec2: Dense,
}

impl Lfm {
    pub fn new<F: Real>(
        config: LfmConfig,
        n: usize,
        m: usize,
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        if !n.is_multiple_of(4) || !m.is_multiple_of(4) || n == 0 || m == 0 {
            return Err(Error::config(format!("LFM grid {n}x{m} must be divisible by 4")));
        }
        let c = config;
        let lstm = ConvLstm::new(store, "lfm.enc.lstm", COLLECTION, 2, c.lstm_hidden, c.history_len, rng);
        let conv1 = Conv2d::new(store, "lfm.enc.conv1", COLLECTION, c.lstm_hidden, c.mid_channels, 3, 2, true, rng);
        let conv2 = Conv2d::new(store, "lfm.enc.conv2", COLLECTION, c.mid_channels, c.c_lat, 3, 2, true, rng);
        let bn = BatchNorm::new(store, "lfm.enc.bn", COLLECTION, c.c_lat, rng);
        let code_len = c.c_lat * (n / 4) * (m / 4);
        let dec1 = Dense::new(store, "lfm.dec.fc1", COLLECTION, code_len, c.decoder_hidden, rng);
        let dec2 = Dense::new(store, "lfm.dec.fc2", COLLECTION, c.decoder_hidden, 2 * c.history_len * n * m, rng);
        Ok(Self {
            config,
            n,
            m,
            lstm,
            conv1,
            conv2,
            bn,
            dec1,
            dec2,
        })
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.config.c_lat, self.n / 4, self.m / 4]
    }

    /// `history` is `[B, 2h, N, M]`; returns φ as `[B, c_lat, N/4, M/4]`.
    pub fn encode_graph<F: Real>(&self, s: &mut Session<F>, history: Var) -> Var {
        let h = self.config.history_len;
        let steps: Vec<Var> = (0..h).map(|k| s.graph.slice_channels(history, 2 * k, 2)).collect();
        let hidden = self.lstm.forward(s, &steps);
        let x = self.conv1.forward(s, hidden);
        let x = s.graph.relu(x);
        let x = s.dropout(x, self.config.dropout);
        let x = self.conv2.forward(s, x);
        self.bn.forward(s, x)
    }

    /// Reconstructs `[B, 2h, N, M]` from φ.
    pub fn decode_graph<F: Real>(&self, s: &mut Session<F>, phi: Var) -> Var {
        let batch = s.graph.shape(phi)[0];
        let x = self.dec1.forward(s, phi);
        let x = s.graph.relu(x);
        let x = self.dec2.forward(s, x);
        s.graph.reshape(x, [batch, 2 * self.config.history_len, self.n, self.m])
    }

    fn check_window(&self, window: &HistoryWindow) -> Result<()> {
        let expected = (self.config.history_len, 2, self.n, self.m);
        if window.values.dim() != expected {
            return Err(Error::config(format!(
                "history window {:?} does not match LFM configuration {expected:?}",
                window.values.dim()
            )));
        }
        Ok(())
    }

    /// Evaluation-mode encoding of a single window.
    pub fn encode<F: Real>(&self, store: &ParamStore<F>, window: &HistoryWindow) -> Result<LatentCode> {
        self.check_window(window)?;
        let mut s = Session::new(store, false, 0);
        let x = s.graph.input(window.to_tensor());
        let phi = self.encode_graph(&mut s, x);
        let [c, h, w] = self.latent_shape();
        let data = s.graph.value(phi).data().iter().map(|v| v.as_f64() as f32).collect();
        Ok(LatentCode {
            phi: Array3::from_shape_vec((c, h, w), data).expect("latent shape"),
        })
    }

    pub fn decode<F: Real>(&self, store: &ParamStore<F>, code: &LatentCode) -> Result<HistoryWindow> {
        let [c, h, w] = self.latent_shape();
        if code.phi.dim() != (c, h, w) {
            return Err(Error::config(format!(
                "latent code {:?} does not match decoder {:?}",
                code.phi.dim(),
                (c, h, w)
            )));
        }
        let mut s = Session::new(store, false, 0);
        let t = Tensor::from_vec([1, c, h, w], code.phi.iter().map(|&v| F::of(v as f64)).collect());
        let phi = s.graph.input(t);
        let out = self.decode_graph(&mut s, phi);
        HistoryWindow::from_tensor(s.graph.value(out))
    }
}

/// Mean squared difference over every entry of the two windows.
pub fn reconstruction_loss(window: &HistoryWindow, reconstructed: &HistoryWindow) -> Result<f64> {
    if window.values.dim() != reconstructed.values.dim() {
        return Err(Error::validation(format!(
            "reconstruction {:?} does not match window {:?}",
            reconstructed.values.dim(),
            window.values.dim()
        )));
    }
    let n = window.values.len() as f64;
    let sum: f64 = window
        .values
        .iter()
        .zip(reconstructed.values.iter())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Role;
    use rand::{Rng, SeedableRng};

    fn build(seed: u64) -> (Lfm, ParamStore<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let lfm = Lfm::new(LfmConfig::default(), 32, 32, &mut store, &mut rng).unwrap();
        (lfm, store)
    }

    fn random_window(h: usize, n: usize, m: usize, seed: u64) -> HistoryWindow {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HistoryWindow::new(Array4::from_shape_fn((h, 2, n, m), |_| rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn latent_shape_for_default_grid() {
        let (lfm, store) = build(0);
        let code = lfm.encode(&store, &random_window(4, 32, 32, 1)).unwrap();
        assert_eq!(code.phi.dim(), (32, 8, 8));
        assert!(code.phi.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn evaluation_mode_is_deterministic() {
        let (lfm, store) = build(0);
        let w = random_window(4, 32, 32, 2);
        let a = lfm.encode(&store, &w).unwrap();
        let b = lfm.encode(&store, &w.clone()).unwrap();
        assert_eq!(a, b);
        assert_eq!(lfm.decode(&store, &a).unwrap(), lfm.decode(&store, &b).unwrap());
    }

    #[test]
    fn zero_window_with_zero_biases_gives_batch_norm_shift() {
        let (lfm, mut store) = build(3);
        for p in store.iter_mut() {
            if p.name.ends_with(".b") {
                p.value.data_mut().fill(0.0);
            }
        }
        let zero = HistoryWindow::new(Array4::zeros((4, 2, 32, 32))).unwrap();
        let code = lfm.encode(&store, &zero).unwrap();
        // running stats are (0, 1) and beta is 0, so the shift is zero too
        assert!(code.phi.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_matches_window_shape_and_preserves_zero() {
        let (lfm, mut store) = build(4);
        let code = lfm.encode(&store, &random_window(4, 32, 32, 5)).unwrap();
        assert_eq!(lfm.decode(&store, &code).unwrap().values.dim(), (4, 2, 32, 32));
        for p in store.iter_mut() {
            if p.name.starts_with("lfm.dec") && p.name.ends_with(".b") {
                p.value.data_mut().fill(0.0);
            }
        }
        let zero = LatentCode {
            phi: Array3::zeros((32, 8, 8)),
        };
        assert!(lfm.decode(&store, &zero).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn window_shape_is_validated() {
        let (lfm, store) = build(0);
        assert!(matches!(
            lfm.encode(&store, &random_window(3, 32, 32, 0)),
            Err(Error::Config(_))
        ));
        assert!(HistoryWindow::new(Array4::zeros((0, 2, 4, 4))).is_err());
        assert!(Lfm::new(LfmConfig::default(), 30, 32, &mut ParamStore::<f32>::new(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn encoding_ignores_current_and_future_steps() {
        let (lfm, store) = build(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut x = SpatioTemporalField::new(Role::Treatment, Array3::from_shape_fn((12, 32, 32), |_| rng.random()));
        let mut z = SpatioTemporalField::new(Role::Covariate, Array3::from_shape_fn((12, 32, 32), |_| rng.random()));
        let t = 6;
        let before = lfm.encode(&store, &HistoryWindow::from_fields(&x, &z, t, 4).unwrap()).unwrap();
        x.values.slice_mut(s![t.., .., ..]).mapv_inplace(|v| v * 5.0 - 3.0);
        z.values.slice_mut(s![t.., .., ..]).fill(9.0);
        let after = lfm.encode(&store, &HistoryWindow::from_fields(&x, &z, t, 4).unwrap()).unwrap();
        assert_eq!(before, after);
        x.values[[t - 1, 0, 0]] += 1.0;
        let touched = lfm.encode(&store, &HistoryWindow::from_fields(&x, &z, t, 4).unwrap()).unwrap();
        assert_ne!(before, touched);
    }

    #[test]
    fn history_needs_enough_past_steps() {
        let x = SpatioTemporalField::new(Role::Treatment, Array3::zeros((5, 4, 4)));
        let z = SpatioTemporalField::new(Role::Covariate, Array3::zeros((5, 4, 4)));
        assert!(HistoryWindow::from_fields(&x, &z, 3, 4).is_err());
        assert_eq!(HistoryWindow::from_fields(&x, &z, 4, 4).unwrap().len(), 4);
    }

    #[test]
    fn reconstruction_loss_cases() {
        let a = random_window(2, 4, 4, 8);
        assert_eq!(reconstruction_loss(&a, &a).unwrap(), 0.0);
        let shifted = HistoryWindow::new(a.values.mapv(|v| v + 2.0)).unwrap();
        assert!((reconstruction_loss(&a, &shifted).unwrap() - 4.0).abs() < 1e-6);
        let b = random_window(2, 4, 4, 9);
        let mut brute = 0.0f64;
        for h in 0..2 {
            for c in 0..2 {
                for i in 0..4 {
                    for j in 0..4 {
                        let d = a.values[[h, c, i, j]] as f64 - b.values[[h, c, i, j]] as f64;
                        brute += d * d;
                    }
                }
            }
        }
        assert!((reconstruction_loss(&a, &b).unwrap() - brute / 64.0).abs() < 1e-6);
        assert!(reconstruction_loss(&a, &random_window(3, 4, 4, 0)).is_err());
    }
}
