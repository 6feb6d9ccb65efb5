//! Two-level U-Net with spatial attention in the encoder and attention
//! gates on the skip connections.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Collection, Conv2d, ParamStore, Real, Session, Tensor, Var};

const COLLECTION: Collection = Collection::Unet;

/// Per-pixel weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCoefficients {
    pub alpha_map: Array2<f32>,
}

impl AttentionCoefficients {
    /// One map per sample from a `[B, 1, H, W]` tensor.
    pub fn from_tensor<F: Real>(t: &Tensor<F>) -> Vec<Self> {
        let [b, _, h, w] = t.shape();
        (0..b)
            .map(|s| Self {
                alpha_map: Array2::from_shape_vec((h, w), t.sample(s).iter().map(|v| v.as_f64() as f32).collect())
                    .expect("plane shape"),
            })
            .collect()
    }

    pub fn in_unit_interval(&self) -> bool {
        self.alpha_map.iter().all(|&a| (0.0..=1.0).contains(&a))
    }
}

/// Channel max and mean → 1×1 conv → sigmoid → per-pixel weight.
#[derive(Debug, Clone, Copy)]
pub struct SpatialAttention {
    pub reduce: Conv2d,
}

impl SpatialAttention {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, rng: &mut ChaCha8Rng) -> Self {
        Self {
            reduce: Conv2d::new(store, &format!("{name}.reduce"), COLLECTION, 2, 1, 1, 1, true, rng),
        }
    }

    pub fn forward<F: Real>(&self, s: &mut Session<F>, f: Var) -> Var {
        let mx = s.graph.channel_max(f);
        let mean = s.graph.channel_mean(f);
        let pooled = s.graph.concat(&[mx, mean]);
        let logit = self.reduce.forward(s, pooled);
        let alpha = s.graph.sigmoid(logit);
        s.record_attention(alpha);
        s.graph.mul_plane(f, alpha)
    }
}

/// Additive gate: the fine-resolution map is filtered by coefficients
/// computed jointly with the coarser gating signal.
#[derive(Debug, Clone, Copy)]
pub struct AttentionGate {
    /// 3×3, stride 2: brings the gated map to the gating resolution.
    pub theta_x: Conv2d,
    pub phi_g: Conv2d,
    pub psi: Conv2d,
}

impl AttentionGate {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        x_channels: usize,
        g_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let inter = x_channels;
        Self {
            theta_x: Conv2d::new(store, &format!("{name}.theta_x"), COLLECTION, x_channels, inter, 3, 2, false, rng),
            phi_g: Conv2d::new(store, &format!("{name}.phi_g"), COLLECTION, g_channels, inter, 3, 1, true, rng),
            psi: Conv2d::new(store, &format!("{name}.psi"), COLLECTION, inter, 1, 1, 1, true, rng),
        }
    }

    /// `x` is `[B, Cx, 2H, 2W]`, `g` is `[B, Cg, H, W]`; returns `α ⊙ x`.
    pub fn forward<F: Real>(&self, s: &mut Session<F>, x: Var, g: Var) -> Result<Var> {
        let [_, _, xh, xw] = s.graph.shape(x);
        let [_, _, gh, gw] = s.graph.shape(g);
        if xh != 2 * gh || xw != 2 * gw {
            return Err(Error::config(format!(
                "attention gate levels incompatible: x is {xh}x{xw}, gating signal is {gh}x{gw}"
            )));
        }
        let tx = self.theta_x.forward(s, x);
        let pg = self.phi_g.forward(s, g);
        let sum = s.graph.add(tx, pg);
        let act = s.graph.relu(sum);
        let logit = self.psi.forward(s, act);
        let alpha = s.graph.sigmoid(logit);
        let alpha = s.graph.upsample(alpha, 2);
        s.record_attention(alpha);
        Ok(s.graph.mul_plane(x, alpha))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub spatial_attention: bool,
    pub attention_gate: bool,
}

#[derive(Debug, Clone)]
struct DownBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    attention: Option<SpatialAttention>,
    bn: BatchNorm,
}

#[derive(Debug, Clone)]
struct UpBlock {
    gate: Option<AttentionGate>,
    convs: [Conv2d; 3],
}

#[derive(Debug, Clone)]
pub struct AttnUnet {
    pub config: UnetConfig,
    down: [DownBlock; 2],
    bottleneck: [Conv2d; 2],
    up: [UpBlock; 2],
    head: Conv2d,
}

impl AttnUnet {
    pub fn new<F: Real>(config: UnetConfig, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.in_channels == 0 || config.base_channels == 0 {
            return Err(Error::config("U-Net channel counts must be positive"));
        }
        let b = config.base_channels;
        let widths = [b, 2 * b];
        let mut in_c = config.in_channels;
        let down = widths.map(|w| {
            let name = format!("unet.down{w}");
            let block = DownBlock {
                conv1: Conv2d::new(store, &format!("{name}.conv1"), COLLECTION, in_c, w, 3, 1, true, rng),
                conv2: Conv2d::new(store, &format!("{name}.conv2"), COLLECTION, w, w, 3, 1, true, rng),
                attention: config
                    .spatial_attention
                    .then(|| SpatialAttention::new(store, &format!("{name}.sa"), rng)),
                bn: BatchNorm::new(store, &format!("{name}.bn"), COLLECTION, w, rng),
            };
            in_c = w;
            block
        });
        let bott = 4 * b;
        let bottleneck = [
            Conv2d::new(store, "unet.bottleneck.conv1", COLLECTION, 2 * b, bott, 3, 1, true, rng),
            Conv2d::new(store, "unet.bottleneck.conv2", COLLECTION, bott, bott, 3, 1, true, rng),
        ];
        let mut below = bott;
        let up = [2 * b, b].map(|w| {
            let name = format!("unet.up{w}");
            let gate = config
                .attention_gate
                .then(|| AttentionGate::new(store, &format!("{name}.gate"), w, below, rng));
            let convs = [
                Conv2d::new(store, &format!("{name}.conv1"), COLLECTION, below + w, w, 3, 1, true, rng),
                Conv2d::new(store, &format!("{name}.conv2"), COLLECTION, w, w, 3, 1, true, rng),
                Conv2d::new(store, &format!("{name}.conv3"), COLLECTION, w, w, 3, 1, true, rng),
            ];
            below = w;
            UpBlock { gate, convs }
        });
        let head = Conv2d::new(store, "unet.head", COLLECTION, b, 1, 1, 1, true, rng);
        Ok(Self {
            config,
            down,
            bottleneck,
            up,
            head,
        })
    }

    pub fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        let [_, c, n, m] = shape;
        if c != self.config.in_channels {
            return Err(Error::config(format!(
                "U-Net expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if n % 4 != 0 || m % 4 != 0 || n == 0 || m == 0 {
            return Err(Error::config(format!("U-Net input {n}x{m} must be divisible by 4")));
        }
        Ok(())
    }

    /// `[B, C_in, N, M]` → `[B, 1, N, M]`.
    pub fn forward<F: Real>(&self, s: &mut Session<F>, input: Var) -> Result<Var> {
        self.forward_impl(s, input, None)
    }

    pub(crate) fn forward_impl<F: Real>(&self, s: &mut Session<F>, input: Var, drop_skip: Option<usize>) -> Result<Var> {
        self.check_input(s.graph.shape(input))?;
        let mut x = input;
        let mut skips = Vec::with_capacity(2);
        for block in &self.down {
            x = block.conv1.forward(s, x);
            x = s.graph.relu(x);
            x = block.conv2.forward(s, x);
            x = s.graph.relu(x);
            if let Some(sa) = &block.attention {
                x = sa.forward(s, x);
            }
            x = block.bn.forward(s, x);
            skips.push(x);
            x = s.graph.max_pool2(x);
        }
        for conv in &self.bottleneck {
            x = conv.forward(s, x);
            x = s.graph.relu(x);
        }
        for (level, block) in self.up.iter().enumerate() {
            let mut skip = skips[1 - level];
            if drop_skip == Some(level) {
                let zeros = Tensor::zeros(s.graph.shape(skip));
                skip = s.graph.input(zeros);
            }
            let gated = match &block.gate {
                Some(gate) => gate.forward(s, skip, x)?,
                None => skip,
            };
            let up = s.graph.upsample(x, 2);
            x = s.graph.concat(&[up, gated]);
            for conv in &block.convs {
                x = conv.forward(s, x);
                x = s.graph.relu(x);
            }
        }
        Ok(self.head.forward(s, x))
    }
}
