//! Time-delay embedding network with statistics pooling.
//!
//! Frame layers splice their input at fixed offsets and apply an affine map
//! plus a rectifier at every time step where all offsets are in range; there
//! is no edge padding, so each layer shortens the sequence by its context
//! span. Statistics pooling turns the last frame layer's output into per
//! dimension mean and standard deviation, followed by two segment-level
//! affine layers and a softmax over languages. The x-vector is the
//! `segment6` affine output taken before its rectifier.
//!
//! Default dimensions (40-dim input, N languages):
//!
//! | layer    | context          | in x out     |
//! |----------|------------------|--------------|
//! | frame1   | `[t-2, t+2]`     | 200 x 512    |
//! | frame2   | `{t-2, t, t+2}`  | 1536 x 512   |
//! | frame3   | `{t-3, t, t+3}`  | 1536 x 512   |
//! | frame4   | `{t}`            | 512 x 512    |
//! | frame5   | `{t}`            | 512 x 1500   |
//! | pooling  | `[0, T)`         | 1500T x 3000 |
//! | segment6 |                  | 3000 x 512   |
//! | segment7 |                  | 512 x 512    |
//! | softmax  |                  | 512 x N      |

pub mod layers;
mod serialize;
mod train;

use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::config::KvConfig;
use crate::dsp::FeatureMatrix;

pub use serialize::{load_params, save_params, MODEL_MAGIC, MODEL_VERSION};
pub use train::{loss_and_gradient, train, train_step, TrainConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("utterance has {frames} frames, the network needs at least {required}")]
    TooFewFrames { frames: usize, required: usize },
    #[error("feature dimension {found}, network expects {expected}")]
    FeatureDim { expected: usize, found: usize },
    #[error("label {label} outside [0, {num_classes})")]
    InvalidLabel { label: usize, num_classes: usize },
    #[error("empty training batch")]
    EmptyBatch,
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("corrupt model: {0}")]
    CorruptModel(String),
    #[error("model dimensions do not match: {0}")]
    DimMismatch(String),
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameLayerConfig {
    pub context: Vec<i32>,
    pub out_dim: usize,
}

impl FrameLayerConfig {
    pub fn new(context: &[i32], out_dim: usize) -> Self {
        Self {
            context: context.to_vec(),
            out_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    pub feat_dim: usize,
    pub frame_layers: Vec<FrameLayerConfig>,
    pub embed_dim: usize,
    pub segment7_dim: usize,
    pub num_classes: usize,
}

const DEFAULT_CONTEXTS: [&[i32]; 5] = [&[-2, -1, 0, 1, 2], &[-2, 0, 2], &[-3, 0, 3], &[0], &[0]];

impl NetConfig {
    /// The full-size architecture over 40-dim filterbanks.
    pub fn xvector(num_classes: usize) -> Self {
        Self::with_dims(40, [512, 512, 512, 512, 1500], 512, 512, num_classes)
    }

    /// Same contexts as [`NetConfig::xvector`] with custom widths.
    pub fn with_dims(
        feat_dim: usize,
        frame_dims: [usize; 5],
        embed_dim: usize,
        segment7_dim: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            feat_dim,
            frame_layers: DEFAULT_CONTEXTS
                .iter()
                .zip(frame_dims)
                .map(|(c, d)| FrameLayerConfig::new(c, d))
                .collect(),
            embed_dim,
            segment7_dim,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::InvalidConfig(m.to_string()));
        if self.num_classes < 2 {
            return bad("need at least 2 classes");
        }
        if self.frame_layers.is_empty() {
            return bad("need at least one frame layer");
        }
        if self.feat_dim == 0 || self.embed_dim == 0 || self.segment7_dim == 0 {
            return bad("dimensions must be positive");
        }
        for l in &self.frame_layers {
            if l.context.is_empty() || l.out_dim == 0 {
                return bad("frame layers need a context and a positive width");
            }
            if l.context.windows(2).any(|w| w[0] >= w[1]) {
                return bad("context offsets must be strictly increasing");
            }
        }
        Ok(())
    }

    /// Minimum input frames for one pooled time step.
    pub fn receptive_field(&self) -> usize {
        1 + self
            .frame_layers
            .iter()
            .map(|l| layers::context_span(&l.context))
            .sum::<usize>()
    }

    /// Receptive field of the output of frame layer `index` (0-based).
    pub fn total_context(&self, index: usize) -> usize {
        1 + self.frame_layers[..=index]
            .iter()
            .map(|l| layers::context_span(&l.context))
            .sum::<usize>()
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut prev = self.feat_dim;
        for (i, l) in self.frame_layers.iter().enumerate() {
            specs.push(LayerSpec {
                name: format!("frame{}", i + 1),
                context: l.context.clone(),
                in_dim: l.context.len() * prev,
                out_dim: l.out_dim,
                has_nonlinearity: true,
            });
            prev = l.out_dim;
        }
        let k = self.frame_layers.len();
        specs.push(LayerSpec {
            name: "stats_pooling".into(),
            context: Vec::new(),
            in_dim: prev,
            out_dim: 2 * prev,
            has_nonlinearity: false,
        });
        let segment = |idx: usize, name: &str, i: usize, o: usize, nl: bool| LayerSpec {
            name: if name.is_empty() { format!("segment{idx}") } else { name.into() },
            context: vec![0],
            in_dim: i,
            out_dim: o,
            has_nonlinearity: nl,
        };
        specs.push(segment(k + 1, "", 2 * prev, self.embed_dim, true));
        specs.push(segment(k + 2, "", self.embed_dim, self.segment7_dim, true));
        specs.push(segment(0, "softmax", self.segment7_dim, self.num_classes, false));
        specs
    }

    /// Shapes `(out, in)` of every affine layer, pooling excluded.
    fn affine_shapes(&self) -> Vec<(usize, usize)> {
        self.layer_specs()
            .into_iter()
            .filter(|s| s.name != "stats_pooling")
            .map(|s| (s.out_dim, s.in_dim))
            .collect()
    }

    /// Reads `net.*` keys. `net.size = full` selects the full-size widths;
    /// otherwise `net.frame_dims`, `net.embed_dim` and `net.segment7_dim`
    /// give a custom variant.
    pub fn from_kv(kv: &KvConfig, num_classes: usize) -> Result<Self, NetError> {
        let cfg_err = |e: crate::config::ConfigError| NetError::InvalidConfig(e.to_string());
        let feat_dim = kv.get_or("fbank.num_mel_bins", 40usize).map_err(cfg_err)?;
        let cfg = if kv.get_str("net.size") == Some("full") {
            Self {
                feat_dim,
                ..Self::xvector(num_classes)
            }
        } else {
            let dims = match kv.get_list("net.frame_dims") {
                Some(v) => {
                    let parsed: Result<Vec<usize>, _> = v.iter().map(|s| s.parse()).collect();
                    let parsed = parsed.map_err(|_| NetError::InvalidConfig("net.frame_dims".into()))?;
                    <[usize; 5]>::try_from(parsed)
                        .map_err(|_| NetError::InvalidConfig("net.frame_dims needs 5 values".into()))?
                }
                None => [32, 32, 32, 32, 64],
            };
            Self::with_dims(
                feat_dim,
                dims,
                kv.get_or("net.embed_dim", 32usize).map_err(cfg_err)?,
                kv.get_or("net.segment7_dim", 32usize).map_err(cfg_err)?,
                num_classes,
            )
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub context: Vec<i32>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub has_nonlinearity: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    /// `out x in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// All affine layers in order: frame layers, `segment6`, `segment7`, output.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub config: NetConfig,
    pub layers: Vec<Affine>,
}

impl NetworkParams {
    pub fn zeros(config: NetConfig) -> Self {
        let layers = config
            .affine_shapes()
            .into_iter()
            .map(|(o, i)| Affine::zeros(o, i))
            .collect();
        Self { config, layers }
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn num_frame_layers(&self) -> usize {
        self.config.frame_layers.len()
    }

    pub fn segment6(&self) -> &Affine {
        &self.layers[self.num_frame_layers()]
    }

    pub fn segment6_mut(&mut self) -> &mut Affine {
        let k = self.num_frame_layers();
        &mut self.layers[k]
    }

    pub fn output(&self) -> &Affine {
        self.layers.last().expect("nonempty")
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Affine::num_params).sum()
    }

    /// Parameters up to and including `segment6`.
    pub fn embedding_param_count(&self) -> usize {
        self.layers[..=self.num_frame_layers()]
            .iter()
            .map(Affine::num_params)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// `self += scale * other`, layer by layer.
    pub fn add_scaled(&mut self, other: &NetworkParams, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(scale, &b.weight);
            a.bias.scaled_add(scale, &b.bias);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.iter().chain(&l.bias).map(|v| v * v).sum::<f64>())
            .sum()
    }
}

/// Gaussian weights with standard deviation `1/sqrt(in_dim)`, zero biases.
pub fn init_network(config: NetConfig, seed: u64) -> Result<NetworkParams, NetError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = NetworkParams::zeros(config);
    for layer in &mut params.layers {
        let std = 1.0 / (layer.weight.ncols() as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        layer.weight.mapv_inplace(|_| dist.sample(&mut rng));
    }
    Ok(params)
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Spliced input of each frame layer.
    pub spliced: Vec<Array2<f64>>,
    /// Rectified output of each frame layer.
    pub frame_out: Vec<Array2<f64>>,
    pub pool: layers::PoolStats,
    pub pooled: Array1<f64>,
    /// `segment6` affine output: the x-vector.
    pub embedding: Array1<f64>,
    pub segment6_out: Array1<f64>,
    pub segment7_out: Array1<f64>,
    pub logits: Array1<f64>,
    pub log_posteriors: Array1<f64>,
}

impl ForwardCache {
    pub fn posteriors(&self) -> Array1<f64> {
        self.log_posteriors.mapv(f64::exp)
    }
}

fn check_input(params: &NetworkParams, frames: ArrayView2<f64>) -> Result<(), NetError> {
    if frames.ncols() != params.config.feat_dim {
        return Err(NetError::FeatureDim {
            expected: params.config.feat_dim,
            found: frames.ncols(),
        });
    }
    let required = params.config.receptive_field();
    if frames.nrows() < required {
        return Err(NetError::TooFewFrames {
            frames: frames.nrows(),
            required,
        });
    }
    Ok(())
}

pub fn forward(params: &NetworkParams, features: &FeatureMatrix) -> Result<ForwardCache, NetError> {
    forward_frames(params, features.frames.view())
}

pub fn forward_frames(params: &NetworkParams, frames: ArrayView2<f64>) -> Result<ForwardCache, NetError> {
    check_input(params, frames)?;
    let k = params.num_frame_layers();
    let mut spliced = Vec::with_capacity(k);
    let mut frame_out: Vec<Array2<f64>> = Vec::with_capacity(k);
    for (i, (lc, layer)) in params.config.frame_layers.iter().zip(&params.layers).enumerate() {
        let input = if i == 0 { frames } else { frame_out[i - 1].view() };
        let s = layers::splice(input, &lc.context);
        let mut z = layers::affine_rows(s.view(), layer.weight.view(), layer.bias.view());
        layers::relu_inplace(&mut z);
        spliced.push(s);
        frame_out.push(z);
    }
    let pool = layers::stats_pool(frame_out[k - 1].view());
    let pooled = pool.concat();

    let seg6 = &params.layers[k];
    let embedding = layers::affine_vec(pooled.view(), seg6.weight.view(), seg6.bias.view());
    let segment6_out = embedding.mapv(|v| v.max(0.0));
    let seg7 = &params.layers[k + 1];
    let mut segment7_out = layers::affine_vec(segment6_out.view(), seg7.weight.view(), seg7.bias.view());
    layers::relu_inplace(&mut segment7_out);
    let out = &params.layers[k + 2];
    let logits = layers::affine_vec(segment7_out.view(), out.weight.view(), out.bias.view());
    let log_posteriors = layers::log_softmax(logits.view());
    Ok(ForwardCache {
        spliced,
        frame_out,
        pool,
        pooled,
        embedding,
        segment6_out,
        segment7_out,
        logits,
        log_posteriors,
    })
}

/// Utterance embedding taken from `segment6`.
#[derive(Debug, Clone, PartialEq)]
pub struct XVector {
    pub source_segment: String,
    pub values: Array1<f64>,
}

impl XVector {
    pub fn new(source_segment: impl Into<String>, values: Array1<f64>) -> Self {
        Self {
            source_segment: source_segment.into(),
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// The `segment6` affine output before its rectifier.
pub fn extract_xvector(params: &NetworkParams, features: &FeatureMatrix) -> Result<Array1<f64>, NetError> {
    Ok(forward(params, features)?.embedding)
}
