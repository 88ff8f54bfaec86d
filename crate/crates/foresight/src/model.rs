//! The prediction model: three networks sharing one architecture family.
//!
//! - prediction network: frame encoder → conv-LSTM trunk → decoder,
//!   conditioned on an action code and a latent sample appended along the
//!   channel dimension;
//! - posterior network: encodes the *current* frame (teacher forcing) into
//!   the latent distribution used for training;
//! - prior network: encodes the *previous* frame into the learned prior the
//!   model samples from at test time.
//!
//! Parameters split into disjoint groups by name prefix (`prediction.`,
//! `posterior.`, `prior.`) so the groups are enumerable and checkpointable
//! independently.

use ndarray::{Array2, Array3, Array4, Array5, ArrayD, ArrayView2, ArrayView3, ArrayView4, Axis, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::nn::{BoundParams, Conv2d, ConvLstm, Dense, ParamStore};
use crate::rng::derive_rng;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("state vector given but use_state is false")]
    UnexpectedState,
    #[error("use_state is true but no state vector given")]
    MissingState,
    #[error("posterior-mode rollout requires ground-truth target frames")]
    MissingTargets,
    #[error("recurrent state does not match this model: {0}")]
    UninitializedState(String),
    #[error("sigma must be strictly positive")]
    NonPositiveSigma,
    #[error("checkpoint parameters do not match the config: {0}")]
    ParamMismatch(String),
}

/// Encoder depth variants. The three named variants follow the standard
/// VGG channel progression at full width; `Custom` builds a reduced
/// conv/pool pyramid for desk-scale experiments.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    Vgg16Conv3_3,
    Vgg16Conv4_3,
    Vgg19Conv4_4,
    Custom {
        stage_channels: Vec<usize>,
        convs_per_stage: usize,
    },
}

impl EncoderVariant {
    /// `(convs, channels)` per stage; each stage ends in a 2×2 max pool.
    pub fn stages(&self) -> Vec<(usize, usize)> {
        match self {
            EncoderVariant::Vgg16Conv3_3 => vec![(2, 64), (2, 128), (3, 256)],
            EncoderVariant::Vgg16Conv4_3 => vec![(2, 64), (2, 128), (3, 256), (3, 512)],
            EncoderVariant::Vgg19Conv4_4 => vec![(2, 64), (2, 128), (4, 256), (4, 512)],
            EncoderVariant::Custom {
                stage_channels,
                convs_per_stage,
            } => stage_channels
                .iter()
                .map(|&c| (*convs_per_stage, c))
                .collect(),
        }
    }

    /// Channel width the shared recurrent trunk expects. Variants that stop
    /// short of 512 channels get a 1×1 projection plus one extra pool so the
    /// trunk is identical across the depth ablation.
    pub fn projection_to(&self) -> Option<usize> {
        match self {
            EncoderVariant::Vgg16Conv3_3 => Some(512),
            _ => None,
        }
    }

    /// Total spatial downsampling factor (2 per pool).
    pub fn downsample(&self) -> usize {
        let pools = self.stages().len() + usize::from(self.projection_to().is_some());
        1 << pools
    }

    /// Channels of the encoder output feature map.
    pub fn feature_channels(&self) -> usize {
        self.projection_to()
            .unwrap_or_else(|| self.stages().last().expect("nonempty stages").1)
    }

    /// The named VGG variants pool by max, as VGG does. The reduced custom
    /// variant pools by averaging: at small channel widths a max pool
    /// discards the sub-cell position of moving sprites, which average
    /// pooling preserves linearly.
    pub fn avg_pool(&self) -> bool {
        matches!(self, EncoderVariant::Custom { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderVariant,
    /// Input frame size (height, width).
    pub input_hw: (usize, usize),
    /// Channels of the encoded action grid.
    pub action_code_channels: usize,
    /// Channels of the latent grid z.
    pub latent_channels: usize,
    pub lstm_hidden: usize,
    pub lstm_kernel: usize,
    pub predictor_lstm_layers: usize,
    pub prior_lstm_layers: usize,
    pub posterior_lstm_layers: usize,
    /// Concatenate the robot state onto the action before encoding.
    pub use_state: bool,
    pub n_action: usize,
    pub n_state: usize,
    /// Scale of the fixed-variance Laplace output distribution; constant, so
    /// the reconstruction term reduces to a mean ℓ1 loss.
    pub laplace_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderVariant::Vgg19Conv4_4,
            input_hw: (crate::data::FRAME_H, crate::data::FRAME_W),
            action_code_channels: 2,
            latent_channels: 16,
            lstm_hidden: 512,
            lstm_kernel: 3,
            predictor_lstm_layers: 2,
            prior_lstm_layers: 1,
            posterior_lstm_layers: 1,
            use_state: false,
            n_action: 4,
            n_state: 4,
            laplace_scale: 1.0,
        }
    }
}

impl ModelConfig {
    /// A small configuration for tests and CPU-sized experiments: custom
    /// three-stage encoder, narrow trunk, 48×64 input.
    pub fn desk_scale() -> Self {
        ModelConfig {
            encoder: EncoderVariant::Custom {
                stage_channels: vec![8, 16, 32],
                convs_per_stage: 1,
            },
            lstm_hidden: 32,
            latent_channels: 4,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let stages = self.encoder.stages();
        if stages.is_empty() {
            return Err(ModelError::Config("encoder needs at least one stage".into()));
        }
        if stages.iter().any(|&(convs, ch)| convs == 0 || ch == 0) {
            return Err(ModelError::Config(
                "encoder stages need at least one conv and one channel".into(),
            ));
        }
        let down = self.encoder.downsample();
        let (h, w) = self.input_hw;
        if h % down != 0 || w % down != 0 {
            return Err(ModelError::Config(format!(
                "input {h}x{w} is not divisible by the encoder downsampling {down}"
            )));
        }
        if h / down == 0 || w / down == 0 {
            return Err(ModelError::Config(format!(
                "input {h}x{w} vanishes after {down}x downsampling"
            )));
        }
        if self.latent_channels == 0 {
            return Err(ModelError::Config("latent_channels must be positive".into()));
        }
        if self.action_code_channels == 0 {
            return Err(ModelError::Config(
                "action_code_channels must be positive".into(),
            ));
        }
        if self.lstm_hidden == 0
            || self.predictor_lstm_layers == 0
            || self.prior_lstm_layers == 0
            || self.posterior_lstm_layers == 0
        {
            return Err(ModelError::Config(
                "lstm hidden size and layer counts must be positive".into(),
            ));
        }
        if self.lstm_kernel % 2 == 0 {
            return Err(ModelError::Config("lstm_kernel must be odd".into()));
        }
        if self.n_action == 0 {
            return Err(ModelError::Config("n_action must be positive".into()));
        }
        if self.use_state && self.n_state == 0 {
            return Err(ModelError::Config(
                "use_state requires a positive n_state".into(),
            ));
        }
        if !(self.laplace_scale > 0.0) {
            return Err(ModelError::Config("laplace_scale must be positive".into()));
        }
        Ok(())
    }

    /// Encoder output shape, channels last: `(fh, fw, C)`.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let down = self.encoder.downsample();
        (
            self.input_hw.0 / down,
            self.input_hw.1 / down,
            self.encoder.feature_channels(),
        )
    }

    /// Channel width entering the predictor trunk:
    /// features + action code + latent.
    pub fn predictor_input_channels(&self) -> usize {
        self.encoder.feature_channels() + self.action_code_channels + self.latent_channels
    }

    /// Width of the action-encoder input vector.
    pub fn action_input_dim(&self) -> usize {
        self.n_action + if self.use_state { self.n_state } else { 0 }
    }
}

/// Trainable parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Prediction,
    Posterior,
    Prior,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [
        ParamGroup::Prediction,
        ParamGroup::Posterior,
        ParamGroup::Prior,
    ];

    pub fn prefix(&self) -> &'static str {
        match self {
            ParamGroup::Prediction => "prediction.",
            ParamGroup::Posterior => "posterior.",
            ParamGroup::Prior => "prior.",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ParamKind {
    ConvWeight,
    DenseWeight,
    Bias,
    LstmWeight,
    LstmBias,
}

/// Every parameter the config implies, in construction order:
/// `(name, shape, kind)`.
pub(crate) fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, ParamKind)> {
    let mut out = Vec::new();
    let stages = cfg.encoder.stages();
    let feat_ch = cfg.encoder.feature_channels();
    let k = cfg.lstm_kernel;

    for net in ["prediction", "posterior", "prior"] {
        // frame encoder
        let mut in_ch = 3;
        for (si, &(convs, ch)) in stages.iter().enumerate() {
            for ci in 0..convs {
                out.push((
                    format!("{net}.encoder.s{si}.c{ci}.w"),
                    vec![ch, in_ch, 3, 3],
                    ParamKind::ConvWeight,
                ));
                out.push((
                    format!("{net}.encoder.s{si}.c{ci}.b"),
                    vec![ch],
                    ParamKind::Bias,
                ));
                in_ch = ch;
            }
        }
        if let Some(proj) = cfg.encoder.projection_to() {
            out.push((
                format!("{net}.encoder.project.w"),
                vec![proj, in_ch, 1, 1],
                ParamKind::ConvWeight,
            ));
            out.push((
                format!("{net}.encoder.project.b"),
                vec![proj],
                ParamKind::Bias,
            ));
        }

        // action encoder
        let (fh, fw, _) = cfg.feature_shape();
        out.push((
            format!("{net}.action_enc.w"),
            vec![cfg.action_input_dim(), fh * fw * cfg.action_code_channels],
            ParamKind::DenseWeight,
        ));
        out.push((
            format!("{net}.action_enc.b"),
            vec![fh * fw * cfg.action_code_channels],
            ParamKind::Bias,
        ));

        // recurrent trunk
        let (layers, first_in) = match net {
            "prediction" => (
                cfg.predictor_lstm_layers,
                feat_ch + cfg.action_code_channels + cfg.latent_channels,
            ),
            "posterior" => (
                cfg.posterior_lstm_layers,
                feat_ch + cfg.action_code_channels,
            ),
            _ => (cfg.prior_lstm_layers, feat_ch + cfg.action_code_channels),
        };
        let mut lstm_in = first_in;
        for l in 0..layers {
            out.push((
                format!("{net}.lstm.l{l}.w"),
                vec![4 * cfg.lstm_hidden, lstm_in + cfg.lstm_hidden, k, k],
                ParamKind::LstmWeight,
            ));
            out.push((
                format!("{net}.lstm.l{l}.b"),
                vec![4 * cfg.lstm_hidden],
                ParamKind::LstmBias,
            ));
            lstm_in = cfg.lstm_hidden;
        }

        if net == "prediction" {
            // decoder mirrors the encoder
            let mut in_ch = cfg.lstm_hidden;
            if cfg.encoder.projection_to().is_some() {
                let unproj = stages.last().unwrap().1;
                out.push((
                    "prediction.decoder.unproject.w".to_string(),
                    vec![unproj, in_ch, 1, 1],
                    ParamKind::ConvWeight,
                ));
                out.push((
                    "prediction.decoder.unproject.b".to_string(),
                    vec![unproj],
                    ParamKind::Bias,
                ));
                in_ch = unproj;
            }
            for (di, si) in (0..stages.len()).rev().enumerate() {
                let (convs, ch) = stages[si];
                for ci in 0..convs {
                    let last = ci == convs - 1;
                    let out_ch = if !last {
                        ch
                    } else if si == 0 {
                        3
                    } else {
                        stages[si - 1].1
                    };
                    out.push((
                        format!("prediction.decoder.d{di}.c{ci}.w"),
                        vec![out_ch, in_ch, 3, 3],
                        ParamKind::ConvWeight,
                    ));
                    out.push((
                        format!("prediction.decoder.d{di}.c{ci}.b"),
                        vec![out_ch],
                        ParamKind::Bias,
                    ));
                    in_ch = out_ch;
                }
            }
        } else {
            // latent head: position-wise dense (1×1 conv) emitting mu ++ logvar
            out.push((
                format!("{net}.latent_head.w"),
                vec![2 * cfg.latent_channels, cfg.lstm_hidden, 1, 1],
                ParamKind::ConvWeight,
            ));
            out.push((
                format!("{net}.latent_head.b"),
                vec![2 * cfg.latent_channels],
                ParamKind::Bias,
            ));
        }
    }
    out
}

/// A built model: config plus parameters.
#[derive(Clone)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamStore,
}

/// Build a model with seeded parameter initialization. Two builds with the
/// same config and seed are identical.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model, ModelError> {
    cfg.validate()?;
    let mut rng = derive_rng(seed, &[0x6d6f64656c]); // "model"
    let mut params = ParamStore::new();
    for (name, shape, kind) in param_layout(cfg) {
        let value = match kind {
            ParamKind::ConvWeight | ParamKind::LstmWeight => {
                let fan_in: usize = shape[1] * shape[2] * shape[3];
                crate::nn::init_uniform(&shape, fan_in, &mut rng)
            }
            ParamKind::DenseWeight => crate::nn::init_uniform(&shape, shape[0], &mut rng),
            ParamKind::Bias => crate::nn::zeros(&shape),
            ParamKind::LstmBias => {
                let hidden = shape[0] / 4;
                let mut b = crate::nn::zeros(&shape);
                b.slice_axis_mut(Axis(0), ndarray::Slice::from(hidden..2 * hidden))
                    .fill(1.0);
                b
            }
        };
        params.insert(&name, value);
    }
    Ok(Model { cfg: cfg.clone(), params })
}

impl Model {
    /// Reassemble a model from a config and a parameter store (checkpoint
    /// load path); names and shapes must match the config's layout exactly.
    pub fn from_parts(cfg: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        cfg.validate()?;
        let layout = param_layout(&cfg);
        if layout.len() != params.len() {
            return Err(ModelError::ParamMismatch(format!(
                "expected {} tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &layout {
            match params.get(name) {
                None => return Err(ModelError::ParamMismatch(format!("missing {name}"))),
                Some(v) if v.shape() != shape.as_slice() => {
                    return Err(ModelError::ParamMismatch(format!(
                        "{name}: expected {:?}, got {:?}",
                        shape,
                        v.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(Model { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn group_param_count(&self, group: ParamGroup) -> usize {
        self.params.scalar_count_prefix(group.prefix())
    }

    pub fn group_names(&self, group: ParamGroup) -> Vec<String> {
        self.params
            .names()
            .filter(|n| n.starts_with(group.prefix()))
            .cloned()
            .collect()
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    /// Trainable bind exposed for the architecture-probe example.
    #[doc(hidden)]
    pub fn bind_with_params_for_probe(&self, tape: &mut Tape) -> (BoundModel, BoundParams) {
        self.bind_with_params(tape, true)
    }

    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        self.bind_with_params(tape, trainable).0
    }

    /// Bind and also return the name → tape-handle map (the training path
    /// reads gradients back through it).
    pub(crate) fn bind_with_params(
        &self,
        tape: &mut Tape,
        trainable: bool,
    ) -> (BoundModel, BoundParams) {
        let params = if trainable {
            self.params.bind(tape)
        } else {
            self.params.bind_frozen(tape)
        };
        let handles = params.clone_handles();
        (BoundModel::new(&self.cfg, params), handles)
    }

    /// Fresh zeroed recurrent state for a batch.
    pub fn init_state(&self, batch: usize) -> RecurrentState {
        let (fh, fw, _) = self.cfg.feature_shape();
        let zeros = |layers: usize| {
            (0..layers)
                .map(|_| {
                    (
                        ArrayD::zeros(IxDyn(&[batch, self.cfg.lstm_hidden, fh, fw])),
                        ArrayD::zeros(IxDyn(&[batch, self.cfg.lstm_hidden, fh, fw])),
                    )
                })
                .collect()
        };
        RecurrentState {
            batch,
            hidden: self.cfg.lstm_hidden,
            fh,
            fw,
            prediction: zeros(self.cfg.predictor_lstm_layers),
            posterior: zeros(self.cfg.posterior_lstm_layers),
            prior: zeros(self.cfg.prior_lstm_layers),
        }
    }
}

/// Latent distribution parameters, channels last `(fh, fw, L)`.
#[derive(Clone, Debug)]
pub struct LatentParams {
    pub mu: Array3<f64>,
    pub sigma: Array3<f64>,
}

/// A drawn latent with its distribution parameters.
#[derive(Clone, Debug)]
pub struct LatentSample {
    pub mu: Array3<f64>,
    pub sigma: Array3<f64>,
    pub z: Array3<f64>,
}

/// Reparameterized draw: `z = mu + sigma ⊙ noise`.
pub fn sample_latent(
    mu: &ArrayView3<f64>,
    sigma: &ArrayView3<f64>,
    noise: &ArrayView3<f64>,
) -> Result<Array3<f64>, ModelError> {
    if mu.shape() != sigma.shape() || mu.shape() != noise.shape() {
        return Err(ModelError::ShapeMismatch {
            what: "sample_latent".into(),
            expected: mu.shape().to_vec(),
            got: noise.shape().to_vec(),
        });
    }
    if sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(ModelError::NonPositiveSigma);
    }
    Ok(mu.to_owned() + &(&sigma.to_owned() * &noise.to_owned()))
}

/// Opaque per-network hidden/cell tensors, reset at sequence start via
/// [`Model::init_state`].
#[derive(Clone, Debug)]
pub struct RecurrentState {
    batch: usize,
    hidden: usize,
    fh: usize,
    fw: usize,
    prediction: Vec<(ArrayD<f64>, ArrayD<f64>)>,
    posterior: Vec<(ArrayD<f64>, ArrayD<f64>)>,
    prior: Vec<(ArrayD<f64>, ArrayD<f64>)>,
}

impl RecurrentState {
    pub fn batch(&self) -> usize {
        self.batch
    }

    fn check(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let (fh, fw, _) = cfg.feature_shape();
        if self.hidden != cfg.lstm_hidden
            || self.fh != fh
            || self.fw != fw
            || self.prediction.len() != cfg.predictor_lstm_layers
            || self.posterior.len() != cfg.posterior_lstm_layers
            || self.prior.len() != cfg.prior_lstm_layers
        {
            return Err(ModelError::UninitializedState(
                "state shapes do not match the model config; build it with init_state".into(),
            ));
        }
        Ok(())
    }
}

// ---- bound (on-tape) networks ----

#[doc(hidden)]
pub struct BoundEncoder {
    stages: Vec<Vec<Conv2d>>,
    project: Option<Conv2d>,
    avg_pool: bool,
}

impl BoundEncoder {
    fn pool(&self, tape: &mut Tape, x: Var) -> Var {
        if self.avg_pool {
            tape.avgpool2(x)
        } else {
            tape.maxpool2(x)
        }
    }

    fn forward(&self, tape: &mut Tape, mut x: Var) -> Var {
        for stage in &self.stages {
            for conv in stage {
                x = conv.forward(tape, x);
                x = tape.relu(x);
            }
            x = self.pool(tape, x);
        }
        if let Some(p) = &self.project {
            x = p.forward(tape, x);
            x = tape.relu(x);
            x = self.pool(tape, x);
        }
        x
    }
}

#[doc(hidden)]
pub struct BoundDecoder {
    unproject: Option<Conv2d>,
    stages: Vec<Vec<Conv2d>>,
}

impl BoundDecoder {
    fn forward(&self, tape: &mut Tape, mut x: Var) -> Var {
        if let Some(u) = &self.unproject {
            x = tape.upsample2(x);
            x = u.forward(tape, x);
            x = tape.relu(x);
        }
        let n = self.stages.len();
        for (di, stage) in self.stages.iter().enumerate() {
            x = tape.upsample2(x);
            for (ci, conv) in stage.iter().enumerate() {
                x = conv.forward(tape, x);
                let output_conv = di == n - 1 && ci == stage.len() - 1;
                x = if output_conv {
                    tape.sigmoid(x)
                } else {
                    tape.relu(x)
                };
            }
        }
        x
    }
}

#[doc(hidden)]
pub struct BoundNet {
    pub encoder: BoundEncoder,
    pub action_enc: Dense,
    pub lstm: Vec<ConvLstm>,
    pub latent_head: Option<Conv2d>,
    pub decoder: Option<BoundDecoder>,
}

#[doc(hidden)]
pub struct BoundModel {
    pub cfg: ModelConfig,
    pub prediction: BoundNet,
    pub posterior: BoundNet,
    pub prior: BoundNet,
}

impl BoundModel {
    fn new(cfg: &ModelConfig, params: BoundParams) -> Self {
        let stages = cfg.encoder.stages();
        let bind_net = |net: &str| -> BoundNet {
            let enc_stages = stages
                .iter()
                .enumerate()
                .map(|(si, &(convs, _))| {
                    (0..convs)
                        .map(|ci| Conv2d::bind(&params, &format!("{net}.encoder.s{si}.c{ci}"), 1))
                        .collect()
                })
                .collect();
            let project = cfg
                .encoder
                .projection_to()
                .map(|_| Conv2d::bind(&params, &format!("{net}.encoder.project"), 0));
            let layers = match net {
                "prediction" => cfg.predictor_lstm_layers,
                "posterior" => cfg.posterior_lstm_layers,
                _ => cfg.prior_lstm_layers,
            };
            let lstm = (0..layers)
                .map(|l| {
                    ConvLstm::bind(
                        &params,
                        &format!("{net}.lstm.l{l}"),
                        cfg.lstm_hidden,
                        cfg.lstm_kernel,
                    )
                })
                .collect();
            let latent_head = (net != "prediction")
                .then(|| Conv2d::bind(&params, &format!("{net}.latent_head"), 0));
            let decoder = (net == "prediction").then(|| BoundDecoder {
                unproject: cfg
                    .encoder
                    .projection_to()
                    .map(|_| Conv2d::bind(&params, "prediction.decoder.unproject", 0)),
                stages: (0..stages.len())
                    .rev()
                    .enumerate()
                    .map(|(di, si)| {
                        (0..stages[si].0)
                            .map(|ci| {
                                Conv2d::bind(&params, &format!("prediction.decoder.d{di}.c{ci}"), 1)
                            })
                            .collect()
                    })
                    .collect(),
            });
            BoundNet {
                encoder: BoundEncoder {
                    stages: enc_stages,
                    project,
                    avg_pool: cfg.encoder.avg_pool(),
                },
                action_enc: Dense::bind(&params, &format!("{net}.action_enc")),
                lstm,
                latent_head,
                decoder,
            }
        };
        BoundModel {
            cfg: cfg.clone(),
            prediction: bind_net("prediction"),
            posterior: bind_net("posterior"),
            prior: bind_net("prior"),
        }
    }

    /// Encode `(N,3,H,W)` frames into `(N,C,fh,fw)` features.
    pub fn encode_frames(&self, tape: &mut Tape, net: &BoundNet, x: Var) -> Var {
        net.encoder.forward(tape, x)
    }

    /// Encode `(N, n_in)` action(+state) rows into `(N, ac, fh, fw)` codes.
    pub fn encode_actions(&self, tape: &mut Tape, net: &BoundNet, rows: Var) -> Var {
        let (fh, fw, _) = self.cfg.feature_shape();
        let n = tape.shape(rows)[0];
        let code = net.action_enc.forward(tape, rows);
        tape.reshape(code, &[n, self.cfg.action_code_channels, fh, fw])
    }

    /// Step a network's LSTM stack; returns the top hidden map.
    pub fn lstm_step(
        &self,
        tape: &mut Tape,
        net: &BoundNet,
        mut input: Var,
        state: &mut Vec<(Var, Var)>,
    ) -> Var {
        for (cell, slot) in net.lstm.iter().zip(state.iter_mut()) {
            let (h, c) = cell.step(tape, input, *slot);
            *slot = (h, c);
            input = h;
        }
        input
    }

    /// Map a hidden state to latent (mu, sigma) with a positive link:
    /// `sigma = exp(0.5 * clamp(logvar, -20, 20))`.
    pub fn latent_params(&self, tape: &mut Tape, net: &BoundNet, h: Var) -> (Var, Var) {
        let head = net.latent_head.as_ref().expect("network has a latent head");
        let out = head.forward(tape, h);
        let l = self.cfg.latent_channels;
        let mu = tape.slice_axis(out, 1, 0, l);
        let logvar = tape.slice_axis(out, 1, l, 2 * l);
        let logvar = tape.clamp(logvar, -20.0, 20.0);
        let half = tape.scale(logvar, 0.5);
        let sigma = tape.exp(half);
        (mu, sigma)
    }

    pub fn decode(&self, tape: &mut Tape, h: Var) -> Var {
        self.prediction
            .decoder
            .as_ref()
            .expect("prediction network has a decoder")
            .forward(tape, h)
    }

    pub fn zero_state(&self, tape: &mut Tape, batch: usize, layers: usize) -> Vec<(Var, Var)> {
        let (fh, fw, _) = self.cfg.feature_shape();
        (0..layers)
            .map(|_| {
                let z = tape.constant(ArrayD::zeros(IxDyn(&[
                    batch,
                    self.cfg.lstm_hidden,
                    fh,
                    fw,
                ])));
                (z, z)
            })
            .collect()
    }
}

// ---- array/tape conversions ----

/// `(H,W,C)` channels-last to a batch-1 `(1,C,H,W)` tensor.
pub(crate) fn hwc_to_nchw1(x: &ArrayView3<f64>) -> ArrayD<f64> {
    let (h, w, c) = x.dim();
    let mut out = Array4::<f64>::zeros((1, c, h, w));
    for ((i, j, ch), &v) in x.indexed_iter() {
        out[(0, ch, i, j)] = v;
    }
    out.into_dyn()
}

/// Batch-1 `(1,C,H,W)` back to channels-last `(H,W,C)`.
pub(crate) fn nchw1_to_hwc(x: &ArrayD<f64>) -> Array3<f64> {
    let x = x.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let (_, c, h, w) = x.dim();
    let mut out = Array3::<f64>::zeros((h, w, c));
    for ((_, ch, i, j), &v) in x.indexed_iter() {
        out[(i, j, ch)] = v;
    }
    out
}

/// Stack `(T,H,W,C)` frames into `(T,C,H,W)`.
pub(crate) fn thwc_to_tchw(x: &ArrayView4<f64>) -> ArrayD<f64> {
    let (t, h, w, c) = x.dim();
    let mut out = Array4::<f64>::zeros((t, c, h, w));
    for ((ti, i, j, ch), &v) in x.indexed_iter() {
        out[(ti, ch, i, j)] = v;
    }
    out.into_dyn()
}


// ---- public single-step operations ----

impl Model {
    /// Encode one `(H,W,3)` frame with the prediction network's encoder;
    /// returns channels-last `(fh,fw,C)` features.
    pub fn encode_frame(&self, frame: &ArrayView3<f64>) -> Result<Array3<f64>, ModelError> {
        let (h, w) = self.cfg.input_hw;
        if frame.dim() != (h, w, 3) {
            return Err(ModelError::ShapeMismatch {
                what: "encode_frame input".into(),
                expected: vec![h, w, 3],
                got: frame.shape().to_vec(),
            });
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(hwc_to_nchw1(frame));
        let f = bound.encode_frames(&mut tape, &bound.prediction, x);
        Ok(nchw1_to_hwc(&tape.value(f).to_owned()))
    }

    /// Encode an action (optionally with the robot state appended) into the
    /// `(fh,fw,action_code_channels)` grid, using the prediction network's
    /// action encoder.
    pub fn encode_action(
        &self,
        action: &[f64],
        state: Option<&[f64]>,
    ) -> Result<Array3<f64>, ModelError> {
        let row = self.action_row(action, state)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let rows = tape.constant(
            Array2::from_shape_vec((1, row.len()), row)
                .unwrap()
                .into_dyn(),
        );
        let code = bound.encode_actions(&mut tape, &bound.prediction, rows);
        Ok(nchw1_to_hwc(&tape.value(code).to_owned()))
    }

    fn action_row(&self, action: &[f64], state: Option<&[f64]>) -> Result<Vec<f64>, ModelError> {
        if action.len() != self.cfg.n_action {
            return Err(ModelError::ShapeMismatch {
                what: "action".into(),
                expected: vec![self.cfg.n_action],
                got: vec![action.len()],
            });
        }
        match (self.cfg.use_state, state) {
            (false, Some(_)) => Err(ModelError::UnexpectedState),
            (true, None) => Err(ModelError::MissingState),
            (true, Some(s)) if s.len() != self.cfg.n_state => Err(ModelError::ShapeMismatch {
                what: "state".into(),
                expected: vec![self.cfg.n_state],
                got: vec![s.len()],
            }),
            (true, Some(s)) => Ok(action.iter().chain(s.iter()).copied().collect()),
            (false, None) => Ok(action.to_vec()),
        }
    }

    /// One learned-prior step on features of the *previous* frame.
    pub fn prior_step(
        &self,
        prev_frame_features: &ArrayView3<f64>,
        action_code: &ArrayView3<f64>,
        state: &mut RecurrentState,
    ) -> Result<LatentParams, ModelError> {
        self.latent_net_step(prev_frame_features, action_code, state, false)
    }

    /// One posterior step on features of the *current* (ground-truth) frame.
    pub fn posterior_step(
        &self,
        current_frame_features: &ArrayView3<f64>,
        action_code: &ArrayView3<f64>,
        state: &mut RecurrentState,
    ) -> Result<LatentParams, ModelError> {
        self.latent_net_step(current_frame_features, action_code, state, true)
    }

    fn latent_net_step(
        &self,
        features: &ArrayView3<f64>,
        action_code: &ArrayView3<f64>,
        state: &mut RecurrentState,
        posterior: bool,
    ) -> Result<LatentParams, ModelError> {
        state.check(&self.cfg)?;
        let (fh, fw, c) = self.cfg.feature_shape();
        if features.dim() != (fh, fw, c) {
            return Err(ModelError::ShapeMismatch {
                what: "frame features".into(),
                expected: vec![fh, fw, c],
                got: features.shape().to_vec(),
            });
        }
        if action_code.dim() != (fh, fw, self.cfg.action_code_channels) {
            return Err(ModelError::ShapeMismatch {
                what: "action code".into(),
                expected: vec![fh, fw, self.cfg.action_code_channels],
                got: action_code.shape().to_vec(),
            });
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let net = if posterior {
            &bound.posterior
        } else {
            &bound.prior
        };
        let slots = if posterior {
            &mut state.posterior
        } else {
            &mut state.prior
        };
        let f = tape.constant(hwc_to_nchw1(features));
        let a = tape.constant(hwc_to_nchw1(action_code));
        let input = tape.concat_channels(&[f, a]);
        let mut vars: Vec<(Var, Var)> = slots
            .iter()
            .map(|(h, c)| (tape.constant(h.clone()), tape.constant(c.clone())))
            .collect();
        let top = bound.lstm_step(&mut tape, net, input, &mut vars);
        let (mu, sigma) = bound.latent_params(&mut tape, net, top);
        for (slot, (h, c)) in slots.iter_mut().zip(vars) {
            *slot = (tape.value(h).to_owned(), tape.value(c).to_owned());
        }
        Ok(LatentParams {
            mu: nchw1_to_hwc(&tape.value(mu).to_owned()),
            sigma: nchw1_to_hwc(&tape.value(sigma).to_owned()),
        })
    }

    /// One prediction step: previous-frame features + action code + latent
    /// sample, appended along the channel dimension, through the conv-LSTM
    /// trunk and the decoder. Returns the predicted `(H,W,3)` frame in
    /// `[0,1]`.
    pub fn predict_step(
        &self,
        prev_frame_features: &ArrayView3<f64>,
        action_code: &ArrayView3<f64>,
        z: &ArrayView3<f64>,
        state: &mut RecurrentState,
    ) -> Result<Array3<f64>, ModelError> {
        state.check(&self.cfg)?;
        let (fh, fw, c) = self.cfg.feature_shape();
        if prev_frame_features.dim() != (fh, fw, c) {
            return Err(ModelError::ShapeMismatch {
                what: "frame features".into(),
                expected: vec![fh, fw, c],
                got: prev_frame_features.shape().to_vec(),
            });
        }
        if z.dim() != (fh, fw, self.cfg.latent_channels) {
            return Err(ModelError::ShapeMismatch {
                what: "latent z".into(),
                expected: vec![fh, fw, self.cfg.latent_channels],
                got: z.shape().to_vec(),
            });
        }
        if action_code.dim() != (fh, fw, self.cfg.action_code_channels) {
            return Err(ModelError::ShapeMismatch {
                what: "action code".into(),
                expected: vec![fh, fw, self.cfg.action_code_channels],
                got: action_code.shape().to_vec(),
            });
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let f = tape.constant(hwc_to_nchw1(prev_frame_features));
        let a = tape.constant(hwc_to_nchw1(action_code));
        let zv = tape.constant(hwc_to_nchw1(z));
        let input = tape.concat_channels(&[f, a, zv]);
        let mut vars: Vec<(Var, Var)> = state
            .prediction
            .iter()
            .map(|(h, c)| (tape.constant(h.clone()), tape.constant(c.clone())))
            .collect();
        let top = bound.lstm_step(&mut tape, &bound.prediction, input, &mut vars);
        let frame = bound.decode(&mut tape, top);
        for (slot, (h, c)) in state.prediction.iter_mut().zip(vars) {
            *slot = (tape.value(h).to_owned(), tape.value(c).to_owned());
        }
        Ok(nchw1_to_hwc(&tape.value(frame).to_owned()))
    }
}

// ---- rollout ----

/// Where rollout latents come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutMode {
    /// Sample z from the learned prior; predicted frames feed back
    /// autoregressively (test-time behaviour).
    Prior,
    /// Sample z from the posterior over ground-truth frames with
    /// teacher-forced inputs (reconstruction behaviour); requires targets.
    Posterior,
}

impl Model {
    /// Sample `n_samples` futures of length `horizon` where
    /// `horizon = actions.len() + 1 - context.len()`.
    ///
    /// Context frames are consumed, never re-predicted. Each sample is an
    /// independent latent draw from a stream derived as
    /// `derive_rng(seed, [sample_index])`, one `(L,fh,fw)` standard-normal
    /// tensor per recurrence step; fixed seeds give identical outputs.
    ///
    /// Returns `(n_samples, horizon, H, W, 3)` in `[0,1]`.
    pub fn rollout(
        &self,
        context: &ArrayView4<f64>,
        actions: &ArrayView2<f64>,
        states: Option<&ArrayView2<f64>>,
        mode: RolloutMode,
        targets: Option<&ArrayView4<f64>>,
        n_samples: usize,
        seed: u64,
    ) -> Result<Array5<f64>, ModelError> {
        let (h, w) = self.cfg.input_hw;
        let c = context.dim().0;
        if c < 1 || context.dim().1 != h || context.dim().2 != w || context.dim().3 != 3 {
            return Err(ModelError::ShapeMismatch {
                what: "context".into(),
                expected: vec![1, h, w, 3],
                got: context.shape().to_vec(),
            });
        }
        let steps = actions.dim().0;
        if steps < c {
            return Err(ModelError::Config(format!(
                "need at least {c} actions for {c} context frames, got {steps}"
            )));
        }
        let horizon = steps + 1 - c;
        if actions.dim().1 != self.cfg.n_action {
            return Err(ModelError::ShapeMismatch {
                what: "actions".into(),
                expected: vec![steps, self.cfg.n_action],
                got: actions.shape().to_vec(),
            });
        }
        let action_rows = self.action_matrix(actions, states)?;
        if mode == RolloutMode::Posterior {
            let t = targets.ok_or(ModelError::MissingTargets)?;
            if t.dim() != (horizon, h, w, 3) {
                return Err(ModelError::ShapeMismatch {
                    what: "targets".into(),
                    expected: vec![horizon, h, w, 3],
                    got: t.shape().to_vec(),
                });
            }
        }

        let (fh, fw, _) = self.cfg.feature_shape();
        let l = self.cfg.latent_channels;
        let mut out = Array5::<f64>::zeros((n_samples, horizon, h, w, 3));
        for s in 0..n_samples {
            let mut rng = derive_rng(seed, &[s as u64]);
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false);
            let rows = tape.constant(action_rows.clone().into_dyn());
            let acode_pred = bound.encode_actions(&mut tape, &bound.prediction, rows);
            let acode_post = bound.encode_actions(&mut tape, &bound.posterior, rows);
            let acode_prior = bound.encode_actions(&mut tape, &bound.prior, rows);

            let mut pred_state = bound.zero_state(&mut tape, 1, self.cfg.predictor_lstm_layers);
            let mut post_state = bound.zero_state(&mut tape, 1, self.cfg.posterior_lstm_layers);
            let mut prior_state = bound.zero_state(&mut tape, 1, self.cfg.prior_lstm_layers);

            // x_prev starts at the first context frame
            let mut x_prev = {
                let f0 = context.index_axis(Axis(0), 0).to_owned();
                tape.constant(hwc_to_nchw1(&f0.view()))
            };
            for t in 1..c + horizon {
                let a_t = tape.slice_axis(acode_pred, 0, t - 1, t);
                let a_post = tape.slice_axis(acode_post, 0, t - 1, t);
                let a_prior = tape.slice_axis(acode_prior, 0, t - 1, t);

                let h_pred = bound.encode_frames(&mut tape, &bound.prediction, x_prev);
                let h_prior = bound.encode_frames(&mut tape, &bound.prior, x_prev);
                let prior_in = tape.concat_channels(&[h_prior, a_prior]);
                let prior_top = bound.lstm_step(&mut tape, &bound.prior, prior_in, &mut prior_state);
                let (mu_p, sigma_p) = bound.latent_params(&mut tape, &bound.prior, prior_top);

                // choose the latent source for this step
                let use_posterior = match mode {
                    RolloutMode::Posterior => true,
                    // during warm-up the next frame is still a context frame,
                    // so the posterior is available without targets
                    RolloutMode::Prior => t < c,
                };
                let (mu, sigma) = if use_posterior {
                    let x_t = if t < c {
                        context.index_axis(Axis(0), t).to_owned()
                    } else {
                        targets.unwrap().index_axis(Axis(0), t - c).to_owned()
                    };
                    let x_t = tape.constant(hwc_to_nchw1(&x_t.view()));
                    let h_post = bound.encode_frames(&mut tape, &bound.posterior, x_t);
                    let post_in = tape.concat_channels(&[h_post, a_post]);
                    let post_top =
                        bound.lstm_step(&mut tape, &bound.posterior, post_in, &mut post_state);
                    bound.latent_params(&mut tape, &bound.posterior, post_top)
                } else {
                    (mu_p, sigma_p)
                };

                let eps = tape.constant(crate::rng::standard_normal(&[1, l, fh, fw], &mut rng));
                let scaled = tape.mul(sigma, eps);
                let z = tape.add(mu, scaled);

                let pred_in = tape.concat_channels(&[h_pred, a_t, z]);
                let pred_top =
                    bound.lstm_step(&mut tape, &bound.prediction, pred_in, &mut pred_state);

                if t >= c {
                    let frame = bound.decode(&mut tape, pred_top);
                    let fr = nchw1_to_hwc(&tape.value(frame).to_owned());
                    out.index_axis_mut(Axis(0), s)
                        .index_axis_mut(Axis(0), t - c)
                        .assign(&fr);
                    x_prev = match mode {
                        RolloutMode::Prior => frame,
                        RolloutMode::Posterior => {
                            let gt = targets.unwrap().index_axis(Axis(0), t - c).to_owned();
                            tape.constant(hwc_to_nchw1(&gt.view()))
                        }
                    };
                } else {
                    let next = context.index_axis(Axis(0), t).to_owned();
                    x_prev = tape.constant(hwc_to_nchw1(&next.view()));
                }
            }
        }
        Ok(out)
    }

    /// Rows of the action-encoder input: actions, with states appended when
    /// `use_state` is on. Recorded states riding along on a state-less model
    /// are ignored, so one dataset serves both ablation arms.
    pub(crate) fn action_matrix(
        &self,
        actions: &ArrayView2<f64>,
        states: Option<&ArrayView2<f64>>,
    ) -> Result<Array2<f64>, ModelError> {
        let steps = actions.dim().0;
        match (self.cfg.use_state, states) {
            (false, Some(_)) => Ok(actions.to_owned()),
            (true, None) => Err(ModelError::MissingState),
            (false, None) => Ok(actions.to_owned()),
            (true, Some(s)) => {
                if s.dim().0 < steps || s.dim().1 != self.cfg.n_state {
                    return Err(ModelError::ShapeMismatch {
                        what: "states".into(),
                        expected: vec![steps + 1, self.cfg.n_state],
                        got: s.shape().to_vec(),
                    });
                }
                let mut rows = Array2::<f64>::zeros((steps, self.cfg.action_input_dim()));
                for t in 0..steps {
                    for (j, v) in actions.row(t).iter().enumerate() {
                        rows[(t, j)] = *v;
                    }
                    for (j, v) in s.row(t).iter().enumerate() {
                        rows[(t, self.cfg.n_action + j)] = *v;
                    }
                }
                Ok(rows)
            }
        }
    }
}
