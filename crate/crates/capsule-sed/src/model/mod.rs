//! The full architecture: convolutional feature detector, PrimaryCaps,
//! EventCaps with routing-by-agreement, the bidirectional-GRU head, and the
//! joint margin/cross-entropy loss.
//!
//! A [`Model`] owns named parameter buffers plus the batch-norm running
//! statistics. Each forward pass works on a [`ParamSet`] — either attached
//! to a graph (training) or detached (pure inference) — so a frozen model
//! can serve inference from multiple threads while training mutates
//! parameters in one place.

pub mod checkpoint;
mod gru;

use std::collections::HashMap;
use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::caps::{self, CapsulePopulation, MarginLossParams, RoutingState};
use crate::error::{Error, Result};
use crate::roll::EventRoll;
use crate::tensor::{BnMode, BnObservation, Graph, Padding, RunningStat, Tensor};

pub use gru::GruParamRefs;

/// Hyperparameters of the architecture. `default()` is the full-size
/// configuration; [`ModelConfig::desk`] is a compact preset for
/// minutes-scale experiments and [`ModelConfig::shrunken`] a tiny one for
/// end-to-end gradient checks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Input mel bands `F`.
    pub input_bands: usize,
    /// Frames per sample `T`.
    pub window_frames: usize,
    /// Feature maps in every detector layer (`M` after the last one).
    pub conv_channels: usize,
    pub conv_kernel: (usize, usize),
    /// Frequency pool per detector layer.
    pub freq_pools: [usize; 4],
    /// PrimaryCaps channels and capsule dimensionality.
    pub pc_channels: usize,
    pub pc_dim: usize,
    pub pc_kernel: (usize, usize),
    /// Event classes `K`.
    pub classes: usize,
    /// EventCaps capsule dimensionality.
    pub event_dim: usize,
    /// GRU hidden units per direction.
    pub gru_hidden: usize,
    /// Hidden units of the first feedforward layer.
    pub fc_hidden: usize,
    pub routing_iterations: usize,
    /// `(binary cross-entropy, margin)` weights of the joint loss.
    pub loss_weights: (f64, f64),
    pub dropout_rate: f64,
    pub margin: MarginLossParams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_bands: 80,
            window_frames: 128,
            conv_channels: 256,
            conv_kernel: (3, 3),
            freq_pools: [1, 4, 2, 2],
            pc_channels: 32,
            pc_dim: 8,
            pc_kernel: (3, 3),
            classes: 16,
            event_dim: 16,
            gru_hidden: 256,
            fc_hidden: 512,
            routing_iterations: 3,
            loss_weights: (0.7, 0.3),
            dropout_rate: 0.25,
            margin: MarginLossParams::default(),
        }
    }
}

impl ModelConfig {
    /// Compact preset with the same overall frequency reduction as the
    /// full model (80 bands down to 5) but far fewer channels and the
    /// pooling pulled forward, so it trains on a desk CPU in minutes.
    pub fn desk(classes: usize) -> Self {
        ModelConfig {
            conv_channels: 32,
            freq_pools: [4, 2, 2, 1],
            pc_channels: 4,
            pc_dim: 8,
            classes,
            gru_hidden: 64,
            fc_hidden: 128,
            ..ModelConfig::default()
        }
    }

    /// Tiny configuration for finite-difference checks of the whole model.
    pub fn shrunken() -> Self {
        ModelConfig {
            input_bands: 16,
            window_frames: 8,
            conv_channels: 8,
            pc_channels: 2,
            pc_dim: 4,
            classes: 3,
            event_dim: 16,
            gru_hidden: 4,
            fc_hidden: 6,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pool_product: usize = self.freq_pools.iter().product();
        if self.input_bands == 0 || self.input_bands % pool_product != 0 {
            return Err(Error::Config(format!(
                "input bands {} not divisible by pooling product {}",
                self.input_bands, pool_product
            )));
        }
        if self.pc_channels * self.pc_dim != self.conv_channels {
            return Err(Error::Config(format!(
                "PrimaryCaps channels x dim must map the {} feature maps exactly, got {} x {}",
                self.conv_channels, self.pc_channels, self.pc_dim
            )));
        }
        for k in [self.conv_kernel, self.pc_kernel] {
            if k.0 % 2 == 0 || k.1 % 2 == 0 {
                return Err(Error::Config(format!(
                    "kernels must be odd for same padding, got {}x{}",
                    k.0, k.1
                )));
            }
        }
        if self.classes == 0 || self.event_dim == 0 || self.gru_hidden == 0 || self.fc_hidden == 0
        {
            return Err(Error::Config("zero-sized layer".to_string()));
        }
        if self.routing_iterations < 1 {
            return Err(Error::Config("routing needs at least one iteration".to_string()));
        }
        if self.loss_weights.0 < 0.0 || self.loss_weights.1 < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.window_frames == 0 {
            return Err(Error::Config("window length must be positive".to_string()));
        }
        self.margin.validate()
    }

    /// Frequency bands left after the pooling chain (`F'`).
    pub fn pooled_bands(&self) -> usize {
        self.input_bands / self.freq_pools.iter().product::<usize>()
    }

    /// Low-level capsules per frame.
    pub fn capsules_per_frame(&self) -> usize {
        self.pooled_bands() * self.pc_channels
    }

    /// GRU input width: `event_dim * classes` per frame.
    pub fn gru_input(&self) -> usize {
        self.event_dim * self.classes
    }
}

/// One named parameter buffer.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Arc<Vec<f64>>,
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub(crate) fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> usize {
        let name = name.into();
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        debug_assert!(!self.index.contains_key(&name), "duplicate param {name}");
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            shape,
            values: Arc::new(values),
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: usize) -> &Param {
        &self.params[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    /// Mutable access without cloning when no forward pass holds the data.
    pub fn values_mut(&mut self, id: usize) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.params[id].values)
    }

    pub fn set_values(&mut self, id: usize, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.params[id].values.len());
        self.params[id].values = Arc::new(values);
    }

    /// Detached tensor sharing this parameter's storage.
    pub fn tensor(&self, id: usize) -> Tensor {
        Tensor::from_shared(self.params[id].shape.clone(), Arc::clone(&self.params[id].values))
            .expect("stored shapes are consistent")
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }
}

/// Parameter indices for one detector block.
#[derive(Debug, Clone, Copy)]
struct ConvBlockRefs {
    kernels: usize,
    bias: usize,
    bn_scale: usize,
    bn_shift: usize,
    pool: usize,
}

/// Resolved parameter indices for the whole architecture.
#[derive(Debug, Clone)]
struct Layout {
    conv: Vec<ConvBlockRefs>,
    pc_kernels: usize,
    pc_bias: usize,
    routing_weights: usize,
    gru_fwd: GruParamRefs,
    gru_bwd: GruParamRefs,
    fc1_weight: usize,
    fc1_bias: usize,
    fc2_weight: usize,
    fc2_bias: usize,
}

/// Forward-pass mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameters materialized for one forward pass, aligned with the store.
pub struct ParamSet {
    tensors: Vec<Tensor>,
}

impl ParamSet {
    fn get(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    /// Gradient of parameter `id` after a backward pass (zeros when the
    /// parameter was not reached).
    pub fn grad_or_zero(&self, id: usize) -> Tensor {
        self.tensors[id].grad_or_zero()
    }
}

/// EventCaps results for one sample.
pub struct EventCapsOutput {
    /// The capsule tensor `[event_dim x K x T]`.
    pub capsules: Tensor,
    /// Capsule lengths `[K x T]`.
    pub lengths: Tensor,
    /// Pre-squash weighted sums per frame, `[K x event_dim]` each.
    pub pre_squash: Vec<Tensor>,
    /// Per-frame routing traces when collection was requested.
    pub traces: Option<Vec<Vec<RoutingState>>>,
    /// Flattened per-frame capsule vectors feeding the recurrent head.
    frame_vectors: Vec<Tensor>,
}

/// Recurrent-head results for one sample.
pub struct HeadOutput {
    /// Event activity probabilities `[K x T]`.
    pub probabilities: Tensor,
    /// Concatenated bidirectional hidden state per frame, `[2H]` each.
    pub hidden: Vec<Tensor>,
}

/// Everything one forward pass produces.
pub struct ForwardOutput {
    /// Feature-detector output `[M x F' x T]`.
    pub conv_out: Tensor,
    /// Per-frame primary capsule populations.
    pub primary: Vec<CapsulePopulation>,
    pub caps: EventCapsOutput,
    pub head: HeadOutput,
    /// Batch-norm statistics observed in train mode, `(block, stats)`.
    pub bn_observations: Vec<(usize, BnObservation)>,
}

/// The capsule SED model: configuration, parameters, and running statistics.
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    /// Running batch-norm statistics, one slot per detector block.
    pub running: Vec<Option<RunningStat>>,
    layout: Layout,
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    // Box-Muller
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn normal_values(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| normal(rng, std)).collect()
}

fn glorot_values(rng: &mut ChaCha8Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * limit).collect()
}

impl Model {
    /// Initialize a model with seeded weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let (kh, kw) = config.conv_kernel;
        let m = config.conv_channels;

        let mut conv = Vec::with_capacity(4);
        for (i, &pool) in config.freq_pools.iter().enumerate() {
            let c_in = if i == 0 { 1 } else { m };
            let fan_in = c_in * kh * kw;
            let std = (2.0 / fan_in as f64).sqrt();
            let kernels = store.add(
                format!("conv{}.kernels", i + 1),
                vec![m, c_in, kh, kw],
                normal_values(&mut rng, m * c_in * kh * kw, std),
            );
            let bias = store.add(format!("conv{}.bias", i + 1), vec![m], vec![0.0; m]);
            let bn_scale = store.add(format!("conv{}.bn_scale", i + 1), vec![m], vec![1.0; m]);
            let bn_shift = store.add(format!("conv{}.bn_shift", i + 1), vec![m], vec![0.0; m]);
            conv.push(ConvBlockRefs {
                kernels,
                bias,
                bn_scale,
                bn_shift,
                pool,
            });
        }

        let (pkh, pkw) = config.pc_kernel;
        let pc_maps = config.pc_channels * config.pc_dim;
        let pc_fan_in = m * pkh * pkw;
        let pc_kernels = store.add(
            "primary_caps.kernels",
            vec![pc_maps, m, pkh, pkw],
            normal_values(&mut rng, pc_maps * m * pkh * pkw, (1.0 / pc_fan_in as f64).sqrt()),
        );
        let pc_bias = store.add("primary_caps.bias", vec![pc_maps], vec![0.0; pc_maps]);

        let n_low = config.capsules_per_frame();
        let routing_weights = store.add(
            "event_caps.weights",
            vec![n_low, config.classes, config.event_dim, config.pc_dim],
            normal_values(
                &mut rng,
                n_low * config.classes * config.event_dim * config.pc_dim,
                0.1,
            ),
        );

        let gru_fwd = gru::init_direction(&mut store, "gru.fwd", &config, &mut rng);
        let gru_bwd = gru::init_direction(&mut store, "gru.bwd", &config, &mut rng);

        let h2 = 2 * config.gru_hidden;
        let fc1_weight = store.add(
            "head.fc1.weight",
            vec![config.fc_hidden, h2],
            normal_values(&mut rng, config.fc_hidden * h2, (2.0 / h2 as f64).sqrt()),
        );
        let fc1_bias = store.add("head.fc1.bias", vec![config.fc_hidden], vec![0.0; config.fc_hidden]);
        let fc2_weight = store.add(
            "head.fc2.weight",
            vec![config.classes, config.fc_hidden],
            glorot_values(
                &mut rng,
                config.classes * config.fc_hidden,
                config.fc_hidden,
                config.classes,
            ),
        );
        let fc2_bias = store.add("head.fc2.bias", vec![config.classes], vec![0.0; config.classes]);

        Ok(Model {
            running: vec![None; conv.len()],
            layout: Layout {
                conv,
                pc_kernels,
                pc_bias,
                routing_weights,
                gru_fwd,
                gru_bwd,
                fc1_weight,
                fc1_bias,
                fc2_weight,
                fc2_bias,
            },
            config,
            store,
        })
    }

    /// Parameter indices of one GRU direction.
    pub fn gru_refs(&self, backward: bool) -> GruParamRefs {
        if backward {
            self.layout.gru_bwd
        } else {
            self.layout.gru_fwd
        }
    }

    /// Attach every parameter to a graph for a training step.
    pub fn attach(&self, graph: &Graph) -> ParamSet {
        ParamSet {
            tensors: (0..self.store.len())
                .map(|i| graph.var(&self.store.tensor(i)))
                .collect(),
        }
    }

    /// Detached parameters for pure inference.
    pub fn detached_params(&self) -> ParamSet {
        ParamSet {
            tensors: (0..self.store.len()).map(|i| self.store.tensor(i)).collect(),
        }
    }

    /// Detached parameters built from externally supplied buffers, aligned
    /// with the store. Used by finite-difference checks.
    pub fn param_set_from_values(&self, values: &[Vec<f64>]) -> Result<ParamSet> {
        if values.len() != self.store.len() {
            return Err(Error::InvalidInput(format!(
                "{} buffers for {} parameters",
                values.len(),
                self.store.len()
            )));
        }
        let tensors = values
            .iter()
            .zip(self.store.iter())
            .map(|(v, p)| Tensor::from_vec(p.shape.clone(), v.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamSet { tensors })
    }

    /// Copies of every parameter buffer, aligned with the store.
    pub fn values_snapshot(&self) -> Vec<Vec<f64>> {
        self.store.iter().map(|p| p.values.as_ref().clone()).collect()
    }

    /// Fold one forward pass's batch-norm observations into the running
    /// statistics.
    pub fn update_running_stats(&mut self, observations: &[(usize, BnObservation)], momentum: f64) {
        for (block, obs) in observations {
            match &mut self.running[*block] {
                Some(stat) => stat.update(obs, momentum),
                slot @ None => *slot = Some(RunningStat::from_observation(obs)),
            }
        }
    }

    /// The convolutional feature detector: four conv / batch-norm / ReLU /
    /// frequency-pool / dropout blocks mapping `[F x T]` to `[M x F' x T]`.
    pub fn feature_detector(
        &self,
        params: &ParamSet,
        input: &Tensor,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        bn_observations: &mut Vec<(usize, BnObservation)>,
    ) -> Result<Tensor> {
        let cfg = &self.config;
        if input.shape() != [cfg.input_bands, input.shape()[1]] || input.shape().len() != 2 {
            return Err(Error::shape(
                "feature_detector",
                format!(
                    "expected [{} x T] input, got {:?}",
                    cfg.input_bands,
                    input.shape()
                ),
            ));
        }
        let t = input.shape()[1];
        let mut h = input.reshape(&[1, cfg.input_bands, t])?;
        for (i, block) in self.layout.conv.iter().enumerate() {
            h = h.conv2d(params.get(block.kernels), params.get(block.bias), Padding::Same)?;
            let bn_mode = match mode {
                Mode::Train => BnMode::Train,
                Mode::Eval => BnMode::Eval(self.running[i].as_ref().ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "batch-norm block {} has no running statistics; train first",
                        i + 1
                    ))
                })?),
            };
            let (normed, obs) =
                h.batchnorm(params.get(block.bn_scale), params.get(block.bn_shift), bn_mode)?;
            if let Some(obs) = obs {
                bn_observations.push((i, obs));
            }
            h = normed.relu();
            if block.pool > 1 {
                h = h.maxpool_freq(block.pool)?;
            }
            h = h.dropout(cfg.dropout_rate, mode == Mode::Train, rng)?;
        }
        let expect = [cfg.conv_channels, cfg.pooled_bands(), t];
        if h.shape() != expect {
            return Err(Error::shape(
                "feature_detector",
                format!("produced {:?}, expected {:?}", h.shape(), expect),
            ));
        }
        Ok(h)
    }

    /// PrimaryCaps: a same-padded convolution whose maps regroup into
    /// `pc_channels` channels of `pc_dim`-dimensional capsules, squashed
    /// per capsule. Returns one population of `F' * pc_channels` capsules
    /// per frame.
    pub fn primary_caps(
        &self,
        params: &ParamSet,
        detector_out: &Tensor,
    ) -> Result<Vec<CapsulePopulation>> {
        let cfg = &self.config;
        let maps = cfg.pc_channels * cfg.pc_dim;
        let conv = detector_out.conv2d(
            params.get(self.layout.pc_kernels),
            params.get(self.layout.pc_bias),
            Padding::Same,
        )?;
        let f_prime = cfg.pooled_bands();
        let t_total = conv.shape()[2];
        debug_assert_eq!(conv.shape()[0], maps);
        let mut populations = Vec::with_capacity(t_total);
        for t in 0..t_total {
            let raw = frame_capsules(&conv, t, cfg.pc_channels, cfg.pc_dim, f_prime)?;
            populations.push(CapsulePopulation::new(caps::squash(&raw)?)?);
        }
        Ok(populations)
    }

    /// EventCaps: per-frame routing with weights shared across frames.
    pub fn event_caps(
        &self,
        params: &ParamSet,
        primary: &[CapsulePopulation],
        collect_traces: bool,
    ) -> Result<EventCapsOutput> {
        let cfg = &self.config;
        let weights = params.get(self.layout.routing_weights);
        let mut frame_vectors = Vec::with_capacity(primary.len());
        let mut length_cols = Vec::with_capacity(primary.len());
        let mut pre_squash = Vec::with_capacity(primary.len());
        let mut traces = collect_traces.then(Vec::new);
        for population in primary {
            let predictions = caps::predict_vectors(population, weights)?;
            let routed = caps::route(&predictions, cfg.routing_iterations)?;
            length_cols.push(caps::capsule_lengths(&routed.output));
            // [K x D] -> [D x K] -> flat [D*K]: capsule dimension major
            frame_vectors.push(routed.output.transpose()?.reshape(&[cfg.gru_input()])?);
            pre_squash.push(routed.pre_squash);
            if let Some(tr) = &mut traces {
                tr.push(routed.trace);
            }
        }
        let stacked = Tensor::stack_columns(&frame_vectors.iter().collect::<Vec<_>>())?;
        let capsules = stacked.reshape(&[cfg.event_dim, cfg.classes, primary.len()])?;
        let lengths = Tensor::stack_columns(&length_cols.iter().collect::<Vec<_>>())?;
        Ok(EventCapsOutput {
            capsules,
            lengths,
            pre_squash,
            traces,
            frame_vectors,
        })
    }

    /// Recurrent head: bidirectional GRU over the per-frame capsule
    /// vectors, then ReLU and sigmoid feedforward layers.
    pub fn recurrent_head(&self, params: &ParamSet, caps_out: &EventCapsOutput) -> Result<HeadOutput> {
        let frames = &caps_out.frame_vectors;
        let fwd = gru::run_direction(params, &self.layout.gru_fwd, frames, false)?;
        let bwd = gru::run_direction(params, &self.layout.gru_bwd, frames, true)?;
        let mut hidden = Vec::with_capacity(frames.len());
        let mut prob_cols = Vec::with_capacity(frames.len());
        for t in 0..frames.len() {
            let h = Tensor::concat(&[&fwd[t], &bwd[t]])?;
            let a = params
                .get(self.layout.fc1_weight)
                .matvec(&h)?
                .add(params.get(self.layout.fc1_bias))?
                .relu();
            let logits = params
                .get(self.layout.fc2_weight)
                .matvec(&a)?
                .add(params.get(self.layout.fc2_bias))?;
            prob_cols.push(logits.sigmoid());
            hidden.push(h);
        }
        let probabilities = Tensor::stack_columns(&prob_cols.iter().collect::<Vec<_>>())?;
        Ok(HeadOutput {
            probabilities,
            hidden,
        })
    }

    /// Run the whole model on one `[F x T]` sample.
    pub fn forward(
        &self,
        params: &ParamSet,
        input: &Tensor,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        collect_traces: bool,
    ) -> Result<ForwardOutput> {
        let mut bn_observations = Vec::new();
        let conv_out = self.feature_detector(params, input, mode, rng, &mut bn_observations)?;
        let primary = self.primary_caps(params, &conv_out)?;
        let caps_out = self.event_caps(params, &primary, collect_traces)?;
        let head = self.recurrent_head(params, &caps_out)?;
        Ok(ForwardOutput {
            conv_out,
            primary,
            caps: caps_out,
            head,
            bn_observations,
        })
    }
}

/// Regroup one frame of PrimaryCaps convolution maps `[C*D x F' x T]` into
/// a capsule matrix `[F'*C x D]`: map `c*D + d` at band `f` becomes
/// component `d` of capsule `f*C + c`.
fn frame_capsules(
    conv: &Tensor,
    frame: usize,
    channels: usize,
    dim: usize,
    bands: usize,
) -> Result<Tensor> {
    let shape = conv.shape();
    if shape.len() != 3 || shape[0] != channels * dim || shape[1] != bands {
        return Err(Error::shape(
            "frame_capsules",
            format!(
                "conv {:?} vs {} channels x {} dims x {} bands",
                shape, channels, dim, bands
            ),
        ));
    }
    let t_total = shape[2];
    if frame >= t_total {
        return Err(Error::shape(
            "frame_capsules",
            format!("frame {} out of {}", frame, t_total),
        ));
    }
    let src = conv.data();
    let n_caps = bands * channels;
    let mut out = vec![0.0; n_caps * dim];
    for f in 0..bands {
        for c in 0..channels {
            for d in 0..dim {
                out[(f * channels + c) * dim + d] = src[((c * dim + d) * bands + f) * t_total + frame];
            }
        }
    }
    Tensor::from_op(&[conv], vec![n_caps, dim], out, move |g, sinks| {
        sinks.add(0, |buf| {
            for f in 0..bands {
                for c in 0..channels {
                    for d in 0..dim {
                        buf[((c * dim + d) * bands + f) * t_total + frame] +=
                            g[(f * channels + c) * dim + d];
                    }
                }
            }
        });
    })
}

/// Joint training loss: `w_bce * BCE(F, Y) + w_margin * Margin(K, Y)`.
/// Cross-entropy averages over unmasked class-frame cells; the margin term
/// sums over classes and averages over unmasked frames. Probabilities are
/// clamped to `[1e-7, 1 - 1e-7]` inside the cross-entropy.
pub fn joint_loss(
    probabilities: &Tensor,
    lengths: &Tensor,
    targets: &EventRoll,
    mask: &[bool],
    weights: (f64, f64),
    margin: &MarginLossParams,
) -> Result<Tensor> {
    let k = targets.classes();
    let t = targets.frames();
    if probabilities.shape() != [k, t] || lengths.shape() != [k, t] {
        return Err(Error::shape(
            "joint_loss",
            format!(
                "probabilities {:?} / lengths {:?} vs targets {} x {}",
                probabilities.shape(),
                lengths.shape(),
                k,
                t
            ),
        ));
    }
    if mask.len() != t {
        return Err(Error::shape(
            "joint_loss",
            format!("mask covers {} frames, targets {}", mask.len(), t),
        ));
    }
    let n_valid = mask.iter().filter(|&&m| m).count();
    if n_valid == 0 {
        return Err(Error::InvalidInput("all frames masked".to_string()));
    }

    let y = Tensor::from_vec(vec![k, t], targets.to_values())?;
    let mask_vec = Tensor::vector(
        &mask
            .iter()
            .map(|&m| if m { 1.0 } else { 0.0 })
            .collect::<Vec<f64>>(),
    );

    let p = probabilities.clamp(1e-7, 1.0 - 1e-7);
    let bce_cells = y
        .mul(&p.ln())?
        .add(&y.sub_from_scalar(1.0).mul(&p.sub_from_scalar(1.0).ln())?)?
        .neg();
    let bce = bce_cells
        .scale_cols(&mask_vec)?
        .sum_all()
        .mul_scalar(1.0 / (k * n_valid) as f64);

    let margin_cells = caps::margin_loss_cells(lengths, &y, margin)?;
    let margin_term = margin_cells
        .scale_cols(&mask_vec)?
        .sum_all()
        .mul_scalar(1.0 / n_valid as f64);

    bce.mul_scalar(weights.0).add(&margin_term.mul_scalar(weights.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_input(cfg: &ModelConfig, seed: u64) -> Tensor {
        let mut r = rng(seed);
        let n = cfg.input_bands * cfg.window_frames;
        Tensor::from_vec(
            vec![cfg.input_bands, cfg.window_frames],
            (0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn config_validation_catches_bad_geometry() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::desk(4).validate().is_ok());
        assert!(ModelConfig::shrunken().validate().is_ok());

        let mut bad = ModelConfig::default();
        bad.input_bands = 81;
        assert!(bad.validate().is_err());

        let mut bad = ModelConfig::default();
        bad.pc_channels = 31;
        assert!(bad.validate().is_err());

        let mut bad = ModelConfig::default();
        bad.routing_iterations = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn default_config_matches_architecture_table() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.pooled_bands(), 5);
        assert_eq!(cfg.capsules_per_frame(), 160);
        assert_eq!(cfg.gru_input(), 256);
        assert_eq!(cfg.pc_channels * cfg.pc_dim, 256);
    }

    #[test]
    fn desk_forward_shapes() {
        let cfg = ModelConfig::desk(4);
        let t = 16;
        let mut small = cfg.clone();
        small.window_frames = t;
        let model = Model::new(small.clone(), 1).unwrap();
        let input = Tensor::zeros(&[80, t]);
        let params = model.detached_params();
        let out = model
            .forward(&params, &input, Mode::Train, &mut rng(2), false)
            .unwrap();
        assert_eq!(out.conv_out.shape(), &[32, 5, t]);
        assert_eq!(out.primary.len(), t);
        assert_eq!(out.primary[0].count, 20);
        assert_eq!(out.primary[0].dim, 8);
        assert_eq!(out.caps.capsules.shape(), &[16, 4, t]);
        assert_eq!(out.caps.lengths.shape(), &[4, t]);
        assert_eq!(out.head.probabilities.shape(), &[4, t]);
        assert_eq!(out.head.hidden[0].shape(), &[128]);
        // probabilities strictly inside (0, 1); lengths in [0, 1)
        assert!(out
            .head
            .probabilities
            .data()
            .iter()
            .all(|&p| p > 0.0 && p < 1.0));
        assert!(out.caps.lengths.data().iter().all(|&l| (0.0..1.0).contains(&l)));
    }

    #[test]
    fn zero_input_with_zero_bias_keeps_conv_zero() {
        // linearity sanity on the first block before normalization
        let cfg = ModelConfig::shrunken();
        let model = Model::new(cfg.clone(), 3).unwrap();
        let params = model.detached_params();
        let x = Tensor::zeros(&[cfg.input_bands, cfg.window_frames]);
        let h = x
            .reshape(&[1, cfg.input_bands, cfg.window_frames])
            .unwrap()
            .conv2d(
                params.get(model.layout.conv[0].kernels),
                params.get(model.layout.conv[0].bias),
                Padding::Same,
            )
            .unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_without_running_stats_is_rejected() {
        let model = Model::new(ModelConfig::shrunken(), 4).unwrap();
        let params = model.detached_params();
        let x = random_input(&model.config, 5);
        let err = model.forward(&params, &x, Mode::Eval, &mut rng(6), false);
        assert!(err.is_err());
    }

    #[test]
    fn per_frame_routing_independence() {
        // zeroing every primary-capsule frame except t must leave frame t's
        // event capsules unchanged
        let cfg = ModelConfig::shrunken();
        let model = Model::new(cfg.clone(), 7).unwrap();
        let params = model.detached_params();
        let x = random_input(&cfg, 8);
        let full = model
            .forward(&params, &x, Mode::Train, &mut rng(0), false)
            .unwrap();
        let primary = model.primary_caps(&params, &full.conv_out).unwrap();

        let keep = 3;
        let zeroed: Vec<CapsulePopulation> = primary
            .iter()
            .enumerate()
            .map(|(t, p)| {
                if t == keep {
                    p.clone()
                } else {
                    CapsulePopulation::new(Tensor::zeros(&[p.count, p.dim])).unwrap()
                }
            })
            .collect();

        let caps_full = model.event_caps(&params, &primary, false).unwrap();
        let caps_zeroed = model.event_caps(&params, &zeroed, false).unwrap();
        for d in 0..cfg.event_dim {
            for k in 0..cfg.classes {
                assert_abs_diff_eq!(
                    caps_full.capsules.at(&[d, k, keep]),
                    caps_zeroed.capsules.at(&[d, k, keep]),
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn identical_frames_give_identical_event_capsules() {
        // constant-in-time input, dropout off: frames far enough from the
        // window edges see identical receptive fields, so per-frame routing
        // must agree. Five stacked 3x3 convolutions reach 5 frames.
        let mut cfg = ModelConfig::shrunken();
        cfg.dropout_rate = 0.0;
        cfg.window_frames = 16;
        let model = Model::new(cfg.clone(), 9).unwrap();
        let params = model.detached_params();
        let mut r = rng(10);
        let col: Vec<f64> = (0..cfg.input_bands).map(|_| r.random::<f64>()).collect();
        let mut data = vec![0.0; cfg.input_bands * cfg.window_frames];
        for b in 0..cfg.input_bands {
            for t in 0..cfg.window_frames {
                data[b * cfg.window_frames + t] = col[b];
            }
        }
        let x = Tensor::from_vec(vec![cfg.input_bands, cfg.window_frames], data).unwrap();
        let out = model
            .forward(&params, &x, Mode::Train, &mut rng(0), false)
            .unwrap();
        for d in 0..cfg.event_dim {
            for k in 0..cfg.classes {
                assert_abs_diff_eq!(
                    out.caps.capsules.at(&[d, k, 8]),
                    out.caps.capsules.at(&[d, k, 7]),
                    epsilon = 1e-9
                );
            }
        }
    }

    #[test]
    fn lengths_match_recomputed_norms() {
        let cfg = ModelConfig::shrunken();
        let model = Model::new(cfg.clone(), 11).unwrap();
        let params = model.detached_params();
        let x = random_input(&cfg, 12);
        let out = model
            .forward(&params, &x, Mode::Train, &mut rng(0), false)
            .unwrap();
        for t in 0..cfg.window_frames {
            for k in 0..cfg.classes {
                let mut sum = 0.0;
                for d in 0..cfg.event_dim {
                    let v = out.caps.capsules.at(&[d, k, t]);
                    sum += v * v;
                }
                let norm = (sum + crate::tensor::NORM_EPS).sqrt();
                assert_abs_diff_eq!(out.caps.lengths.at(&[k, t]), norm, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn joint_loss_hand_values() {
        let margin = MarginLossParams::default();
        // perfect probabilities and margin-satisfying lengths: tiny loss
        let mut targets = EventRoll::new(2, 2);
        targets.set(0, 0, true);
        targets.set(1, 1, true);
        let probs = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let lengths = Tensor::from_vec(vec![2, 2], vec![0.95, 0.05, 0.05, 0.95]).unwrap();
        let mask = [true, true];
        let loss = joint_loss(&probs, &lengths, &targets, &mask, (0.7, 0.3), &margin).unwrap();
        assert!(loss.item() <= 1e-5, "loss = {}", loss.item());

        // probabilities all 0.5: BCE term is ln 2
        let probs = Tensor::full(&[2, 2], 0.5);
        let loss_bce_only =
            joint_loss(&probs, &lengths, &targets, &mask, (1.0, 0.0), &margin).unwrap();
        assert_abs_diff_eq!(loss_bce_only.item(), std::f64::consts::LN_2, epsilon = 1e-9);

        let loss_margin_only =
            joint_loss(&probs, &lengths, &targets, &mask, (0.0, 1.0), &margin).unwrap();
        let combined = joint_loss(&probs, &lengths, &targets, &mask, (0.7, 0.3), &margin).unwrap();
        assert_abs_diff_eq!(
            combined.item(),
            0.7 * loss_bce_only.item() + 0.3 * loss_margin_only.item(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn joint_loss_excludes_masked_frames() {
        let margin = MarginLossParams::default();
        let mut targets = EventRoll::new(1, 3);
        targets.set(0, 2, true); // active only in the masked frame
        let probs = Tensor::from_vec(vec![1, 3], vec![0.1, 0.1, 0.1]).unwrap();
        let lengths = Tensor::from_vec(vec![1, 3], vec![0.05, 0.05, 0.05]).unwrap();
        let mask = [true, true, false];
        let loss = joint_loss(&probs, &lengths, &targets, &mask, (0.7, 0.3), &margin).unwrap();
        // unmasked frames are all-correct negatives
        let expect_bce = -(0.9f64).ln();
        assert_abs_diff_eq!(loss.item(), 0.7 * expect_bce, epsilon = 1e-9);

        let all_masked = [false, false, false];
        assert!(joint_loss(&probs, &lengths, &targets, &all_masked, (0.7, 0.3), &margin).is_err());
    }
}
