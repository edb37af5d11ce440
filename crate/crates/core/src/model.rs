//! The RT network: a per-second CNN shared across the three sub-second planes
//! of a segment, a conv-LSTM over those planes, and one of four heads.
//!
//! Shapes per sub-second plane (channels x height x width):
//! `1x30x128 -> 32x30x128 -> 32x1x128 -> 32x1x64 -> 32x1x64 -> 32x1x32`,
//! then three conv-LSTM steps with 32 hidden channels, flattened to 1024.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::checkpoint::{load_checkpoint, save_checkpoint, MANIFEST_FILE};
use crate::numerics::ops::{self, Activation, ConvLstmCache, Padding};
use crate::numerics::scalar::lit;
use crate::numerics::{Parameter, Scalar, Tensor};
use crate::preproc::SegmentState;

pub const SUBSECONDS: usize = 3;
const CNN_FILTERS: usize = 32;
const TEMPORAL_KERNEL: usize = 64;
const SEPARABLE_KERNEL: usize = 16;
const LSTM_HIDDEN: usize = 32;
const LSTM_KERNEL: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Supervised,
    Dqn,
    Double,
    Dueling,
}

impl Variant {
    pub fn is_rl(self) -> bool {
        self != Variant::Supervised
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Supervised => "supervised",
            Variant::Dqn => "dqn",
            Variant::Double => "double",
            Variant::Dueling => "dueling",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" | "sl" => Ok(Variant::Supervised),
            "dqn" => Ok(Variant::Dqn),
            "double" => Ok(Variant::Double),
            "dueling" => Ok(Variant::Dueling),
            other => Err(Error::InvalidArgument(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub n_actions: usize,
    pub channels: usize,
    pub samples_per_subsecond: usize,
    pub hidden: usize,
    /// L2 coefficient on the hidden linear layers.
    pub l2: f64,
    /// Per-filter bound on the electrode-mixing (depthwise) kernels.
    pub depthwise_max_norm: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            variant: Variant::Dueling,
            n_actions: 16,
            channels: 30,
            samples_per_subsecond: 128,
            hidden: 512,
            l2: 1e-4,
            depthwise_max_norm: 1.0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_subsecond % 4 != 0 || self.samples_per_subsecond < 8 {
            return Err(Error::InvalidArgument(format!(
                "samples_per_subsecond must be a multiple of 4 and >= 8, got {}",
                self.samples_per_subsecond
            )));
        }
        if self.channels == 0 || self.hidden == 0 {
            return Err(Error::InvalidArgument("channels and hidden must be positive".into()));
        }
        if self.variant.is_rl() && self.n_actions < 2 {
            return Err(Error::InvalidArgument("RL variants need at least 2 actions".into()));
        }
        if !(self.l2 >= 0.0) || !(self.depthwise_max_norm > 0.0) {
            return Err(Error::InvalidArgument("l2 must be >= 0 and max norm > 0".into()));
        }
        Ok(())
    }

    /// Width of each map after the second pooling stage.
    pub fn pooled_width(&self) -> usize {
        self.samples_per_subsecond / 4
    }

    pub fn feature_len(&self) -> usize {
        LSTM_HIDDEN * self.pooled_width()
    }

    pub fn output_len(&self) -> usize {
        match self.variant {
            Variant::Supervised => 1,
            _ => self.n_actions,
        }
    }
}

/// Two stacked affine maps: features -> hidden (identity activation) -> out.
#[derive(Clone, Debug, PartialEq)]
pub struct Stream<T> {
    pub hidden_w: Parameter<T>,
    pub hidden_b: Parameter<T>,
    pub out_w: Parameter<T>,
    pub out_b: Parameter<T>,
}

impl<T: Scalar> Stream<T> {
    fn new<R: Rng + ?Sized>(prefix: &str, inputs: usize, hidden: usize, outputs: usize, l2: f64, rng: &mut R) -> Self {
        Stream {
            hidden_w: Parameter::new(
                format!("{prefix}.hidden.weight"),
                glorot(&[hidden, inputs], inputs, hidden, rng),
            )
            .with_weight_decay(lit(l2)),
            hidden_b: Parameter::new(format!("{prefix}.hidden.bias"), Tensor::zeros(&[hidden])),
            out_w: Parameter::new(format!("{prefix}.out.weight"), glorot(&[outputs, hidden], hidden, outputs, rng)),
            out_b: Parameter::new(format!("{prefix}.out.bias"), Tensor::zeros(&[outputs])),
        }
    }

    fn params(&self) -> [&Parameter<T>; 4] {
        [&self.hidden_w, &self.hidden_b, &self.out_w, &self.out_b]
    }

    fn params_mut(&mut self) -> [&mut Parameter<T>; 4] {
        [&mut self.hidden_w, &mut self.hidden_b, &mut self.out_w, &mut self.out_b]
    }

    fn forward(&self, features: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let hidden = ops::linear(features, &self.hidden_w.value, &self.hidden_b.value)?;
        let out = ops::linear(&hidden, &self.out_w.value, &self.out_b.value)?;
        Ok((hidden, out))
    }

    /// Accumulates parameter gradients, returns the feature gradient.
    fn backward(&mut self, features: &Tensor<T>, hidden: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g_out = ops::linear_backward(hidden, &self.out_w.value, grad_out)?;
        self.out_w.accumulate_grad(&g_out.weight);
        self.out_b.accumulate_grad(&g_out.bias);
        let g_hidden = ops::linear_backward(features, &self.hidden_w.value, &g_out.input)?;
        self.hidden_w.accumulate_grad(&g_hidden.weight);
        self.hidden_b.accumulate_grad(&g_hidden.bias);
        Ok(g_hidden.input)
    }
}

/// All trainable tensors of one network instance.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T> {
    pub temporal: Parameter<T>,
    pub temporal_bias: Parameter<T>,
    pub spatial: Parameter<T>,
    pub spatial_bias: Parameter<T>,
    pub separable_depth: Parameter<T>,
    pub separable_point: Parameter<T>,
    pub separable_bias: Parameter<T>,
    pub lstm_kernel: Parameter<T>,
    pub lstm_bias: Parameter<T>,
    /// One stream for supervised/dqn/double; value then advantage for dueling.
    pub streams: Vec<Stream<T>>,
}

fn glorot<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, limit, rng)
}

impl<T: Scalar> NetworkParams<T> {
    pub fn init<R: Rng + ?Sized>(config: &NetworkConfig, rng: &mut R) -> Self {
        let f = CNN_FILTERS;
        let h = config.channels;
        let lstm_in = f + LSTM_HIDDEN;
        let mut lstm_bias = Tensor::zeros(&[4 * LSTM_HIDDEN]);
        // forget gate starts open
        lstm_bias.data_mut()[LSTM_HIDDEN..2 * LSTM_HIDDEN].fill(T::one());
        let features = config.feature_len();
        let streams = match config.variant {
            Variant::Dueling => vec![
                Stream::new("value", features, config.hidden, 1, config.l2, rng),
                Stream::new("advantage", features, config.hidden, config.n_actions, config.l2, rng),
            ],
            _ => vec![Stream::new("head", features, config.hidden, config.output_len(), config.l2, rng)],
        };
        NetworkParams {
            temporal: Parameter::new("cnn.temporal.weight", glorot(&[f, 1, 1, TEMPORAL_KERNEL], TEMPORAL_KERNEL, f * TEMPORAL_KERNEL, rng)),
            temporal_bias: Parameter::new("cnn.temporal.bias", Tensor::zeros(&[f])),
            spatial: Parameter::new("cnn.spatial.weight", glorot(&[f, h, 1], h, h, rng))
                .with_max_norm(lit(config.depthwise_max_norm)),
            spatial_bias: Parameter::new("cnn.spatial.bias", Tensor::zeros(&[f])),
            separable_depth: Parameter::new(
                "cnn.separable.depth",
                glorot(&[f, 1, SEPARABLE_KERNEL], SEPARABLE_KERNEL, SEPARABLE_KERNEL, rng),
            ),
            separable_point: Parameter::new("cnn.separable.point", glorot(&[f, f, 1, 1], f, f, rng)),
            separable_bias: Parameter::new("cnn.separable.bias", Tensor::zeros(&[f])),
            lstm_kernel: Parameter::new(
                "rnn.gates.weight",
                glorot(
                    &[4 * LSTM_HIDDEN, lstm_in, 1, LSTM_KERNEL],
                    lstm_in * LSTM_KERNEL,
                    4 * LSTM_HIDDEN * LSTM_KERNEL,
                    rng,
                ),
            ),
            lstm_bias: Parameter::new("rnn.gates.bias", lstm_bias),
            streams,
        }
    }
}

impl<T: Scalar> NetworkParams<T> {
    /// Every parameter in a fixed order (also the checkpoint order).
    pub fn iter(&self) -> Vec<&Parameter<T>> {
        let mut v = vec![
            &self.temporal,
            &self.temporal_bias,
            &self.spatial,
            &self.spatial_bias,
            &self.separable_depth,
            &self.separable_point,
            &self.separable_bias,
            &self.lstm_kernel,
            &self.lstm_bias,
        ];
        for s in &self.streams {
            v.extend(s.params());
        }
        v
    }

    pub fn iter_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = vec![
            &mut self.temporal,
            &mut self.temporal_bias,
            &mut self.spatial,
            &mut self.spatial_bias,
            &mut self.separable_depth,
            &mut self.separable_point,
            &mut self.separable_bias,
            &mut self.lstm_kernel,
            &mut self.lstm_bias,
        ];
        for s in &mut self.streams {
            v.extend(s.params_mut());
        }
        v
    }

    pub fn zero_grad(&mut self) {
        self.iter_mut().into_iter().for_each(|p| p.zero_grad());
    }

    pub fn scalar_count(&self) -> usize {
        self.iter().iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.iter().iter().all(|p| p.value.all_finite())
    }

    pub fn l2_penalty(&self) -> T {
        self.iter().iter().map(|p| p.l2_penalty()).sum()
    }
}

/// Intermediate values of a training forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    batch: usize,
    input: Tensor<T>,
    act1: Tensor<T>,
    pool1: Tensor<T>,
    act2: Tensor<T>,
    lstm: Vec<ConvLstmCache<T>>,
    features: Tensor<T>,
    hidden: Vec<Tensor<T>>,
    output: Tensor<T>,
}

impl<T> ForwardCache<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }

    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub config: NetworkConfig,
    pub params: NetworkParams<T>,
}

struct Backbone<T> {
    act1: Tensor<T>,
    pool1: Tensor<T>,
    act2: Tensor<T>,
    lstm: Vec<ConvLstmCache<T>>,
    features: Tensor<T>,
}

impl<T: Scalar> Network<T> {
    pub fn new<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = NetworkParams::init(&config, rng);
        Ok(Network { config, params })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Stack segment states into a `[3B, 1, channels, samples]` tensor; plane
    /// `3b + t` is sub-second `t` of state `b`.
    pub fn batch_input(&self, states: &[&SegmentState]) -> Result<Tensor<T>> {
        let (c, s) = (self.config.channels, self.config.samples_per_subsecond);
        let mut data = Vec::with_capacity(states.len() * SUBSECONDS * c * s);
        for st in states {
            if st.channels != c || st.samples_per_plane != s || st.planes.len() != SUBSECONDS * c * s {
                return Err(Error::shape(
                    "batch_input",
                    format!(
                        "segment is {}x{} per plane, network expects {c}x{s}",
                        st.channels, st.samples_per_plane
                    ),
                ));
            }
            data.extend(st.planes.iter().map(|&v| T::from_f64_lossy(v)));
        }
        Tensor::from_vec(&[states.len() * SUBSECONDS, 1, c, s], data)
    }

    fn backbone(&self, input: &Tensor<T>) -> Result<Backbone<T>> {
        let (n, _, c, s) = input.dims4("forward_features")?;
        if n % SUBSECONDS != 0 || c != self.config.channels || s != self.config.samples_per_subsecond {
            return Err(Error::shape(
                "forward_features",
                format!("input {:?} does not match the network configuration", input.shape()),
            ));
        }
        let p = &self.params;
        let act1 = ops::temporal_spatial_conv(
            input,
            &p.temporal.value,
            &p.temporal_bias.value,
            &p.spatial.value,
            &p.spatial_bias.value,
            Activation::Tanh,
        )?;
        let pool1 = ops::avgpool2d(&act1)?;
        let act2 = ops::separable_conv2d(
            &pool1,
            &p.separable_depth.value,
            &p.separable_point.value,
            Some(&p.separable_bias.value),
            Padding::Same,
            Activation::Tanh,
        )?;
        let pool2 = ops::avgpool2d(&act2)?;
        let batch = n / SUBSECONDS;
        let w = self.config.pooled_width();
        let mut h = Tensor::zeros(&[batch, LSTM_HIDDEN, 1, w]);
        let mut cell = Tensor::zeros(&[batch, LSTM_HIDDEN, 1, w]);
        let mut caches = Vec::with_capacity(SUBSECONDS);
        for t in 0..SUBSECONDS {
            let x = gather_step(&pool2, batch, t);
            let (hn, cn, cache) = ops::conv_lstm_step(&x, &h, &cell, &p.lstm_kernel.value, &p.lstm_bias.value)?;
            h = hn;
            cell = cn;
            caches.push(cache);
        }
        let features = h.reshape(&[batch, LSTM_HIDDEN * w])?;
        Ok(Backbone {
            act1,
            pool1,
            act2,
            lstm: caches,
            features,
        })
    }

    /// Backbone features `[B, 1024]` for a batch of segment states.
    pub fn forward_features(&self, states: &[&SegmentState]) -> Result<Tensor<T>> {
        let input = self.batch_input(states)?;
        Ok(self.backbone(&input)?.features)
    }

    pub fn features_from_input(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.backbone(input)?.features)
    }

    fn head(&self, features: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        let (_, len) = features.dims2("head")?;
        if len != self.config.feature_len() {
            return Err(Error::shape("head", format!("feature length {len}")));
        }
        let mut hidden = Vec::with_capacity(self.params.streams.len());
        let mut outs = Vec::with_capacity(self.params.streams.len());
        for s in &self.params.streams {
            let (hd, out) = s.forward(features)?;
            hidden.push(hd);
            outs.push(out);
        }
        let output = match self.config.variant {
            Variant::Dueling => combine_dueling(&outs[0], &outs[1])?,
            _ => outs.pop().expect("one stream"),
        };
        Ok((hidden, output))
    }

    /// Raw head output: `[B, n_actions]` Q-values or `[B, 1]` unclipped RT.
    pub fn head_output(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.head(features)?.1)
    }

    pub fn q_values(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        match self.config.variant {
            Variant::Supervised => Err(Error::InvalidArgument(
                "q_values called on the supervised variant".into(),
            )),
            Variant::Dueling => self.dueling_q_values(features),
            _ => self.head_output(features),
        }
    }

    /// `Q = V + (A - mean(A))` over the value and advantage streams.
    pub fn dueling_q_values(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        if self.config.variant != Variant::Dueling {
            return Err(Error::InvalidArgument(format!(
                "dueling_q_values called on the {} variant",
                self.config.variant
            )));
        }
        self.head_output(features)
    }

    /// Supervised RT prediction in seconds, clipped to `[min_rt, max_rt]`.
    pub fn predict_rt(&self, features: &Tensor<T>, min_rt: f64, max_rt: f64) -> Result<Vec<f64>> {
        if self.config.variant != Variant::Supervised {
            return Err(Error::InvalidArgument(format!(
                "predict_rt called on the {} variant",
                self.config.variant
            )));
        }
        let out = self.head_output(features)?;
        Ok(out.data().iter().map(|v| v.as_f64().clamp(min_rt, max_rt)).collect())
    }

    /// Forward pass for a batch of states without retaining intermediates.
    pub fn forward(&self, states: &[&SegmentState]) -> Result<Tensor<T>> {
        let features = self.forward_features(states)?;
        self.head_output(&features)
    }

    pub fn forward_train(&self, input: Tensor<T>) -> Result<ForwardCache<T>> {
        let bb = self.backbone(&input)?;
        let (hidden, output) = self.head(&bb.features)?;
        Ok(ForwardCache {
            batch: input.shape()[0] / SUBSECONDS,
            input,
            act1: bb.act1,
            pool1: bb.pool1,
            act2: bb.act2,
            lstm: bb.lstm,
            features: bb.features,
            hidden,
            output,
        })
    }

    /// Accumulate parameter gradients of `sum(grad_out * output)`.
    pub fn backward(&mut self, cache: &ForwardCache<T>, grad_out: &Tensor<T>) -> Result<()> {
        let d_features = self.head_backward(cache, grad_out)?;
        self.backbone_backward(cache, d_features)
    }

    /// Accumulate head parameter gradients only; returns the gradient with
    /// respect to the features.
    pub fn head_backward(&mut self, cache: &ForwardCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        if grad_out.shape() != cache.output.shape() {
            return Err(Error::shape("backward", format!("grad {:?}", grad_out.shape())));
        }
        let d_features = match self.config.variant {
            Variant::Dueling => {
                let (dv, da) = split_dueling_grad(grad_out)?;
                let mut d = self.params.streams[0].backward(&cache.features, &cache.hidden[0], &dv)?;
                let d_adv = self.params.streams[1].backward(&cache.features, &cache.hidden[1], &da)?;
                d.add_assign(&d_adv);
                d
            }
            _ => self.params.streams[0].backward(&cache.features, &cache.hidden[0], grad_out)?,
        };
        Ok(d_features)
    }

    fn backbone_backward(&mut self, cache: &ForwardCache<T>, d_features: Tensor<T>) -> Result<()> {
        let batch = cache.batch;
        let w = self.config.pooled_width();
        let p = &mut self.params;
        let mut dh = d_features.reshape(&[batch, LSTM_HIDDEN, 1, w])?;
        let mut dc = Tensor::zeros(dh.shape());
        let mut d_pool2 = Tensor::zeros(&[batch * SUBSECONDS, CNN_FILTERS, 1, w]);
        for t in (0..SUBSECONDS).rev() {
            let g = ops::conv_lstm_step_backward(&cache.lstm[t], &p.lstm_kernel.value, &dh, &dc)?;
            p.lstm_kernel.accumulate_grad(&g.kernel);
            p.lstm_bias.accumulate_grad(&g.bias);
            scatter_step(&mut d_pool2, &g.x, batch, t);
            dh = g.h;
            dc = g.c;
        }
        let d_act2 = ops::avgpool2d_backward(cache.act2.shape(), &d_pool2)?;
        let sep = ops::separable_conv2d_backward(
            &cache.pool1,
            &p.separable_depth.value,
            &p.separable_point.value,
            Padding::Same,
            Activation::Tanh,
            &cache.act2,
            &d_act2,
        )?;
        p.separable_depth.accumulate_grad(&sep.depth_kernel);
        p.separable_point.accumulate_grad(&sep.point_kernel);
        p.separable_bias.accumulate_grad(&sep.bias);
        let d_act1 = ops::avgpool2d_backward(cache.act1.shape(), &sep.input)?;
        let ts = ops::temporal_spatial_conv_backward(
            &cache.input,
            &p.temporal.value,
            &p.temporal_bias.value,
            &p.spatial.value,
            Activation::Tanh,
            &cache.act1,
            &d_act1,
        )?;
        p.temporal.accumulate_grad(&ts.temporal);
        p.temporal_bias.accumulate_grad(&ts.temporal_bias);
        p.spatial.accumulate_grad(&ts.spatial);
        p.spatial_bias.accumulate_grad(&ts.spatial_bias);
        Ok(())
    }

    /// Copy of the parameters with gradients dropped, for use as a fixed
    /// target network.
    pub fn snapshot(&self) -> Network<T> {
        let mut copy = self.clone();
        copy.params.zero_grad();
        copy
    }

    /// Overwrite this network's parameters with `online`'s.
    pub fn sync_from(&mut self, online: &Network<T>) {
        *self = online.snapshot();
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut out = Network::<U> {
            config: self.config.clone(),
            params: NetworkParams::init(&self.config, &mut rng),
        };
        for (dst, src) in out.params.iter_mut().into_iter().zip(self.params.iter()) {
            dst.value = src.value.cast();
        }
        out
    }
}

/// Key under which the network configuration is stored in checkpoint meta.
pub const META_NETWORK_KEY: &str = "network";

impl<T: Scalar> Network<T> {
    /// Write a checkpoint directory. `extra` must be a JSON object (or null);
    /// its keys are stored alongside the network configuration.
    pub fn save(&self, dir: &Path, extra: serde_json::Value) -> Result<()> {
        let mut meta = match extra {
            serde_json::Value::Object(map) => map,
            serde_json::Value::Null => serde_json::Map::new(),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint meta must be a JSON object, got {other}"
                )))
            }
        };
        let config = serde_json::to_value(&self.config).map_err(|e| Error::Json {
            path: dir.to_path_buf(),
            source: e,
        })?;
        meta.insert(META_NETWORK_KEY.into(), config);
        save_checkpoint(dir, &self.params.iter(), serde_json::Value::Object(meta))?;
        Ok(())
    }

    /// Load a checkpoint written by [`Network::save`], returning the network
    /// and the full meta object.
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let (manifest, tensors) = load_checkpoint::<T>(dir)?;
        let path = dir.join(MANIFEST_FILE);
        let config_value = manifest
            .meta
            .get(META_NETWORK_KEY)
            .cloned()
            .ok_or_else(|| Error::format(&path, "meta has no network configuration"))?;
        let config: NetworkConfig =
            serde_json::from_value(config_value).map_err(|e| Error::Json { path: path.clone(), source: e })?;
        config.validate()?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut net = Network::new(config, &mut rng)?;
        let params = net.params.iter_mut();
        if params.len() != tensors.len() {
            return Err(Error::format(
                &path,
                format!("expected {} parameters, found {}", params.len(), tensors.len()),
            ));
        }
        for (p, (name, value)) in params.into_iter().zip(tensors) {
            if p.name != name || p.shape() != value.shape() {
                return Err(Error::format(
                    &path,
                    format!("parameter {name} {:?} does not match {} {:?}", value.shape(), p.name, p.shape()),
                ));
            }
            p.value = value;
        }
        if !net.params.all_finite() {
            return Err(Error::format(&path, "checkpoint holds non-finite values"));
        }
        Ok((net, manifest.meta))
    }
}

fn gather_step<T: Scalar>(planes: &Tensor<T>, batch: usize, t: usize) -> Tensor<T> {
    let shape = planes.shape();
    let mut out = Tensor::zeros(&[batch, shape[1], shape[2], shape[3]]);
    for b in 0..batch {
        out.slice_outer_mut(b).copy_from_slice(planes.slice_outer(b * SUBSECONDS + t));
    }
    out
}

fn scatter_step<T: Scalar>(planes: &mut Tensor<T>, step: &Tensor<T>, batch: usize, t: usize) {
    for b in 0..batch {
        planes.slice_outer_mut(b * SUBSECONDS + t).copy_from_slice(step.slice_outer(b));
    }
}

/// `Q[b, a] = V[b] + A[b, a] - mean_a A[b, a]`.
pub fn combine_dueling<T: Scalar>(value: &Tensor<T>, advantage: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, one) = value.dims2("dueling")?;
    let (ab, n) = advantage.dims2("dueling")?;
    if one != 1 || ab != batch || n == 0 {
        return Err(Error::shape(
            "dueling",
            format!("value {:?} advantage {:?}", value.shape(), advantage.shape()),
        ));
    }
    let mut out = advantage.clone();
    for (b, row) in out.data_mut().chunks_mut(n).enumerate() {
        let mean = row.iter().copied().sum::<T>() / lit::<T>(n as f64);
        let v = value.data()[b];
        row.iter_mut().for_each(|a| *a = v + *a - mean);
    }
    Ok(out)
}

fn split_dueling_grad<T: Scalar>(grad_q: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (batch, n) = grad_q.dims2("dueling_backward")?;
    let mut dv = Tensor::zeros(&[batch, 1]);
    let mut da = grad_q.clone();
    for (b, row) in da.data_mut().chunks_mut(n).enumerate() {
        let total = row.iter().copied().sum::<T>();
        dv.data_mut()[b] = total;
        let mean = total / lit::<T>(n as f64);
        row.iter_mut().for_each(|g| *g -= mean);
    }
    Ok((dv, da))
}
