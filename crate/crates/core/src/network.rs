//! The three-scale detection network.
//!
//! The layer schedule follows Darknet numbering: a 75-layer residual backbone
//! (0..=74), a first detection stack ending in the tap at layer 82 (stride 32),
//! a stride-32 residual refinement that is upsampled and merged with the
//! layer-61 features at layer 91, the second tap at layer 94 (stride 16), the
//! same refinement/upsample/merge with layer 36 at layer 103, and the third
//! tap at layer 106 (stride 8).
//!
//! Every convolution except the three output kernels is convolution + batch
//! norm + leaky ReLU (slope 0.1). Output kernels are linear 1x1 convolutions of
//! depth `B * (5 + L)` and the heads are returned pre-activation.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorSet, Scale};
use crate::error::{Error, Result};
use crate::geometry::NETWORK_SIZE;
use crate::nn::{self, BatchNorm, BnStats, Conv2d, Param, Real, Tensor};

pub const DETECTION_TAPS: [usize; 3] = [82, 94, 106];
pub const UPSAMPLE_LAYERS: [usize; 2] = [91, 103];
pub const SKIP_SOURCES: [usize; 2] = [61, 36];
pub const MIN_CHANNELS: usize = 8;
/// Initial objectness probability encoded in the output-kernel bias, so that
/// training does not start by spending its first updates pushing every slot
/// towards "empty".
pub const OBJECTNESS_PRIOR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    Sigmoid,
    Softmax,
}

impl FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(HeadMode::Sigmoid),
            "softmax" => Ok(HeadMode::Softmax),
            other => Err(Error::Config(format!("unknown head mode {other:?} (expected sigmoid or softmax)"))),
        }
    }
}

impl std::fmt::Display for HeadMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadMode::Sigmoid => "sigmoid",
            HeadMode::Softmax => "softmax",
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Class probabilities from raw logits: a normalized softmax, or independent
/// per-class sigmoids.
pub fn class_probabilities(logits: &[f64], mode: HeadMode) -> Vec<f64> {
    match mode {
        HeadMode::Sigmoid => logits.iter().map(|&y| sigmoid(y)).collect(),
        HeadMode::Softmax => {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&y| (y - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / total).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_size: usize,
    pub num_classes: usize,
    pub boxes_per_cell: usize,
    pub head_mode: HeadMode,
    pub width_multiplier: f64,
    pub anchors: AnchorSet,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_size: NETWORK_SIZE as usize,
            num_classes: 2,
            boxes_per_cell: 3,
            head_mode: HeadMode::Sigmoid,
            width_multiplier: 1.0,
            anchors: AnchorSet::default_nine(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(Error::Config(format!("input size {} must be a positive multiple of 32", self.input_size)));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("at least one class is required".into()));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return Err(Error::Config(format!("width multiplier {} must be in (0, 1]", self.width_multiplier)));
        }
        if self.boxes_per_cell == 0 || self.anchors.per_scale_count() != self.boxes_per_cell {
            return Err(Error::Config(format!(
                "{} boxes per cell needs {} anchors, got {}",
                self.boxes_per_cell,
                3 * self.boxes_per_cell,
                self.anchors.len()
            )));
        }
        Ok(())
    }

    /// Values per box slot: 4 coordinates, objectness, class logits.
    pub fn slot_depth(&self) -> usize {
        5 + self.num_classes
    }

    /// Channels of each detection head.
    pub fn head_depth(&self) -> usize {
        self.boxes_per_cell * self.slot_depth()
    }

    pub fn grid_side(&self, scale: Scale) -> usize {
        self.input_size / scale.stride()
    }

    pub fn total_slots(&self) -> usize {
        Scale::ALL.iter().map(|&s| self.grid_side(s).pow(2)).sum::<usize>() * self.boxes_per_cell
    }

    pub fn channels(&self, base: usize) -> usize {
        ((base as f64 * self.width_multiplier).round() as usize).max(MIN_CHANNELS)
    }
}

/// One entry of the layer schedule, with concrete channel counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    /// Convolution + batch norm + leaky ReLU.
    Conv { filters: usize, size: usize, stride: usize },
    /// Linear 1x1 detection kernel with bias.
    Output { filters: usize },
    /// Previous output plus the output of layer `from`.
    Shortcut { from: usize },
    /// Copy of the output of layer `from`.
    Route { from: usize },
    /// 2x nearest upsample of the previous output, concatenated with `skip`.
    UpsampleConcat { skip: usize },
    /// Detection tap: exposes the previous output as a head.
    Detect { scale: Scale },
}

struct ScheduleBuilder<'a> {
    cfg: &'a NetworkConfig,
    layers: Vec<LayerSpec>,
}

impl ScheduleBuilder<'_> {
    fn push(&mut self, l: LayerSpec) -> usize {
        self.layers.push(l);
        self.layers.len() - 1
    }

    fn conv(&mut self, base: usize, size: usize, stride: usize) -> usize {
        let filters = self.cfg.channels(base);
        self.push(LayerSpec::Conv { filters, size, stride })
    }

    fn last(&self) -> usize {
        self.layers.len() - 1
    }

    /// 1x1 reduce, 3x3 expand, add.
    fn residual(&mut self, base: usize) {
        let from = self.last();
        self.conv(base / 2, 1, 1);
        self.conv(base, 3, 1);
        self.push(LayerSpec::Shortcut { from });
    }

    /// 3x3 expand, 1x1 reduce, add; used after the taps where the running
    /// channel count is the reduced one.
    fn refine(&mut self, base: usize) {
        let from = self.last();
        self.conv(base * 2, 3, 1);
        self.conv(base, 1, 1);
        self.push(LayerSpec::Shortcut { from });
    }

    fn stage(&mut self, base: usize, blocks: usize) {
        self.conv(base, 3, 2);
        for _ in 0..blocks {
            self.residual(base);
        }
    }

    fn tap(&mut self, scale: Scale) -> usize {
        let filters = self.cfg.head_depth();
        self.push(LayerSpec::Output { filters });
        self.push(LayerSpec::Detect { scale })
    }
}

/// The 107-entry (0..=106) layer schedule for `cfg`.
pub fn layer_schedule(cfg: &NetworkConfig) -> Vec<LayerSpec> {
    let mut b = ScheduleBuilder { cfg, layers: Vec::with_capacity(107) };
    b.conv(32, 3, 1);
    b.stage(64, 1);
    b.stage(128, 2);
    b.stage(256, 8);
    let skip_p3 = b.last();
    b.stage(512, 8);
    let skip_p2 = b.last();
    b.stage(1024, 4);

    let mut branch = 0;
    for i in 0..3 {
        b.conv(512, 1, 1);
        b.conv(1024, 3, 1);
        if i == 2 {
            branch = b.last() - 1;
        }
    }
    b.tap(Scale::P1);

    b.push(LayerSpec::Route { from: branch });
    b.conv(256, 1, 1);
    b.refine(256);
    b.refine(256);
    b.push(LayerSpec::UpsampleConcat { skip: skip_p2 });
    let branch = b.conv(256, 1, 1);
    b.tap(Scale::P2);

    b.push(LayerSpec::Route { from: branch });
    b.conv(128, 1, 1);
    b.refine(128);
    b.refine(128);
    b.push(LayerSpec::UpsampleConcat { skip: skip_p3 });
    b.conv(128, 1, 1);
    b.tap(Scale::P3);

    b.layers
}

/// `(channels, side)` of every layer output for a square input of `cfg.input_size`.
pub fn shape_trace(cfg: &NetworkConfig) -> Vec<(usize, usize)> {
    let mut shapes: Vec<(usize, usize)> = Vec::new();
    let mut prev = (3usize, cfg.input_size);
    for spec in layer_schedule(cfg) {
        let out = match spec {
            LayerSpec::Conv { filters, stride, .. } => (filters, prev.1 / stride),
            LayerSpec::Output { filters } => (filters, prev.1),
            LayerSpec::Shortcut { from } => {
                debug_assert_eq!(shapes[from], prev);
                prev
            }
            LayerSpec::Route { from } => shapes[from],
            LayerSpec::UpsampleConcat { skip } => (prev.0 + shapes[skip].0, prev.1 * 2),
            LayerSpec::Detect { .. } => prev,
        };
        shapes.push(out);
        prev = out;
    }
    shapes
}

/// Raw output grid of one detection scale, `[batch, depth, side, side]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrid {
    pub batch: usize,
    pub depth: usize,
    pub side: usize,
    pub data: Vec<f64>,
}

impl HeadGrid {
    pub fn zeros(batch: usize, depth: usize, side: usize) -> Self {
        Self { batch, depth, side, data: vec![0.0; batch * depth * side * side] }
    }

    pub fn index(&self, b: usize, ch: usize, gy: usize, gx: usize) -> usize {
        ((b * self.depth + ch) * self.side + gy) * self.side + gx
    }

    pub fn get(&self, b: usize, ch: usize, gy: usize, gx: usize) -> f64 {
        self.data[self.index(b, ch, gy, gx)]
    }

    pub fn set(&mut self, b: usize, ch: usize, gy: usize, gx: usize, v: f64) {
        let i = self.index(b, ch, gy, gx);
        self.data[i] = v;
    }

    /// `(side, side, depth)`, the conventional way head shapes are written.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.side, self.side, self.depth)
    }
}

/// The three raw head grids in `P1, P2, P3` order (13x13, 26x26, 52x52 at 416).
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionHeads {
    pub grids: [HeadGrid; 3],
}

impl DetectionHeads {
    pub fn zeros(cfg: &NetworkConfig, batch: usize) -> Self {
        let d = cfg.head_depth();
        Self { grids: Scale::ALL.map(|s| HeadGrid::zeros(batch, d, cfg.grid_side(s))) }
    }

    pub fn get(&self, scale: Scale) -> &HeadGrid {
        &self.grids[scale.index()]
    }

    pub fn get_mut(&mut self, scale: Scale) -> &mut HeadGrid {
        &mut self.grids[scale.index()]
    }

    pub fn batch(&self) -> usize {
        self.grids[0].batch
    }

    pub fn is_finite(&self) -> bool {
        self.grids.iter().all(|g| g.data.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone)]
enum Layer<T> {
    Conv { conv: Conv2d<T>, bn: BatchNorm<T> },
    Output(Conv2d<T>),
    Shortcut { from: usize },
    Route { from: usize },
    UpsampleConcat { skip: usize },
    Detect { scale: Scale },
}

/// Everything a backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    input: Tensor<T>,
    outputs: Vec<Tensor<T>>,
    pre_activation: Vec<Option<Tensor<T>>>,
    bn_stats: Vec<Option<BnStats<T>>>,
}

impl<T: Real> Trace<T> {
    pub fn heads(&self) -> DetectionHeads {
        let grids = DETECTION_TAPS.map(|i| {
            let t = &self.outputs[i];
            HeadGrid { batch: t.n, depth: t.c, side: t.h, data: t.data.iter().map(|v| v.as_f64()).collect() }
        });
        DetectionHeads { grids }
    }

    /// Output of layer `index`.
    pub fn output(&self, index: usize) -> &Tensor<T> {
        &self.outputs[index]
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

/// Forward-pass switches.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Batch-statistics normalization (training) instead of running estimates.
    pub train: bool,
    /// Zero the features routed from this layer into an upsample merge.
    pub ablate_skip: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Network<T = f32> {
    cfg: NetworkConfig,
    schedule: Vec<LayerSpec>,
    layers: Vec<Layer<T>>,
}

impl<T: Real> Network<T> {
    /// Builds and initializes the network; weights are a pure function of `seed`.
    pub fn build(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let schedule = layer_schedule(&cfg);
        let shapes = shape_trace(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(schedule.len());
        for (i, spec) in schedule.iter().enumerate() {
            let in_c = if i == 0 { 3 } else { shapes[i - 1].0 };
            layers.push(match *spec {
                LayerSpec::Conv { filters, size, stride } => {
                    Layer::Conv { conv: Conv2d::new(in_c, filters, size, stride, false, true, &mut rng), bn: BatchNorm::new(filters) }
                }
                LayerSpec::Output { filters } => {
                    let mut conv = Conv2d::new(in_c, filters, 1, 1, true, false, &mut rng);
                    let prior = T::of((OBJECTNESS_PRIOR / (1.0 - OBJECTNESS_PRIOR)).ln());
                    if let Some(bias) = conv.bias.as_mut() {
                        for a in 0..cfg.boxes_per_cell {
                            bias.value[a * cfg.slot_depth() + 4] = prior;
                        }
                    }
                    Layer::Output(conv)
                }
                LayerSpec::Shortcut { from } => Layer::Shortcut { from },
                LayerSpec::Route { from } => Layer::Route { from },
                LayerSpec::UpsampleConcat { skip } => Layer::UpsampleConcat { skip },
                LayerSpec::Detect { scale } => Layer::Detect { scale },
            });
        }
        Ok(Self { cfg, schedule, layers })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &[LayerSpec] {
        &self.schedule
    }

    pub fn set_head_mode(&mut self, mode: HeadMode) {
        self.cfg.head_mode = mode;
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.cfg.input_size;
        if x.c != 3 || x.h != s || x.w != s || x.n == 0 {
            return Err(Error::Shape(format!("network expects [n, 3, {s}, {s}], got {:?}", x.shape())));
        }
        Ok(())
    }

    /// Runs the network. Training-mode batch statistics are recorded in the
    /// trace but running estimates are not touched (see [`Network::forward_train`]).
    pub fn forward_with(&self, x: &Tensor<T>, opts: ForwardOptions) -> Result<Trace<T>> {
        self.check_input(x)?;
        let n = self.layers.len();
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(n);
        let mut pre_activation = Vec::with_capacity(n);
        let mut bn_stats = Vec::with_capacity(n);
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 { x } else { &outputs[i - 1] };
            let (out, pre, stats) = match layer {
                Layer::Conv { conv, bn } => {
                    let z = conv.forward(input);
                    let (mut y, stats) = if opts.train { bn.forward_batch(&z) } else { bn.forward_eval(&z) };
                    nn::leaky_relu(&mut y);
                    (y, Some(z), Some(stats))
                }
                Layer::Output(conv) => (conv.forward(input), None, None),
                Layer::Shortcut { from } => {
                    let mut y = input.clone();
                    y.add_assign(&outputs[*from]);
                    (y, None, None)
                }
                Layer::Route { from } => (outputs[*from].clone(), None, None),
                Layer::UpsampleConcat { skip } => {
                    let up = nn::upsample2(input);
                    let y = if opts.ablate_skip == Some(*skip) {
                        let s = &outputs[*skip];
                        nn::concat_channels(&[&up, &Tensor::zeros(s.n, s.c, s.h, s.w)])
                    } else {
                        nn::concat_channels(&[&up, &outputs[*skip]])
                    };
                    (y, None, None)
                }
                Layer::Detect { .. } => (input.clone(), None, None),
            };
            outputs.push(out);
            pre_activation.push(pre);
            bn_stats.push(stats);
        }
        Ok(Trace { input: x.clone(), outputs, pre_activation, bn_stats })
    }

    /// Inference: running batch-norm estimates, raw head grids.
    pub fn forward(&self, x: &Tensor<T>) -> Result<DetectionHeads> {
        Ok(self.forward_with(x, ForwardOptions::default())?.heads())
    }

    /// Training forward pass: batch statistics, running estimates updated.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Trace<T>> {
        let trace = self.forward_with(x, ForwardOptions { train: true, ablate_skip: None })?;
        for (layer, stats) in self.layers.iter_mut().zip(&trace.bn_stats) {
            if let (Layer::Conv { bn, .. }, Some(s)) = (layer, stats) {
                bn.update_running(s);
            }
        }
        Ok(trace)
    }

    /// Back-propagates head gradients through `trace`, accumulating into the
    /// parameter gradients (call [`Network::zero_grad`] first).
    pub fn backward(&mut self, trace: &Trace<T>, head_grads: &DetectionHeads) -> Result<()> {
        let n = self.layers.len();
        if trace.outputs.len() != n {
            return Err(Error::Shape("trace does not belong to this network".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        for (k, &tap) in DETECTION_TAPS.iter().enumerate() {
            let out = &trace.outputs[tap];
            let g = &head_grads.grids[k];
            if g.data.len() != out.data.len() {
                return Err(Error::Shape(format!("head {k} gradient has {} values, expected {}", g.data.len(), out.data.len())));
            }
            grads[tap] = Some(Tensor::from_vec(out.n, out.c, out.h, out.w, g.data.iter().map(|&v| T::of(v)).collect()));
        }

        fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
            match slot {
                Some(acc) => acc.add_assign(&g),
                None => *slot = Some(g),
            }
        }

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let input = if i == 0 { &trace.input } else { &trace.outputs[i - 1] };
            match &mut self.layers[i] {
                Layer::Conv { conv, bn } => {
                    let mut g = g;
                    nn::leaky_relu_backward(&trace.outputs[i], &mut g);
                    let z = trace.pre_activation[i].as_ref().expect("conv layers record their pre-activation");
                    let stats = trace.bn_stats[i].as_ref().expect("conv layers record batch-norm statistics");
                    let dz = bn.backward(z, stats, &g);
                    if let Some(dx) = conv.backward(input, &dz, i > 0) {
                        accumulate(&mut grads[i - 1], dx);
                    }
                }
                Layer::Output(conv) => {
                    if let Some(dx) = conv.backward(input, &g, i > 0) {
                        accumulate(&mut grads[i - 1], dx);
                    }
                }
                Layer::Shortcut { from } => {
                    let from = *from;
                    accumulate(&mut grads[from], g.clone());
                    accumulate(&mut grads[i - 1], g);
                }
                Layer::Route { from } => {
                    let from = *from;
                    accumulate(&mut grads[from], g);
                }
                Layer::UpsampleConcat { skip } => {
                    let skip = *skip;
                    let up_c = input.c;
                    let skip_c = trace.outputs[skip].c;
                    let mut parts = nn::split_channels(&g, &[up_c, skip_c]).into_iter();
                    let g_up = parts.next().expect("two parts");
                    let g_skip = parts.next().expect("two parts");
                    accumulate(&mut grads[i - 1], nn::upsample2_backward(&g_up));
                    accumulate(&mut grads[skip], g_skip);
                }
                Layer::Detect { .. } => accumulate(&mut grads[i - 1], g),
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv { conv, bn } => {
                    out.push(&mut conv.weight);
                    out.push(&mut bn.gamma);
                    out.push(&mut bn.beta);
                }
                Layer::Output(conv) => {
                    out.push(&mut conv.weight);
                    if let Some(b) = conv.bias.as_mut() {
                        out.push(b);
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Named views of every stored array (trainable parameters and batch-norm
    /// running estimates) in a fixed order.
    pub fn named_arrays(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out: Vec<(String, Vec<usize>, &[T])> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv { conv, bn } => {
                    let c = bn.channels();
                    out.push((format!("layer{i:03}.conv.weight"), conv_shape(conv), &conv.weight.value));
                    out.push((format!("layer{i:03}.bn.gamma"), vec![c], &bn.gamma.value));
                    out.push((format!("layer{i:03}.bn.beta"), vec![c], &bn.beta.value));
                    out.push((format!("layer{i:03}.bn.running_mean"), vec![c], &bn.running_mean));
                    out.push((format!("layer{i:03}.bn.running_var"), vec![c], &bn.running_var));
                }
                Layer::Output(conv) => {
                    out.push((format!("layer{i:03}.out.weight"), conv_shape(conv), &conv.weight.value));
                    if let Some(b) = &conv.bias {
                        out.push((format!("layer{i:03}.out.bias"), vec![b.len()], &b.value));
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Mutable counterpart of [`Network::named_arrays`], same order.
    pub fn named_arrays_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out: Vec<(String, &mut Vec<T>)> = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Conv { conv, bn } => {
                    out.push((format!("layer{i:03}.conv.weight"), &mut conv.weight.value));
                    out.push((format!("layer{i:03}.bn.gamma"), &mut bn.gamma.value));
                    out.push((format!("layer{i:03}.bn.beta"), &mut bn.beta.value));
                    out.push((format!("layer{i:03}.bn.running_mean"), &mut bn.running_mean));
                    out.push((format!("layer{i:03}.bn.running_var"), &mut bn.running_var));
                }
                Layer::Output(conv) => {
                    out.push((format!("layer{i:03}.out.weight"), &mut conv.weight.value));
                    if let Some(b) = conv.bias.as_mut() {
                        out.push((format!("layer{i:03}.out.bias"), &mut b.value));
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv { conv, bn } => conv.parameter_count() + 2 * bn.channels(),
                Layer::Output(conv) => conv.parameter_count(),
                _ => 0,
            })
            .sum()
    }

    /// Trainable scalars of the output kernel feeding the given scale's tap.
    pub fn output_kernel_parameters(&self, scale: Scale) -> usize {
        match &self.layers[DETECTION_TAPS[scale.index()] - 1] {
            Layer::Output(conv) => conv.parameter_count(),
            _ => unreachable!("every detection tap follows an output kernel"),
        }
    }

    /// Input channels of the given scale's output kernel.
    pub fn output_kernel_inputs(&self, scale: Scale) -> usize {
        match &self.layers[DETECTION_TAPS[scale.index()] - 1] {
            Layer::Output(conv) => conv.in_channels,
            _ => unreachable!("every detection tap follows an output kernel"),
        }
    }

    /// Same weights in another scalar type.
    pub fn cast<U: Real>(&self) -> Network<U> {
        fn cast_vec<T: Real, U: Real>(v: &[T]) -> Vec<U> {
            v.iter().map(|x| U::of(x.as_f64())).collect()
        }
        fn cast_param<T: Real, U: Real>(p: &Param<T>) -> Param<U> {
            Param::new(cast_vec(&p.value))
        }
        fn cast_conv<T: Real, U: Real>(c: &Conv2d<T>) -> Conv2d<U> {
            Conv2d {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                stride: c.stride,
                weight: cast_param(&c.weight),
                bias: c.bias.as_ref().map(cast_param),
            }
        }
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv { conv, bn } => Layer::Conv {
                    conv: cast_conv(conv),
                    bn: BatchNorm {
                        gamma: cast_param(&bn.gamma),
                        beta: cast_param(&bn.beta),
                        running_mean: cast_vec(&bn.running_mean),
                        running_var: cast_vec(&bn.running_var),
                    },
                },
                Layer::Output(c) => Layer::Output(cast_conv(c)),
                Layer::Shortcut { from } => Layer::Shortcut { from: *from },
                Layer::Route { from } => Layer::Route { from: *from },
                Layer::UpsampleConcat { skip } => Layer::UpsampleConcat { skip: *skip },
                Layer::Detect { scale } => Layer::Detect { scale: *scale },
            })
            .collect();
        Network { cfg: self.cfg.clone(), schedule: self.schedule.clone(), layers }
    }
}

fn conv_shape<T>(c: &Conv2d<T>) -> Vec<usize> {
    vec![c.out_channels, c.in_channels, c.kernel, c.kernel]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn small(width: f64, input: usize) -> NetworkConfig {
        NetworkConfig { input_size: input, width_multiplier: width, ..NetworkConfig::default() }
    }

    #[test]
    fn schedule_has_taps_merges_and_upsamples_where_expected() {
        let cfg = NetworkConfig::default();
        let s = layer_schedule(&cfg);
        assert_eq!(s.len(), 107);
        let taps: Vec<usize> = (0..s.len()).filter(|&i| matches!(s[i], LayerSpec::Detect { .. })).collect();
        assert_eq!(taps, DETECTION_TAPS);
        assert_eq!(s[91], LayerSpec::UpsampleConcat { skip: 61 });
        assert_eq!(s[103], LayerSpec::UpsampleConcat { skip: 36 });
        let shapes = shape_trace(&cfg);
        assert_eq!(shapes[36].1, 416 / 8);
        assert_eq!(shapes[61].1, 416 / 16);
        assert_eq!(shapes[81].1, 13);
        assert_eq!(shapes[82], (21, 13));
        assert_eq!(shapes[94], (21, 26));
        assert_eq!(shapes[106], (21, 52));
        assert!(s.iter().filter(|l| matches!(l, LayerSpec::Shortcut { .. })).count() >= 23);
    }

    #[test]
    fn head_depth_does_not_depend_on_width() {
        for (w, input, sides) in [(0.0625, 416, [13, 26, 52]), (1.0, 224, [7, 14, 28]), (0.25, 64, [2, 4, 8])] {
            let shapes = shape_trace(&small(w, input));
            for (tap, side) in DETECTION_TAPS.iter().zip(sides) {
                assert_eq!(shapes[*tap], (21, side));
            }
        }
    }

    #[test]
    fn bad_input_size_is_a_config_error() {
        assert!(matches!(Network::<f32>::build(small(0.0625, 100), 0), Err(Error::Config(_))));
        assert!(Network::<f32>::build(NetworkConfig { width_multiplier: 0.0, ..Default::default() }, 0).is_err());
        assert!(Network::<f32>::build(NetworkConfig { boxes_per_cell: 2, ..Default::default() }, 0).is_err());
    }

    #[test]
    fn forward_shapes_are_finite_and_deterministic() {
        let net = Network::<f32>::build(small(0.0625, 64), 1).unwrap();
        let zero = Tensor::zeros(1, 3, 64, 64);
        let heads = net.forward(&zero).unwrap();
        assert!(heads.is_finite());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_vec(2, 3, 64, 64, (0..2 * 3 * 64 * 64).map(|_| rng.random_range(0.0..1.0)).collect());
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.grids.each_ref().map(HeadGrid::shape), [(2, 2, 21), (4, 4, 21), (8, 8, 21)]);
        assert_eq!(a.batch(), 2);
        assert!(matches!(net.forward(&Tensor::zeros(1, 3, 32, 32)), Err(Error::Shape(_))));
    }

    #[test]
    fn parameter_counts() {
        let a = Network::<f32>::build(small(0.25, 64), 0).unwrap();
        let b = Network::<f32>::build(small(0.25, 64), 9).unwrap();
        let full = Network::<f32>::build(small(1.0, 64), 0).unwrap();
        assert_eq!(a.parameter_count(), b.parameter_count());
        assert!(a.parameter_count() < full.parameter_count());
        for s in Scale::ALL {
            assert_eq!(a.output_kernel_parameters(s), a.output_kernel_inputs(s) * 21 + 21);
        }
        let total: usize = a.named_arrays().iter().filter(|(n, _, _)| !n.contains("running")).map(|(_, _, v)| v.len()).sum();
        assert_eq!(total, a.parameter_count());
    }

    #[test]
    fn head_modes_share_parameter_counts() {
        let sig = Network::<f32>::build(small(0.25, 64), 0).unwrap();
        let soft = Network::<f32>::build(NetworkConfig { head_mode: HeadMode::Softmax, ..small(0.25, 64) }, 0).unwrap();
        assert_eq!(sig.parameter_count(), soft.parameter_count());
    }

    #[test]
    fn skip_ablation_reaches_only_downstream_heads() {
        let net = Network::<f64>::build(small(0.0625, 64), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::from_vec(1, 3, 64, 64, (0..3 * 64 * 64).map(|_| rng.random_range(0.0..1.0)).collect());
        let base = net.forward(&x).unwrap();
        let run = |skip| net.forward_with(&x, ForwardOptions { train: false, ablate_skip: Some(skip) }).unwrap().heads();
        let no36 = run(36);
        assert_eq!(no36.grids[0], base.grids[0]);
        assert_eq!(no36.grids[1], base.grids[1]);
        assert_ne!(no36.grids[2], base.grids[2]);
        let no61 = run(61);
        assert_eq!(no61.grids[0], base.grids[0]);
        assert_ne!(no61.grids[1], base.grids[1]);
        assert_ne!(no61.grids[2], base.grids[2]);
    }

    #[test]
    fn class_probability_examples() {
        assert_eq!(class_probabilities(&[0.0, 0.0], HeadMode::Softmax), vec![0.5, 0.5]);
        assert_eq!(class_probabilities(&[0.0], HeadMode::Sigmoid), vec![0.5]);
        let big = class_probabilities(&[1000.0, -1000.0], HeadMode::Softmax);
        assert!(big.iter().all(|p| p.is_finite()));
        assert!("softmax".parse::<HeadMode>().is_ok() && "relu".parse::<HeadMode>().is_err());
    }

    proptest! {
        #[test]
        fn two_class_softmax_is_sigmoid_of_difference(a in -50.0..50.0f64, b in -50.0..50.0f64) {
            let p = class_probabilities(&[a, b], HeadMode::Softmax);
            prop_assert!((p[0] - sigmoid(a - b)).abs() < 1e-12);
            prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
            let argmax_is_first = p[0] >= p[1];
            prop_assert_eq!(argmax_is_first, sigmoid(a - b) >= 0.5);
        }
    }
}
