//! Frame-pair classifier: a small 1-D CNN feature extractor followed by
//! (sandwiched) two-step attention pooling.
//!
//! Shapes are row-major `channels × time` buffers throughout. The forward
//! pass keeps every intermediate so the reverse pass can be written out by
//! hand; [`loss_and_gradient`] is checked against central differences in the
//! tests.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exec::{self, Exec};
use crate::signal_io::Label;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "s2ap-checkpoint/1";

/// One analysis frame seen by the classifier: the inverse-filtered flow and
/// the fitted model flow, time-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub u_filter: Vec<f64>,
    pub u_model: Vec<f64>,
    pub label: Label,
    pub recording_id: String,
    pub frame_index: usize,
}

impl FramePair {
    pub fn new(
        u_filter: Vec<f64>,
        u_model: Vec<f64>,
        label: Label,
        recording_id: impl Into<String>,
        frame_index: usize,
    ) -> Result<Self> {
        if u_filter.len() != u_model.len() {
            return Err(Error::LengthMismatch {
                expected: u_filter.len(),
                actual: u_model.len(),
            });
        }
        if u_filter.is_empty() {
            return Err(Error::Shape("frame pair has no samples".into()));
        }
        Ok(FramePair {
            u_filter,
            u_model,
            label,
            recording_id: recording_id.into(),
            frame_index,
        })
    }

    pub fn len(&self) -> usize {
        self.u_filter.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u_filter.is_empty()
    }

    fn stacked(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(2 * self.len());
        x.extend_from_slice(&self.u_filter);
        x.extend_from_slice(&self.u_model);
        x
    }
}

/// CNN tag `(layers, kernel, filters)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub layers: usize,
    pub kernel: usize,
    pub filters: usize,
}

impl Architecture {
    pub fn new(layers: usize, kernel: usize, filters: usize) -> Self {
        Architecture {
            layers,
            kernel,
            filters,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.filters == 0 {
            return Err(Error::InvalidArgument(format!(
                "architecture {self}: layers and filters must be positive"
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "architecture {self}: kernel must be odd"
            )));
        }
        Ok(())
    }
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::new(2, 5, 64)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.layers, self.kernel, self.filters)
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let parsed: Option<Vec<usize>> = parts.iter().map(|p| p.parse().ok()).collect();
        match parsed.as_deref() {
            Some(&[l, k, f]) => {
                let arch = Architecture::new(l, k, f);
                arch.validate()?;
                Ok(arch)
            }
            _ => Err(Error::InvalidArgument(format!(
                "architecture must be `layers,kernel,filters`, got `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Pooling {
    /// Two-step attention pooling, nothing between the steps.
    #[serde(rename = "2ap")]
    TwoStep,
    /// An extra conv layer between the feature-axis and time-axis steps.
    #[default]
    #[serde(rename = "s2ap")]
    Sandwiched,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::TwoStep => "2ap",
            Pooling::Sandwiched => "s2ap",
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "2ap" => Ok(Pooling::TwoStep),
            "s2ap" | "2sap" => Ok(Pooling::Sandwiched),
            _ => Err(Error::InvalidArgument(format!(
                "pooling must be 2ap or s2ap, got `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub pooling: Pooling,
    pub extractor: bool,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            architecture: Architecture::default(),
            pooling: Pooling::Sandwiched,
            extractor: true,
            learning_rate: 1e-2,
            momentum: 0.9,
            epochs: 12,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and nonnegative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A 1-D convolution over time with `same` zero padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub relu: bool,
    /// `out_channels × in_channels × kernel`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvLayer {
            in_channels,
            out_channels,
            kernel,
            relu: true,
            weights: vec![0.0; out_channels * in_channels * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    /// Single-channel pass-through: center tap 1, no bias, no ReLU.
    pub fn identity(kernel: usize) -> Self {
        let mut layer = ConvLayer::zeros(1, 1, kernel);
        layer.weights[kernel / 2] = 1.0;
        layer.relu = false;
        layer
    }

    fn weight(&self, o: usize, i: usize, k: usize) -> f64 {
        self.weights[(o * self.in_channels + i) * self.kernel + k]
    }

    fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::Shape(format!("kernel {} is not odd", self.kernel)));
        }
        if self.weights.len() != self.out_channels * self.in_channels * self.kernel
            || self.bias.len() != self.out_channels
        {
            return Err(Error::Shape(format!(
                "conv {}→{} k{}: {} weights, {} biases",
                self.in_channels,
                self.out_channels,
                self.kernel,
                self.weights.len(),
                self.bias.len()
            )));
        }
        Ok(())
    }

    fn randomize(&mut self, rng: &mut ChaCha8Rng) {
        let s = 1.0 / ((self.in_channels * self.kernel) as f64).sqrt();
        fill_uniform(&mut self.weights, s, rng);
        fill_uniform(&mut self.bias, s, rng);
    }
}

/// Visits `(k, dst_range, src_offset)` such that for `t` in `dst_range`,
/// tap `k` reads input sample `t + src_offset`.
fn taps(kernel: usize, t_len: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
    let pad = (kernel / 2) as isize;
    for k in 0..kernel {
        let shift = k as isize - pad;
        let lo = (-shift).max(0) as usize;
        let hi = (t_len as isize - shift).min(t_len as isize).max(0) as usize;
        if lo < hi {
            f(k, lo, hi, (lo as isize + shift) as usize);
        }
    }
}

/// Cross-correlation plus bias, then ReLU if the layer has one. `input` is
/// `channels × T`.
pub fn conv1d_forward(input: &[f64], channels: usize, layer: &ConvLayer) -> Result<Vec<f64>> {
    layer.validate()?;
    if channels != layer.in_channels {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, got {channels}",
            layer.in_channels
        )));
    }
    if channels == 0 || input.len() % channels != 0 {
        return Err(Error::Shape(format!(
            "{} samples do not split into {channels} channels",
            input.len()
        )));
    }
    Ok(conv_forward(input, layer))
}

fn conv_forward(input: &[f64], layer: &ConvLayer) -> Vec<f64> {
    let t_len = input.len() / layer.in_channels;
    let mut out = vec![0.0; layer.out_channels * t_len];
    for (o, row) in out.chunks_exact_mut(t_len).enumerate() {
        row.fill(layer.bias[o]);
        for (i, x) in input.chunks_exact(t_len).enumerate() {
            taps(layer.kernel, t_len, |k, lo, hi, src| {
                let w = layer.weight(o, i, k);
                for (r, s) in row[lo..hi].iter_mut().zip(&x[src..src + hi - lo]) {
                    *r += w * s;
                }
            });
        }
        if layer.relu {
            row.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    out
}

/// Reverse pass for one conv layer. Accumulates into `grad` and returns the
/// gradient with respect to `input`.
fn conv_backward(
    input: &[f64],
    output: &[f64],
    d_output: &[f64],
    layer: &ConvLayer,
    grad: &mut ConvLayer,
) -> Vec<f64> {
    let t_len = input.len() / layer.in_channels;
    let mut d_input = vec![0.0; input.len()];
    for o in 0..layer.out_channels {
        let range = o * t_len..(o + 1) * t_len;
        let d_pre: Vec<f64> = if layer.relu {
            d_output[range.clone()]
                .iter()
                .zip(&output[range])
                .map(|(d, y)| if *y > 0.0 { *d } else { 0.0 })
                .collect()
        } else {
            d_output[range].to_vec()
        };
        grad.bias[o] += d_pre.iter().sum::<f64>();
        for i in 0..layer.in_channels {
            let x = &input[i * t_len..(i + 1) * t_len];
            let dx = &mut d_input[i * t_len..(i + 1) * t_len];
            let base = (o * layer.in_channels + i) * layer.kernel;
            taps(layer.kernel, t_len, |k, lo, hi, src| {
                let w = layer.weights[base + k];
                let mut acc = 0.0;
                for ((d, s), g) in d_pre[lo..hi]
                    .iter()
                    .zip(&x[src..src + hi - lo])
                    .zip(&mut dx[src..src + hi - lo])
                {
                    acc += d * s;
                    *g += w * d;
                }
                grad.weights[base + k] += acc;
            });
        }
    }
    d_input
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Feature,
    Time,
}

/// Attention and content projections of one pooling step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    /// Input feature count.
    pub width: usize,
    /// Projection width (attention and content share it).
    pub out: usize,
    pub w_a: Vec<f64>,
    pub b_a: Vec<f64>,
    pub w_c: Vec<f64>,
    pub b_c: Vec<f64>,
}

impl Attention {
    pub fn zeros(width: usize, out: usize) -> Self {
        Attention {
            width,
            out,
            w_a: vec![0.0; out * width],
            b_a: vec![0.0; out],
            w_c: vec![0.0; out * width],
            b_c: vec![0.0; out],
        }
    }

    fn validate(&self) -> Result<()> {
        let (w, b) = (self.out * self.width, self.out);
        if self.w_a.len() != w || self.w_c.len() != w || self.b_a.len() != b || self.b_c.len() != b
        {
            return Err(Error::Shape(format!(
                "attention {}→{} has inconsistent tensor sizes",
                self.width, self.out
            )));
        }
        Ok(())
    }

    fn randomize(&mut self, rng: &mut ChaCha8Rng) {
        let s = 1.0 / (self.width as f64).sqrt();
        for t in [&mut self.w_a, &mut self.b_a, &mut self.w_c, &mut self.b_c] {
            fill_uniform(t, s, rng);
        }
    }
}

/// Intermediates of one attention step, each `out × T` except `pooled`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub squashed: Vec<f64>,
    pub weights: Vec<f64>,
    pub content: Vec<f64>,
    /// Length `T` when pooling over features, `out` when pooling over time.
    pub pooled: Vec<f64>,
}

fn affine(w: &[f64], b: &[f64], z: &[f64], width: usize, out: usize) -> Vec<f64> {
    let t_len = z.len() / width;
    let mut y = vec![0.0; out * t_len];
    for (j, row) in y.chunks_exact_mut(t_len).enumerate() {
        row.fill(b[j]);
        for (i, zi) in z.chunks_exact(t_len).enumerate() {
            let wji = w[j * width + i];
            if wji != 0.0 {
                for (r, v) in row.iter_mut().zip(zi) {
                    *r += wji * v;
                }
            }
        }
    }
    y
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `softmax(σ(W_a·Z + b_a))` over `axis`, and the weighted sum of the
/// content projection `W_c·Z + b_c` over the same axis.
pub fn attention_step(z: &[f64], width: usize, att: &Attention, axis: Axis) -> Result<AttentionOutput> {
    att.validate()?;
    if width != att.width || width == 0 || z.len() % width != 0 || z.is_empty() {
        return Err(Error::Shape(format!(
            "attention expects width {}, got {} values over width {width}",
            att.width,
            z.len()
        )));
    }
    Ok(attention_forward(z, att, axis))
}

fn attention_forward(z: &[f64], att: &Attention, axis: Axis) -> AttentionOutput {
    let t_len = z.len() / att.width;
    let out = att.out;
    let squashed: Vec<f64> = affine(&att.w_a, &att.b_a, z, att.width, out)
        .into_iter()
        .map(sigmoid)
        .collect();
    let content = affine(&att.w_c, &att.b_c, z, att.width, out);
    let mut weights: Vec<f64> = squashed.iter().map(|s| s.exp()).collect();
    let pooled = match axis {
        Axis::Feature => {
            let mut pooled = vec![0.0; t_len];
            for t in 0..t_len {
                let total: f64 = (0..out).map(|j| weights[j * t_len + t]).sum();
                for j in 0..out {
                    weights[j * t_len + t] /= total;
                    pooled[t] += content[j * t_len + t] * weights[j * t_len + t];
                }
            }
            pooled
        }
        Axis::Time => weights
            .chunks_exact_mut(t_len)
            .zip(content.chunks_exact(t_len))
            .map(|(w, c)| {
                let total: f64 = w.iter().sum();
                w.iter_mut().for_each(|v| *v /= total);
                w.iter().zip(c).map(|(a, b)| a * b).sum()
            })
            .collect(),
    };
    AttentionOutput {
        squashed,
        weights,
        content,
        pooled,
    }
}

fn attention_backward(
    z: &[f64],
    att: &Attention,
    axis: Axis,
    fwd: &AttentionOutput,
    d_pooled: &[f64],
    grad: &mut Attention,
) -> Vec<f64> {
    let t_len = z.len() / att.width;
    let out = att.out;
    let idx = |j: usize, t: usize| j * t_len + t;
    let mut d_content = vec![0.0; out * t_len];
    let mut d_weights = vec![0.0; out * t_len];
    match axis {
        Axis::Feature => {
            for j in 0..out {
                for t in 0..t_len {
                    d_content[idx(j, t)] = d_pooled[t] * fwd.weights[idx(j, t)];
                    d_weights[idx(j, t)] = d_pooled[t] * fwd.content[idx(j, t)];
                }
            }
        }
        Axis::Time => {
            for j in 0..out {
                for t in 0..t_len {
                    d_content[idx(j, t)] = d_pooled[j] * fwd.weights[idx(j, t)];
                    d_weights[idx(j, t)] = d_pooled[j] * fwd.content[idx(j, t)];
                }
            }
        }
    }
    // Softmax reverse along the pooled axis, then through the sigmoid.
    let mut d_logits = vec![0.0; out * t_len];
    let mut softmax_back = |cells: &[usize]| {
        let inner: f64 = cells.iter().map(|&c| fwd.weights[c] * d_weights[c]).sum();
        for &c in cells {
            let ds = fwd.weights[c] * (d_weights[c] - inner);
            let s = fwd.squashed[c];
            d_logits[c] = ds * s * (1.0 - s);
        }
    };
    match axis {
        Axis::Feature => {
            for t in 0..t_len {
                let cells: Vec<usize> = (0..out).map(|j| idx(j, t)).collect();
                softmax_back(&cells);
            }
        }
        Axis::Time => {
            for j in 0..out {
                let cells: Vec<usize> = (0..t_len).map(|t| idx(j, t)).collect();
                softmax_back(&cells);
            }
        }
    }
    let mut d_z = vec![0.0; z.len()];
    for (d, w, gw, gb) in [
        (&d_logits, &att.w_a, &mut grad.w_a, &mut grad.b_a),
        (&d_content, &att.w_c, &mut grad.w_c, &mut grad.b_c),
    ] {
        for j in 0..out {
            let dj = &d[j * t_len..(j + 1) * t_len];
            gb[j] += dj.iter().sum::<f64>();
            for (i, zi) in z.chunks_exact(t_len).enumerate() {
                gw[j * att.width + i] += dj.iter().zip(zi).map(|(a, b)| a * b).sum::<f64>();
                let wji = w[j * att.width + i];
                if wji != 0.0 {
                    for (g, a) in d_z[i * t_len..(i + 1) * t_len].iter_mut().zip(dj) {
                        *g += wji * a;
                    }
                }
            }
        }
    }
    d_z
}

/// The layer between the two pooling steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sandwich {
    Identity,
    Conv(ConvLayer),
}

impl Sandwich {
    fn out_channels(&self) -> usize {
        match self {
            Sandwich::Identity => 1,
            Sandwich::Conv(layer) => layer.out_channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct S2apModel {
    pub architecture: Architecture,
    pub pooling: Pooling,
    pub conv_stack: Vec<ConvLayer>,
    pub attention_1: Attention,
    pub f3: Sandwich,
    pub attention_2: Attention,
}

impl S2apModel {
    /// All tensors zero. With the extractor off the first pooling step sees
    /// the two raw streams directly.
    pub fn zeros(architecture: Architecture, pooling: Pooling, extractor: bool) -> Self {
        let Architecture {
            layers,
            kernel,
            filters,
        } = architecture;
        let conv_stack: Vec<ConvLayer> = if extractor {
            (0..layers)
                .map(|l| ConvLayer::zeros(if l == 0 { 2 } else { filters }, filters, kernel))
                .collect()
        } else {
            Vec::new()
        };
        let width = conv_stack.last().map_or(2, |l| l.out_channels);
        let f3 = match pooling {
            Pooling::TwoStep => Sandwich::Identity,
            Pooling::Sandwiched => Sandwich::Conv(ConvLayer::zeros(1, filters, 3)),
        };
        let width_2 = f3.out_channels();
        S2apModel {
            architecture,
            pooling,
            conv_stack,
            attention_1: Attention::zeros(width, width),
            f3,
            attention_2: Attention::zeros(width_2, 1),
        }
    }

    /// Uniform `[-s, s]` initialization, `s = 1/sqrt(fan_in)`.
    pub fn random(config: &TrainConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut model = S2apModel::zeros(config.architecture, config.pooling, config.extractor);
        for layer in &mut model.conv_stack {
            layer.randomize(rng);
        }
        model.attention_1.randomize(rng);
        if let Sandwich::Conv(layer) = &mut model.f3 {
            layer.randomize(rng);
        }
        model.attention_2.randomize(rng);
        model
    }

    pub fn extractor(&self) -> bool {
        !self.conv_stack.is_empty()
    }

    /// Feature count seen by the first pooling step.
    pub fn step1_width(&self) -> usize {
        self.attention_1.width
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn validate(&self) -> Result<()> {
        let mut channels = 2;
        for layer in &self.conv_stack {
            layer.validate()?;
            if layer.in_channels != channels {
                return Err(Error::Shape(format!(
                    "conv layer expects {} channels, previous layer gives {channels}",
                    layer.in_channels
                )));
            }
            channels = layer.out_channels;
        }
        self.attention_1.validate()?;
        if self.attention_1.width != channels || self.attention_1.out != channels {
            return Err(Error::Shape(format!(
                "first attention is {}→{}, extractor gives {channels} features",
                self.attention_1.width, self.attention_1.out
            )));
        }
        if let Sandwich::Conv(layer) = &self.f3 {
            layer.validate()?;
            if layer.in_channels != 1 {
                return Err(Error::Shape("f3 must read a single channel".into()));
            }
        }
        self.attention_2.validate()?;
        if self.attention_2.width != self.f3.out_channels() || self.attention_2.out != 1 {
            return Err(Error::Shape(format!(
                "second attention is {}→{}, f3 gives {} features",
                self.attention_2.width,
                self.attention_2.out,
                self.f3.out_channels()
            )));
        }
        Ok(())
    }

    /// Named views of every learnable tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (l, layer) in self.conv_stack.iter().enumerate() {
            out.push((format!("conv{}.weights", l + 1), &layer.weights));
            out.push((format!("conv{}.bias", l + 1), &layer.bias));
        }
        let a1 = &self.attention_1;
        out.push(("attention_1.w_a".into(), &a1.w_a));
        out.push(("attention_1.b_a".into(), &a1.b_a));
        out.push(("attention_1.w_c".into(), &a1.w_c));
        out.push(("attention_1.b_c".into(), &a1.b_c));
        if let Sandwich::Conv(layer) = &self.f3 {
            out.push(("f3.weights".into(), &layer.weights));
            out.push(("f3.bias".into(), &layer.bias));
        }
        let a2 = &self.attention_2;
        out.push(("attention_2.w_a".into(), &a2.w_a));
        out.push(("attention_2.b_a".into(), &a2.b_a));
        out.push(("attention_2.w_c".into(), &a2.w_c));
        out.push(("attention_2.b_c".into(), &a2.b_c));
        out
    }

    /// Mutable views in the same order as [`S2apModel::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for layer in &mut self.conv_stack {
            out.push(&mut layer.weights);
            out.push(&mut layer.bias);
        }
        let a1 = &mut self.attention_1;
        out.extend([&mut a1.w_a, &mut a1.b_a, &mut a1.w_c, &mut a1.b_c]);
        if let Sandwich::Conv(layer) = &mut self.f3 {
            out.push(&mut layer.weights);
            out.push(&mut layer.bias);
        }
        let a2 = &mut self.attention_2;
        out.extend([&mut a2.w_a, &mut a2.b_a, &mut a2.w_c, &mut a2.b_c]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

fn fill_uniform(t: &mut [f64], s: f64, rng: &mut ChaCha8Rng) {
    for v in t {
        *v = rng.random_range(-s..=s);
    }
}

/// Per-frame attention weights and pooled outputs, one field per panel of
/// the attention figure.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub u_filter: Vec<f64>,
    pub u_model: Vec<f64>,
    /// `F` rows of length `T`; each column sums to 1.
    pub z_a1: Vec<Vec<f64>>,
    pub z_p1: Vec<f64>,
    pub z_a2: Vec<f64>,
    pub z_p2: f64,
}

struct Forward {
    /// Input followed by every conv layer's output.
    activations: Vec<Vec<f64>>,
    step1: AttentionOutput,
    z_x: Vec<f64>,
    step2: AttentionOutput,
    logit: f64,
}

fn forward(model: &S2apModel, pair: &FramePair) -> Forward {
    let mut activations = vec![pair.stacked()];
    for layer in &model.conv_stack {
        let next = conv_forward(activations.last().unwrap(), layer);
        activations.push(next);
    }
    let step1 = attention_forward(activations.last().unwrap(), &model.attention_1, Axis::Feature);
    let z_x = match &model.f3 {
        Sandwich::Identity => step1.pooled.clone(),
        Sandwich::Conv(layer) => conv_forward(&step1.pooled, layer),
    };
    let step2 = attention_forward(&z_x, &model.attention_2, Axis::Time);
    let logit = step2.pooled[0];
    Forward {
        activations,
        step1,
        z_x,
        step2,
        logit,
    }
}

/// Probability that the frame is positive, with the full attention trace.
pub fn s2ap_forward(pair: &FramePair, model: &S2apModel) -> Result<(f64, AttentionTrace)> {
    model.validate()?;
    let fwd = forward(model, pair);
    let t_len = pair.len();
    let z_p2 = sigmoid(fwd.logit);
    let trace = AttentionTrace {
        u_filter: pair.u_filter.clone(),
        u_model: pair.u_model.clone(),
        z_a1: fwd.step1.weights.chunks_exact(t_len).map(<[f64]>::to_vec).collect(),
        z_p1: fwd.step1.pooled,
        z_a2: fwd.step2.weights,
        z_p2,
    };
    Ok((z_p2, trace))
}

/// Binary cross-entropy on the logit, `softplus(z) − y·z`.
fn bce_with_logit(logit: f64, target: f64) -> f64 {
    logit.max(0.0) + (-logit.abs()).exp().ln_1p() - target * logit
}

fn target_of(pair: &FramePair) -> Result<f64> {
    pair.label.as_target().map(f64::from).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "{} frame {} has no label",
            pair.recording_id, pair.frame_index
        ))
    })
}

/// Cross-entropy loss of one labelled frame and its gradient with respect to
/// every model tensor (same layout as the model).
pub fn loss_and_gradient(model: &S2apModel, pair: &FramePair) -> Result<(f64, S2apModel)> {
    let target = target_of(pair)?;
    let fwd = forward(model, pair);
    let loss = bce_with_logit(fwd.logit, target);
    let mut grad = model.zeros_like();

    let d_logit = sigmoid(fwd.logit) - target;
    let d_zx = attention_backward(
        &fwd.z_x,
        &model.attention_2,
        Axis::Time,
        &fwd.step2,
        &[d_logit],
        &mut grad.attention_2,
    );
    let d_p1 = match (&model.f3, &mut grad.f3) {
        (Sandwich::Conv(layer), Sandwich::Conv(g)) => {
            conv_backward(&fwd.step1.pooled, &fwd.z_x, &d_zx, layer, g)
        }
        _ => d_zx,
    };
    let mut d_act = attention_backward(
        fwd.activations.last().unwrap(),
        &model.attention_1,
        Axis::Feature,
        &fwd.step1,
        &d_p1,
        &mut grad.attention_1,
    );
    for (l, layer) in model.conv_stack.iter().enumerate().rev() {
        d_act = conv_backward(
            &fwd.activations[l],
            &fwd.activations[l + 1],
            &d_act,
            layer,
            &mut grad.conv_stack[l],
        );
    }
    Ok((loss, grad))
}

/// SGD with classical momentum: `v ← μv + g`, `θ ← θ − ηv`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: S2apModel,
}

impl Sgd {
    pub fn new(model: &S2apModel, learning_rate: f64, momentum: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: model.zeros_like(),
        }
    }
}

/// One optimizer step on the mean loss of `batch`. Per-example gradients may
/// be computed in parallel; they are summed in batch order. Returns the mean
/// loss before the update.
pub fn train_step(model: &mut S2apModel, opt: &mut Sgd, batch: &[FramePair], exec: Exec) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let per_example = exec::map(exec, batch, |p| loss_and_gradient(model, p));
    let mut total = 0.0;
    let mut grad = model.zeros_like();
    for (pair, result) in batch.iter().zip(per_example) {
        let (loss, g) = result?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(format!(
                "loss {loss} on {} frame {}",
                pair.recording_id, pair.frame_index
            )));
        }
        total += loss;
        for (acc, gi) in grad.tensors_mut().into_iter().zip(g.tensors()) {
            for (a, b) in acc.iter_mut().zip(gi.1) {
                *a += b;
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let (lr, mu) = (opt.learning_rate, opt.momentum);
    for ((theta, v), g) in model
        .tensors_mut()
        .into_iter()
        .zip(opt.velocity.tensors_mut())
        .zip(grad.tensors())
    {
        for ((p, vi), gi) in theta.iter_mut().zip(v.iter_mut()).zip(g.1) {
            *vi = mu * *vi + gi * scale;
            *p -= lr * *vi;
        }
    }
    Ok(total * scale)
}

/// Seeded training run: initialization, then per epoch a shuffle and a pass
/// of mini-batches.
pub fn train(dataset: &[FramePair], config: &TrainConfig, exec: Exec) -> Result<S2apModel> {
    config.validate()?;
    let mut seen = [false; 2];
    for pair in dataset {
        seen[target_of(pair)? as usize] = true;
    }
    if seen != [true, true] {
        return Err(Error::SingleClass);
    }
    let t_len = dataset[0].len();
    if let Some(p) = dataset.iter().find(|p| p.len() != t_len) {
        return Err(Error::Shape(format!(
            "{} frame {} has {} samples, expected {t_len}",
            p.recording_id,
            p.frame_index,
            p.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = S2apModel::random(config, &mut rng);
    let mut opt = Sgd::new(&model, config.learning_rate, config.momentum);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<FramePair> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            epoch_loss += train_step(&mut model, &mut opt, &batch, exec)? * batch.len() as f64;
        }
        log::debug!("epoch {epoch}: mean loss {:.5}", epoch_loss / dataset.len() as f64);
    }
    Ok(model)
}

/// Frame probabilities and the recording score (their mean).
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub frame_probabilities: Vec<f64>,
    /// NaN when there are no frames.
    pub recording_score: f64,
}

pub fn predict(model: &S2apModel, frames: &[FramePair], exec: Exec) -> Result<Prediction> {
    model.validate()?;
    let frame_probabilities = exec::map(exec, frames, |p| sigmoid(forward(model, p).logit));
    let recording_score = frame_probabilities.iter().sum::<f64>() / frames.len() as f64;
    Ok(Prediction {
        frame_probabilities,
        recording_score,
    })
}

/// Self-describing training artifact: format tag, the config used, and the
/// model with explicit tensor shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: TrainConfig,
    pub model: S2apModel,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, model: S2apModel) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            config,
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Unreadable {
            path: path.to_path_buf(),
            source,
        })?;
        let malformed = |detail: String| Error::Malformed {
            path: path.to_path_buf(),
            detail,
        };
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(malformed(format!(
                "format tag `{}`, expected `{CHECKPOINT_FORMAT}`",
                ckpt.format
            )));
        }
        ckpt.model.validate().map_err(|e| malformed(e.to_string()))?;
        Ok(ckpt)
    }
}

/// CSV export of one trace: `t,u_filter,u_model,z_a1_f0..,z_p1,z_a2` rows,
/// then a final `z_p2,<value>` line.
pub fn write_trace_csv<W: Write>(writer: W, trace: &AttentionTrace) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(writer);
    let mut header = vec!["t".to_string(), "u_filter".into(), "u_model".into()];
    header.extend((0..trace.z_a1.len()).map(|f| format!("z_a1_f{f}")));
    header.extend(["z_p1".into(), "z_a2".into()]);
    w.write_record(&header)?;
    for t in 0..trace.u_filter.len() {
        let mut row = vec![
            t.to_string(),
            trace.u_filter[t].to_string(),
            trace.u_model[t].to_string(),
        ];
        row.extend(trace.z_a1.iter().map(|r| r[t].to_string()));
        row.push(trace.z_p1[t].to_string());
        row.push(trace.z_a2[t].to_string());
        w.write_record(&row)?;
    }
    w.write_record(["z_p2".to_string(), trace.z_p2.to_string()])?;
    w.flush()?;
    Ok(())
}
