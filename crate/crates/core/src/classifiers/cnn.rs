//! A small convolutional network in plain `f64`: convolution (with channel
//! groups), ReLU, cross-channel normalization, max pooling, dense layers,
//! dropout and softmax, trained by SGD with momentum on cross-entropy.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::classes::{AnswerClass, ClassSet, ClassScores};
use super::svm::check_training_set;
use crate::error::{OmrError, Result};
use crate::features::{standardize_roi, RoiImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    },
    Relu,
    /// Local response normalization across `size` neighbouring channels:
    /// `a / (k + alpha/size · Σ a²)^beta`.
    Lrn { size: usize, alpha: f64, beta: f64, k: f64 },
    MaxPool { size: usize, stride: usize },
    Dense { units: usize },
    Dropout { rate: f64 },
    /// Dense layer with one unit per class.
    Output,
    Softmax,
}

impl LayerSpec {
    pub fn conv(filters: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        LayerSpec::Conv {
            filters,
            kernel,
            stride,
            pad,
            groups: 1,
        }
    }

    pub fn lrn() -> Self {
        LayerSpec::Lrn {
            size: 5,
            alpha: 1e-4,
            beta: 0.75,
            k: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnConfig {
    /// Side of the square RGB input.
    pub input_size: usize,
    pub layers: Vec<LayerSpec>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl CnnConfig {
    /// 64×64 input; two conv/pool stages and a 128-unit hidden layer.
    pub fn desk() -> Self {
        use LayerSpec::*;
        CnnConfig {
            input_size: 64,
            layers: vec![
                LayerSpec::conv(16, 5, 1, 0),
                Relu,
                MaxPool { size: 2, stride: 2 },
                LayerSpec::conv(32, 3, 1, 0),
                Relu,
                MaxPool { size: 2, stride: 2 },
                Dense { units: 128 },
                Relu,
                Dropout { rate: 0.5 },
                Output,
                Softmax,
            ],
            epochs: 40,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }

    /// The desk layout scaled down to a 32×32 input.
    pub fn compact() -> Self {
        use LayerSpec::*;
        CnnConfig {
            input_size: 32,
            layers: vec![
                LayerSpec::conv(8, 5, 1, 0),
                Relu,
                MaxPool { size: 2, stride: 2 },
                LayerSpec::conv(16, 3, 1, 0),
                Relu,
                MaxPool { size: 2, stride: 2 },
                Dense { units: 64 },
                Relu,
                Dropout { rate: 0.5 },
                Output,
                Softmax,
            ],
            epochs: 12,
            ..Self::desk()
        }
    }

    /// Two 3×3 filters on an 8×8 input, exercising every layer type.
    pub fn tiny() -> Self {
        use LayerSpec::*;
        CnnConfig {
            input_size: 8,
            layers: vec![
                LayerSpec::conv(2, 3, 1, 1),
                Relu,
                LayerSpec::lrn(),
                MaxPool { size: 2, stride: 2 },
                Dense { units: 6 },
                Relu,
                Dropout { rate: 0.5 },
                Output,
                Softmax,
            ],
            epochs: 200,
            batch_size: 10,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }

    /// The 227×227 AlexNet geometry with a class-count output layer.
    pub fn alexnet() -> Self {
        use LayerSpec::*;
        let grouped = |filters, kernel, pad| Conv {
            filters,
            kernel,
            stride: 1,
            pad,
            groups: 2,
        };
        let pool = MaxPool { size: 3, stride: 2 };
        CnnConfig {
            input_size: 227,
            layers: vec![
                LayerSpec::conv(96, 11, 4, 0),
                Relu,
                LayerSpec::lrn(),
                pool.clone(),
                grouped(256, 5, 2),
                Relu,
                LayerSpec::lrn(),
                pool.clone(),
                LayerSpec::conv(384, 3, 1, 1),
                Relu,
                grouped(384, 3, 1),
                Relu,
                grouped(256, 3, 1),
                Relu,
                pool,
                Dense { units: 4096 },
                Relu,
                Dropout { rate: 0.5 },
                Dense { units: 4096 },
                Relu,
                Dropout { rate: 0.5 },
                Output,
                Softmax,
            ],
            epochs: 40,
            batch_size: 32,
            learning_rate: 0.002,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }

    pub fn input_shape(&self) -> Shape {
        Shape::new(3, self.input_size, self.input_size)
    }

    /// Activation shapes: the input followed by every layer's output.
    pub fn shapes(&self, num_classes: usize) -> Result<Vec<Shape>> {
        let bad = |i: usize, m: String| Err(OmrError::ConfigInvalid(format!("layer {i}: {m}")));
        if self.input_size == 0 {
            return Err(OmrError::ConfigInvalid("input size must be positive".into()));
        }
        match self.layers.as_slice() {
            [.., LayerSpec::Output, LayerSpec::Softmax] => {}
            _ => {
                return Err(OmrError::ConfigInvalid(
                    "the network must end with an output layer and softmax".into(),
                ))
            }
        }
        let mut s = self.input_shape();
        let mut out = vec![s];
        for (i, layer) in self.layers.iter().enumerate() {
            s = match *layer {
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    pad,
                    groups,
                } => {
                    if filters == 0 || kernel == 0 || stride == 0 || groups == 0 {
                        return bad(i, "convolution sizes must be positive".into());
                    }
                    if !s.channels.is_multiple_of(groups) || !filters.is_multiple_of(groups) {
                        return bad(i, format!("{groups} groups do not divide {} channels and {filters} filters", s.channels));
                    }
                    if s.height + 2 * pad < kernel || s.width + 2 * pad < kernel {
                        return bad(i, format!("{kernel}×{kernel} kernel exceeds {}×{} input", s.height, s.width));
                    }
                    Shape::new(
                        filters,
                        (s.height + 2 * pad - kernel) / stride + 1,
                        (s.width + 2 * pad - kernel) / stride + 1,
                    )
                }
                LayerSpec::MaxPool { size, stride } => {
                    if size == 0 || stride == 0 || s.height < size || s.width < size {
                        return bad(i, format!("cannot pool {}×{} with window {size}", s.height, s.width));
                    }
                    Shape::new(s.channels, (s.height - size) / stride + 1, (s.width - size) / stride + 1)
                }
                LayerSpec::Lrn { size, .. } if size == 0 || size % 2 == 0 => {
                    return bad(i, "normalization window must be odd".into())
                }
                LayerSpec::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                    return bad(i, "dropout rate must be in [0, 1)".into())
                }
                LayerSpec::Dense { units: 0 } => return bad(i, "dense layer needs units".into()),
                LayerSpec::Dense { units } => Shape::new(units, 1, 1),
                LayerSpec::Output => Shape::new(num_classes, 1, 1),
                LayerSpec::Softmax if i + 1 != self.layers.len() => {
                    return bad(i, "softmax must be the last layer".into())
                }
                _ => s,
            };
            out.push(s);
        }
        if self.layers[..self.layers.len() - 2].contains(&LayerSpec::Output) {
            return Err(OmrError::ConfigInvalid("only one output layer is allowed".into()));
        }
        Ok(out)
    }

    pub fn parameter_count(&self, num_classes: usize) -> Result<usize> {
        let shapes = self.shapes(num_classes)?;
        Ok(self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| param_sizes(l, shapes[i], shapes[i + 1]).map_or(0, |(w, b, _)| w + b))
            .sum())
    }

    fn validate_training(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(OmrError::ConfigInvalid("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(OmrError::ConfigInvalid(
                "learning rate must be positive and momentum in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// (weights, biases, fan-in) of a parameterized layer.
fn param_sizes(layer: &LayerSpec, input: Shape, output: Shape) -> Option<(usize, usize, usize)> {
    match *layer {
        LayerSpec::Conv {
            filters,
            kernel,
            groups,
            ..
        } => {
            let fan_in = input.channels / groups * kernel * kernel;
            Some((filters * fan_in, filters, fan_in))
        }
        LayerSpec::Dense { .. } | LayerSpec::Output => Some((output.channels * input.len(), output.channels, input.len())),
        _ => None,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Params {
    fn zeros_like(&self) -> Params {
        Params {
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<LayerSpec>,
    pub shapes: Vec<Shape>,
    /// One entry per layer; empty for layers without parameters.
    pub params: Vec<Params>,
}

enum Aux {
    None,
    Argmax(Vec<usize>),
    Mask(Vec<f64>),
    Scale(Vec<f64>),
}

pub struct Trace {
    acts: Vec<Vec<f64>>,
    aux: Vec<Aux>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has activations")
    }
}

impl Network {
    /// He-initialized weights and zero biases.
    pub fn new(config: &CnnConfig, num_classes: usize, seed: u64) -> Result<Self> {
        let shapes = config.shapes(num_classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| match param_sizes(l, shapes[i], shapes[i + 1]) {
                Some((w, b, fan_in)) => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                    Params {
                        weights: (0..w).map(|_| normal.sample(&mut rng)).collect(),
                        bias: vec![0.0; b],
                    }
                }
                None => Params::default(),
            })
            .collect();
        Ok(Network {
            layers: config.layers.clone(),
            shapes,
            params,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().map_or(0, |s| s.channels)
    }

    /// Dropout is active only when `train` supplies a random source.
    pub fn forward(&self, x: &[f64], mut train: Option<&mut ChaCha8Rng>) -> Trace {
        let mut acts = vec![x.to_vec()];
        let mut aux = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (input, s_in, s_out) = (&acts[i], self.shapes[i], self.shapes[i + 1]);
            let p = &self.params[i];
            let (y, a) = match *layer {
                LayerSpec::Conv {
                    kernel,
                    stride,
                    pad,
                    groups,
                    ..
                } => {
                    let geom = ConvGeometry {
                        s: s_in,
                        o: s_out,
                        k: kernel,
                        stride,
                        pad,
                        groups,
                    };
                    (conv_forward(input, &geom, p), Aux::None)
                }
                LayerSpec::Relu => (input.iter().map(|v| v.max(0.0)).collect(), Aux::None),
                LayerSpec::Lrn { size, alpha, beta, k } => {
                    let scale = lrn_scale(input, s_in, size, alpha, k);
                    let y = input.iter().zip(&scale).map(|(a, s)| a * s.powf(-beta)).collect();
                    (y, Aux::Scale(scale))
                }
                LayerSpec::MaxPool { size, stride } => {
                    let (y, idx) = maxpool_forward(input, s_in, s_out, size, stride);
                    (y, Aux::Argmax(idx))
                }
                LayerSpec::Dense { .. } | LayerSpec::Output => (dense_forward(input, p), Aux::None),
                LayerSpec::Dropout { rate } => match train.as_deref_mut() {
                    Some(rng) if rate > 0.0 => {
                        let keep = 1.0 / (1.0 - rate);
                        let mask: Vec<f64> = (0..input.len())
                            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                            .collect();
                        (input.iter().zip(&mask).map(|(a, m)| a * m).collect(), Aux::Mask(mask))
                    }
                    _ => (input.clone(), Aux::None),
                },
                LayerSpec::Softmax => (softmax(input), Aux::None),
            };
            debug_assert_eq!(y.len(), s_out.len());
            acts.push(y);
            aux.push(a);
        }
        Trace { acts, aux }
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x, None).acts.pop().expect("output")
    }

    /// Cross-entropy of the softmax output against `label`.
    pub fn loss(trace: &Trace, label: usize) -> f64 {
        -trace.output()[label].max(1e-300).ln()
    }

    /// Gradients of the cross-entropy loss with respect to every parameter.
    pub fn backward(&self, trace: &Trace, label: usize) -> Vec<Params> {
        let mut grads: Vec<Params> = self.params.iter().map(Params::zeros_like).collect();
        self.accumulate_gradients(trace, label, &mut grads);
        grads
    }

    /// Adds this sample's parameter gradients to `grads`.
    pub fn accumulate_gradients(&self, trace: &Trace, label: usize, grads: &mut [Params]) {
        let n = self.layers.len();
        // Softmax and cross-entropy combine to p - onehot at the logits.
        let mut g: Vec<f64> = trace.acts[n].clone();
        g[label] -= 1.0;
        for i in (0..n - 1).rev() {
            let (input, s_in, s_out) = (&trace.acts[i], self.shapes[i], self.shapes[i + 1]);
            // The input gradient of the first layer is never used.
            let need_dx = i > 0;
            g = match (&self.layers[i], &trace.aux[i]) {
                (
                    &LayerSpec::Conv {
                        kernel,
                        stride,
                        pad,
                        groups,
                        ..
                    },
                    _,
                ) => {
                    let geom = ConvGeometry {
                        s: s_in,
                        o: s_out,
                        k: kernel,
                        stride,
                        pad,
                        groups,
                    };
                    conv_backward(input, &geom, &self.params[i], &mut grads[i], &g, need_dx)
                }
                (LayerSpec::Relu, _) => g.iter().zip(input).map(|(d, a)| if *a > 0.0 { *d } else { 0.0 }).collect(),
                (&LayerSpec::Lrn { size, alpha, beta, .. }, Aux::Scale(scale)) => {
                    lrn_backward(input, s_in, scale, &g, size, alpha, beta)
                }
                (LayerSpec::MaxPool { .. }, Aux::Argmax(idx)) => {
                    let mut dx = vec![0.0; s_in.len()];
                    for (d, &j) in g.iter().zip(idx) {
                        dx[j] += d;
                    }
                    dx
                }
                (LayerSpec::Dense { .. } | LayerSpec::Output, _) => {
                    dense_backward(input, &self.params[i], &mut grads[i], &g, need_dx)
                }
                (LayerSpec::Dropout { .. }, Aux::Mask(mask)) => g.iter().zip(mask).map(|(d, m)| d * m).collect(),
                (LayerSpec::Dropout { .. }, _) => g,
                (layer, _) => unreachable!("no backward rule for {layer:?} at {i}"),
            };
        }
    }
}

struct ConvGeometry {
    s: Shape,
    o: Shape,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

/// Output positions `o` along one axis whose input position
/// `o·stride + kpos − pad` lies inside `0..input`.
fn valid_outputs(kpos: usize, stride: usize, pad: usize, input: usize, output: usize) -> std::ops::Range<usize> {
    let lo = if kpos >= pad { 0 } else { (pad - kpos).div_ceil(stride) };
    let hi = if input + pad > kpos {
        ((input + pad - kpos - 1) / stride + 1).min(output)
    } else {
        0
    };
    lo..hi.max(lo)
}

fn conv_forward(x: &[f64], geom: &ConvGeometry, p: &Params) -> Vec<f64> {
    let ConvGeometry { s, o, k, stride, pad, groups } = *geom;
    let cin_g = s.channels / groups;
    let f_g = o.channels / groups;
    let (iplane, oplane) = (s.height * s.width, o.height * o.width);
    let mut y = vec![0.0; o.len()];
    for (f, out) in y.chunks_exact_mut(oplane).enumerate() {
        let g = f / f_g;
        out.fill(p.bias[f]);
        for ci in 0..cin_g {
            let plane = &x[(g * cin_g + ci) * iplane..][..iplane];
            for ky in 0..k {
                let rows = valid_outputs(ky, stride, pad, s.height, o.height);
                for kx in 0..k {
                    let cols = valid_outputs(kx, stride, pad, s.width, o.width);
                    if cols.is_empty() {
                        continue;
                    }
                    let w = p.weights[((f * cin_g + ci) * k + ky) * k + kx];
                    let ix0 = cols.start * stride + kx - pad;
                    for oy in rows.clone() {
                        let irow = &plane[(oy * stride + ky - pad) * s.width..][..s.width];
                        let orow = &mut out[oy * o.width..][cols.clone()];
                        if stride == 1 {
                            let len = orow.len();
                            for (a, b) in orow.iter_mut().zip(&irow[ix0..ix0 + len]) {
                                *a += w * b;
                            }
                        } else {
                            for (j, a) in orow.iter_mut().enumerate() {
                                *a += w * irow[ix0 + j * stride];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

fn conv_backward(x: &[f64], geom: &ConvGeometry, p: &Params, grad: &mut Params, dy: &[f64], need_dx: bool) -> Vec<f64> {
    let ConvGeometry { s, o, k, stride, pad, groups } = *geom;
    let cin_g = s.channels / groups;
    let f_g = o.channels / groups;
    let (iplane, oplane) = (s.height * s.width, o.height * o.width);
    let mut dx = if need_dx { vec![0.0; s.len()] } else { Vec::new() };
    for (f, dout) in dy.chunks_exact(oplane).enumerate() {
        let g = f / f_g;
        grad.bias[f] += dout.iter().sum::<f64>();
        for ci in 0..cin_g {
            let base = (g * cin_g + ci) * iplane;
            let plane = &x[base..][..iplane];
            for ky in 0..k {
                let rows = valid_outputs(ky, stride, pad, s.height, o.height);
                for kx in 0..k {
                    let cols = valid_outputs(kx, stride, pad, s.width, o.width);
                    if cols.is_empty() {
                        continue;
                    }
                    let wi = ((f * cin_g + ci) * k + ky) * k + kx;
                    let w = p.weights[wi];
                    let ix0 = cols.start * stride + kx - pad;
                    let mut gw = 0.0;
                    for oy in rows.clone() {
                        let irow_start = (oy * stride + ky - pad) * s.width;
                        let drow = &dout[oy * o.width..][cols.clone()];
                        let irow = &plane[irow_start..][..s.width];
                        if stride == 1 {
                            gw += drow.iter().zip(&irow[ix0..ix0 + drow.len()]).map(|(d, v)| d * v).sum::<f64>();
                            if need_dx {
                                let dxrow = &mut dx[base + irow_start + ix0..][..drow.len()];
                                for (a, d) in dxrow.iter_mut().zip(drow) {
                                    *a += w * d;
                                }
                            }
                        } else {
                            for (j, d) in drow.iter().enumerate() {
                                gw += d * irow[ix0 + j * stride];
                                if need_dx {
                                    dx[base + irow_start + ix0 + j * stride] += w * d;
                                }
                            }
                        }
                    }
                    grad.weights[wi] += gw;
                }
            }
        }
    }
    dx
}

fn dense_forward(x: &[f64], p: &Params) -> Vec<f64> {
    p.bias
        .iter()
        .enumerate()
        .map(|(u, b)| b + p.weights[u * x.len()..(u + 1) * x.len()].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

fn dense_backward(x: &[f64], p: &Params, grad: &mut Params, dy: &[f64], need_dx: bool) -> Vec<f64> {
    let n = x.len();
    let mut dx = if need_dx { vec![0.0; n] } else { Vec::new() };
    for (u, &d) in dy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        grad.bias[u] += d;
        let gw = &mut grad.weights[u * n..(u + 1) * n];
        for (g, v) in gw.iter_mut().zip(x) {
            *g += d * v;
        }
        if need_dx {
            for (a, w) in dx.iter_mut().zip(&p.weights[u * n..(u + 1) * n]) {
                *a += d * w;
            }
        }
    }
    dx
}

fn maxpool_forward(x: &[f64], s: Shape, o: Shape, size: usize, stride: usize) -> (Vec<f64>, Vec<usize>) {
    let mut y = Vec::with_capacity(o.len());
    let mut idx = Vec::with_capacity(o.len());
    for c in 0..o.channels {
        for oy in 0..o.height {
            for ox in 0..o.width {
                let mut best = (usize::MAX, f64::NEG_INFINITY);
                for ky in 0..size {
                    for kx in 0..size {
                        let j = (c * s.height + oy * stride + ky) * s.width + ox * stride + kx;
                        if x[j] > best.1 {
                            best = (j, x[j]);
                        }
                    }
                }
                y.push(best.1);
                idx.push(best.0);
            }
        }
    }
    (y, idx)
}

/// `k + alpha/size · Σ a²` over the channel window of every element.
fn lrn_scale(x: &[f64], s: Shape, size: usize, alpha: f64, k: f64) -> Vec<f64> {
    let half = size / 2;
    let plane = s.height * s.width;
    let mut out = vec![0.0; x.len()];
    for c in 0..s.channels {
        let lo = c.saturating_sub(half);
        let hi = (c + half).min(s.channels - 1);
        for j in 0..plane {
            let sum: f64 = (lo..=hi).map(|cc| x[cc * plane + j].powi(2)).sum();
            out[c * plane + j] = k + alpha / size as f64 * sum;
        }
    }
    out
}

fn lrn_backward(x: &[f64], s: Shape, scale: &[f64], dy: &[f64], size: usize, alpha: f64, beta: f64) -> Vec<f64> {
    let half = size / 2;
    let plane = s.height * s.width;
    // t_c = dy_c · a_c · scale_c^(-beta-1), shared by every channel in c's window.
    let t: Vec<f64> = (0..x.len()).map(|j| dy[j] * x[j] * scale[j].powf(-beta - 1.0)).collect();
    let mut dx = vec![0.0; x.len()];
    for c in 0..s.channels {
        let lo = c.saturating_sub(half);
        let hi = (c + half).min(s.channels - 1);
        for j in 0..plane {
            let i = c * plane + j;
            let cross: f64 = (lo..=hi).map(|cc| t[cc * plane + j]).sum();
            dx[i] = dy[i] * scale[i].powf(-beta) - 2.0 * alpha * beta / size as f64 * x[i] * cross;
        }
    }
    dx
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnModel {
    pub classes: ClassSet,
    pub config: CnnConfig,
    /// Per-channel mean of the training inputs, subtracted before the first layer.
    pub input_mean: [f64; 3],
    pub network: Network,
    /// Mean training loss after each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Input tensor (channel-major, values in [0, 1]) of a resized ROI.
pub fn roi_tensor(roi: &RoiImage, size: usize) -> Result<Vec<f64>> {
    let std = standardize_roi(roi, size as u32)?;
    let plane = size * size;
    let mut t = vec![0.0; 3 * plane];
    for (i, p) in std.pixels.pixels().enumerate() {
        for c in 0..3 {
            t[c * plane + i] = p[c] as f64 / 255.0;
        }
    }
    Ok(t)
}

fn center(t: &mut [f64], mean: &[f64; 3]) {
    let plane = t.len() / 3;
    for (c, m) in mean.iter().enumerate() {
        t[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v -= m);
    }
}

/// Trains from scratch on tensors produced by [`roi_tensor`].
pub fn train_cnn_tensors(
    inputs: &[Vec<f64>],
    labels: &[AnswerClass],
    classes: ClassSet,
    config: &CnnConfig,
    seed: u64,
) -> Result<CnnModel> {
    config.validate_training()?;
    if inputs.len() != labels.len() {
        return Err(OmrError::LengthMismatch {
            left: inputs.len(),
            right: labels.len(),
        });
    }
    check_training_set(labels, classes, 1)?;
    let mut network = Network::new(config, classes.len(), seed)?;
    let expected = config.input_shape().len();
    if let Some(bad) = inputs.iter().find(|x| x.len() != expected) {
        return Err(OmrError::DimensionMismatch {
            expected,
            got: bad.len(),
        });
    }
    let plane = (config.input_size * config.input_size) as f64;
    let mut input_mean = [0.0; 3];
    for x in inputs {
        for (c, m) in input_mean.iter_mut().enumerate() {
            *m += x[c * plane as usize..(c + 1) * plane as usize].iter().sum::<f64>() / plane;
        }
    }
    input_mean.iter_mut().for_each(|m| *m /= inputs.len() as f64);
    let data: Vec<Vec<f64>> = inputs
        .iter()
        .map(|x| {
            let mut x = x.clone();
            center(&mut x, &input_mean);
            x
        })
        .collect();
    let targets: Vec<usize> = labels
        .iter()
        .map(|&l| classes.position(l).expect("checked above"))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut velocity: Vec<Params> = network.params.iter().map(Params::zeros_like).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads: Vec<Params> = network.params.iter().map(Params::zeros_like).collect();
            for &i in batch {
                let trace = network.forward(&data[i], Some(&mut rng));
                total += Network::loss(&trace, targets[i]);
                network.accumulate_gradients(&trace, targets[i], &mut grads);
            }
            let scale = 1.0 / batch.len() as f64;
            for ((p, v), g) in network.params.iter_mut().zip(&mut velocity).zip(&grads) {
                for ((w, vw), gw) in p.weights.iter_mut().zip(&mut v.weights).zip(&g.weights) {
                    *vw = config.momentum * *vw - config.learning_rate * (gw * scale + config.weight_decay * *w);
                    *w += *vw;
                }
                for ((b, vb), gb) in p.bias.iter_mut().zip(&mut v.bias).zip(&g.bias) {
                    *vb = config.momentum * *vb - config.learning_rate * gb * scale;
                    *b += *vb;
                }
            }
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite() {
            return Err(OmrError::Divergence { epoch });
        }
        epoch_losses.push(mean);
    }
    Ok(CnnModel {
        classes,
        config: config.clone(),
        input_mean,
        network,
        epoch_losses,
    })
}

pub fn train_cnn(
    rois: &[&RoiImage],
    labels: &[AnswerClass],
    classes: ClassSet,
    config: &CnnConfig,
    seed: u64,
) -> Result<CnnModel> {
    let inputs = rois
        .iter()
        .map(|r| roi_tensor(r, config.input_size))
        .collect::<Result<Vec<_>>>()?;
    train_cnn_tensors(&inputs, labels, classes, config, seed)
}

impl CnnModel {
    pub fn probabilities(&self, tensor: &[f64]) -> Result<Vec<f64>> {
        let expected = self.config.input_shape().len();
        if tensor.len() != expected {
            return Err(OmrError::DimensionMismatch {
                expected,
                got: tensor.len(),
            });
        }
        let mut x = tensor.to_vec();
        center(&mut x, &self.input_mean);
        Ok(self.network.predict(&x))
    }

    pub fn classify(&self, roi: &RoiImage) -> Result<ClassScores> {
        let t = roi_tensor(roi, self.config.input_size)?;
        Ok(ClassScores::from_probabilities(self.classes, &self.probabilities(&t)?))
    }
}
