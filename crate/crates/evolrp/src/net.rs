//! Sequential network: layer definitions, forward pass with activation
//! recording, and manual backpropagation.
//!
//! Only sequential graphs are supported. Conv2d uses zero "same" padding so
//! spatial attribution maps align with input pixels. All reductions
//! accumulate in f64 and store f32.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Weight shape (out_channels, in_channels, kH, kW); zero-padded "same"
    /// output grid of ceil(in/stride) per spatial dim.
    Conv2d {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
    },
    /// Weight shape (out_features, in_features).
    Dense { weight: Tensor, bias: Tensor },
    ReLU,
    /// 2x2 window, stride 2; requires even spatial dims.
    MaxPool2x2,
    Flatten,
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "Conv2d",
            Layer::Dense { .. } => "Dense",
            Layer::ReLU => "ReLU",
            Layer::MaxPool2x2 => "MaxPool2x2",
            Layer::Flatten => "Flatten",
        }
    }

    /// Conv2d and Dense carry parameters; these are the trainable layers
    /// counted by the optimizer genome.
    pub fn is_trainable(&self) -> bool {
        matches!(self, Layer::Conv2d { .. } | Layer::Dense { .. })
    }

    /// Shape of this layer's output given an input shape, or a shape error
    /// mentioning `label` (e.g. "layer 2 (Conv2d)").
    pub fn output_shape(&self, input: &[usize], label: &str) -> Result<Vec<usize>> {
        match self {
            Layer::Conv2d { weight, bias, stride } => {
                let ws = weight.shape();
                if ws.len() != 4 {
                    return Err(Error::InvalidModel(format!(
                        "{label}: conv weight must be 4-d, got {ws:?}"
                    )));
                }
                let (oc, ic) = (ws[0], ws[1]);
                if bias.shape() != [oc] {
                    return Err(Error::InvalidModel(format!(
                        "{label}: bias shape {:?} does not match {oc} output channels",
                        bias.shape()
                    )));
                }
                if *stride == 0 {
                    return Err(Error::InvalidModel(format!("{label}: stride must be >= 1")));
                }
                match input {
                    [c, h, w] if *c == ic => {
                        let oh = h.div_ceil(*stride);
                        let ow = w.div_ceil(*stride);
                        Ok(vec![oc, oh, ow])
                    }
                    _ => Err(Error::shape(label, &[ic, 0, 0], input)),
                }
            }
            Layer::Dense { weight, bias } => {
                let ws = weight.shape();
                if ws.len() != 2 {
                    return Err(Error::InvalidModel(format!(
                        "{label}: dense weight must be 2-d, got {ws:?}"
                    )));
                }
                if bias.shape() != [ws[0]] {
                    return Err(Error::InvalidModel(format!(
                        "{label}: bias shape {:?} does not match {} output features",
                        bias.shape(),
                        ws[0]
                    )));
                }
                if input != [ws[1]] {
                    return Err(Error::shape(label, &[ws[1]], input));
                }
                Ok(vec![ws[0]])
            }
            Layer::ReLU => Ok(input.to_vec()),
            Layer::MaxPool2x2 => match input {
                [c, h, w] if h % 2 == 0 && w % 2 == 0 => Ok(vec![*c, h / 2, w / 2]),
                _ => Err(Error::InvalidModel(format!(
                    "{label}: MaxPool2x2 needs (C, even H, even W), got {input:?}"
                ))),
            },
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    fn forward(&self, input: &Tensor, label: &str) -> Result<Tensor> {
        let out_shape = self.output_shape(input.shape(), label)?;
        let out = match self {
            Layer::Conv2d { weight, bias, stride } => conv2d_forward(input, weight, bias, *stride),
            Layer::Dense { weight, bias } => dense_forward(input, weight, bias),
            Layer::ReLU => return input.map(|v| v.max(0.0)),
            Layer::MaxPool2x2 => maxpool2x2_with_argmax(input).0,
            Layer::Flatten => return input.reshape(out_shape),
        };
        let t = Tensor::from_raw(out_shape, out);
        t.check_finite(label)?;
        Ok(t)
    }

    /// Gradient of the loss w.r.t. this layer's input and parameters, given
    /// the recorded input activation and the output gradient.
    fn backward(&self, input: &Tensor, d_out: &Tensor, label: &str) -> Result<(Tensor, Option<ParamGrad>)> {
        let out_shape = self.output_shape(input.shape(), label)?;
        if d_out.shape() != out_shape.as_slice() {
            return Err(Error::shape(label, &out_shape, d_out.shape()));
        }
        match self {
            Layer::Conv2d { weight, stride, .. } => {
                let (d_in, d_w, d_b) = conv2d_backward(input, weight, d_out, *stride);
                Ok((d_in, Some(ParamGrad { weight: d_w, bias: d_b })))
            }
            Layer::Dense { weight, .. } => {
                let (d_in, d_w, d_b) = dense_backward(input, weight, d_out);
                Ok((d_in, Some(ParamGrad { weight: d_w, bias: d_b })))
            }
            Layer::ReLU => {
                let data = input
                    .data()
                    .iter()
                    .zip(d_out.data())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                Ok((Tensor::from_raw(input.shape().to_vec(), data), None))
            }
            Layer::MaxPool2x2 => {
                let (_, argmax) = maxpool2x2_with_argmax(input);
                let mut data = vec![0.0f32; input.len()];
                for (o, &src) in argmax.iter().enumerate() {
                    data[src] += d_out.data()[o];
                }
                Ok((Tensor::from_raw(input.shape().to_vec(), data), None))
            }
            Layer::Flatten => Ok((d_out.reshape(input.shape().to_vec())?, None)),
        }
    }
}

/// Per-layer parameter gradients (absent for ReLU/MaxPool/Flatten).
#[derive(Debug, Clone)]
pub struct ParamGrad {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layers: Vec<Layer>,
    /// (channels, height, width)
    pub input_shape: [usize; 3],
    pub class_names: Vec<String>,
}

/// Activation record of one forward pass: `activations[i]` is the input of
/// layer i, `activations[n_layers]` holds the logits. Layer i's output is
/// layer i+1's input by construction.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    activations: Vec<Tensor>,
}

impl ActivationTrace {
    pub fn n_layers(&self) -> usize {
        self.activations.len() - 1
    }

    pub fn input(&self, layer: usize) -> &Tensor {
        &self.activations[layer]
    }

    pub fn output(&self, layer: usize) -> &Tensor {
        &self.activations[layer + 1]
    }

    pub fn logits(&self) -> &Tensor {
        self.activations.last().expect("trace is never empty")
    }
}

/// Result of backpropagation: gradient w.r.t. the network input, per-layer
/// parameter gradients (None for parameter-free layers), and the gradient
/// w.r.t. every recorded activation (index-aligned with the trace).
#[derive(Debug, Clone)]
pub struct Gradients {
    pub input: Tensor,
    pub params: Vec<Option<ParamGrad>>,
    pub activations: Vec<Tensor>,
}

impl Model {
    /// Check layer-to-layer shape compatibility and the classifier contract
    /// (final layer Dense with one output per class).
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidModel("model has no layers".into()));
        }
        if self.class_names.is_empty() {
            return Err(Error::InvalidModel("model has no classes".into()));
        }
        let mut shape = self.input_shape.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer.output_shape(&shape, &layer_label(i, layer))?;
        }
        match self.layers.last() {
            Some(Layer::Dense { .. }) if shape == [self.class_names.len()] => Ok(()),
            Some(Layer::Dense { .. }) => Err(Error::InvalidModel(format!(
                "final Dense outputs {shape:?}, expected [{}] for {} classes",
                self.class_names.len(),
                self.class_names.len()
            ))),
            _ => Err(Error::InvalidModel("final layer must be Dense".into())),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Indices of Conv2d/Dense layers in model order; the genome has one
    /// entry per index.
    pub fn trainable_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_trainable())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv2d { weight, bias, .. } | Layer::Dense { weight, bias } => {
                    Some(weight.len() + bias.len())
                }
                _ => None,
            })
            .sum()
    }

    /// Copy with all biases zeroed; exact LRP-0 conservation holds only on
    /// bias-free networks.
    pub fn zero_biases(&self) -> Model {
        let mut m = self.clone();
        for layer in &mut m.layers {
            match layer {
                Layer::Conv2d { bias, .. } | Layer::Dense { bias, .. } => {
                    *bias = Tensor::zeros(bias.shape().to_vec());
                }
                _ => {}
            }
        }
        m
    }

    pub fn forward(&self, input: &Tensor) -> Result<ActivationTrace> {
        if input.shape() != self.input_shape {
            return Err(Error::shape("model input", &self.input_shape, input.shape()));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.forward(activations.last().unwrap(), &layer_label(i, layer))?;
            activations.push(out);
        }
        Ok(ActivationTrace { activations })
    }

    /// Backpropagate `output_grad` (gradient w.r.t. the logits) through a
    /// trace produced by `forward` on this same model.
    pub fn backward(&self, trace: &ActivationTrace, output_grad: &Tensor) -> Result<Gradients> {
        if trace.n_layers() != self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "trace covers {} layers, model has {}",
                trace.n_layers(),
                self.layers.len()
            )));
        }
        if output_grad.shape() != trace.logits().shape() {
            return Err(Error::shape("output grad", trace.logits().shape(), output_grad.shape()));
        }
        let n = self.layers.len();
        let mut activation_grads = vec![Tensor::zeros(vec![1]); n + 1];
        activation_grads[n] = output_grad.clone();
        let mut params = vec![None; n];
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let (d_in, p) =
                layer.backward(trace.input(i), &activation_grads[i + 1], &layer_label(i, layer))?;
            activation_grads[i] = d_in;
            params[i] = p;
        }
        Ok(Gradients {
            input: activation_grads[0].clone(),
            params,
            activations: activation_grads,
        })
    }

    /// The fixed desk-scale architecture:
    /// Conv(1→8,3×3)+ReLU, Conv(8→8,3×3)+ReLU, MaxPool2×2,
    /// Conv(8→16,3×3)+ReLU, MaxPool2×2, Flatten, Dense(→32)+ReLU, Dense(→C).
    /// He-normal weight init from the seed's "init" substream, zero biases.
    pub fn desk_cnn(input_shape: [usize; 3], class_names: Vec<String>, seed: u64) -> Result<Model> {
        let [c, h, w] = input_shape;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "desk architecture pools twice; spatial dims must be divisible by 4, got {h}x{w}"
            )));
        }
        let n_classes = class_names.len();
        if n_classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        let flat = 16 * (h / 4) * (w / 4);
        let mut init_idx = 0u64;
        let mut conv = |oc: usize, ic: usize| -> Layer {
            let weight = he_normal(vec![oc, ic, 3, 3], ic * 9, seed, init_idx);
            init_idx += 1;
            Layer::Conv2d { weight, bias: Tensor::zeros(vec![oc]), stride: 1 }
        };
        let c1 = conv(8, c);
        let c2 = conv(8, 8);
        let c3 = conv(16, 8);
        let mut dense = |of: usize, inf: usize| -> Layer {
            let weight = he_normal(vec![of, inf], inf, seed, init_idx);
            init_idx += 1;
            Layer::Dense { weight, bias: Tensor::zeros(vec![of]) }
        };
        let d1 = dense(32, flat);
        let d2 = dense(n_classes, 32);
        let model = Model {
            layers: vec![
                c1,
                Layer::ReLU,
                c2,
                Layer::ReLU,
                Layer::MaxPool2x2,
                c3,
                Layer::ReLU,
                Layer::MaxPool2x2,
                Layer::Flatten,
                d1,
                Layer::ReLU,
                d2,
            ],
            input_shape,
            class_names,
        };
        model.validate()?;
        Ok(model)
    }
}

pub(crate) fn layer_label(index: usize, layer: &Layer) -> String {
    format!("layer {index} ({})", layer.kind_name())
}

fn he_normal(shape: Vec<usize>, fan_in: usize, seed: u64, index: u64) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("std is positive");
    let mut rng = rng::substream(seed, "init", index);
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
    Tensor::from_raw(shape, data)
}

/// Geometry of one conv application, padding included.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub ic: usize,
    pub ih: usize,
    pub iw: usize,
    pub oc: usize,
    pub oh: usize,
    pub ow: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvDims {
    pub(crate) fn new(input_shape: &[usize], weight_shape: &[usize], stride: usize) -> ConvDims {
        let (ic, ih, iw) = (input_shape[0], input_shape[1], input_shape[2]);
        let (oc, kh, kw) = (weight_shape[0], weight_shape[2], weight_shape[3]);
        let (oh, ow) = (ih.div_ceil(stride), iw.div_ceil(stride));
        // zero "same" padding yielding ceil(in/stride) outputs
        let ph = ((oh - 1) * stride + kh).saturating_sub(ih) / 2;
        let pw = ((ow - 1) * stride + kw).saturating_sub(iw) / 2;
        ConvDims { ic, ih, iw, oc, oh, ow, kh, kw, stride, ph, pw }
    }

    /// Output rows/cols whose sampled input position for kernel tap k lies
    /// inside the unpadded input: 0 <= o*stride + k - pad < in_dim.
    fn valid_out_range(&self, k: usize, pad: usize, in_dim: usize, out_dim: usize) -> (usize, usize) {
        let lo = (pad.saturating_sub(k)).div_ceil(self.stride);
        let hi_excl = if in_dim + pad > k {
            ((in_dim + pad - k - 1) / self.stride + 1).min(out_dim)
        } else {
            0
        };
        (lo.min(hi_excl), hi_excl)
    }
}

/// Convolution with f64 accumulation, returning the raw f64 output buffer.
/// Loops run per kernel tap over contiguous valid ranges so the inner loop
/// is branch-free. Also the modified-forward kernel of the LRP rules.
pub(crate) fn conv_fwd_acc(x: &[f32], w: &[f32], bias: Option<&[f32]>, d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0f64; d.oc * d.oh * d.ow];
    if let Some(b) = bias {
        for o in 0..d.oc {
            let row = &mut out[o * d.oh * d.ow..(o + 1) * d.oh * d.ow];
            row.fill(f64::from(b[o]));
        }
    }
    for o in 0..d.oc {
        for i in 0..d.ic {
            for ky in 0..d.kh {
                let (y0, y1) = d.valid_out_range(ky, d.ph, d.ih, d.oh);
                for kx in 0..d.kw {
                    let wv = f64::from(w[((o * d.ic + i) * d.kh + ky) * d.kw + kx]);
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = d.valid_out_range(kx, d.pw, d.iw, d.ow);
                    for y in y0..y1 {
                        let in_row = (i * d.ih + y * d.stride + ky - d.ph) * d.iw;
                        let out_row = (o * d.oh + y) * d.ow;
                        for xo in x0..x1 {
                            let xi = in_row + xo * d.stride + kx - d.pw;
                            out[out_row + xo] += wv * f64::from(x[xi]);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Transposed convolution (gradient w.r.t. the conv input): scatters `g`
/// back through the kernel. Also the modified-backward kernel of the LRP
/// rules, hence generic over the incoming element type.
pub(crate) fn conv_bwd_data<T: Copy + Into<f64>>(g: &[T], w: &[f32], d: &ConvDims) -> Vec<f64> {
    let mut d_in = vec![0.0f64; d.ic * d.ih * d.iw];
    for o in 0..d.oc {
        for i in 0..d.ic {
            for ky in 0..d.kh {
                let (y0, y1) = d.valid_out_range(ky, d.ph, d.ih, d.oh);
                for kx in 0..d.kw {
                    let wv = f64::from(w[((o * d.ic + i) * d.kh + ky) * d.kw + kx]);
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = d.valid_out_range(kx, d.pw, d.iw, d.ow);
                    for y in y0..y1 {
                        let in_row = (i * d.ih + y * d.stride + ky - d.ph) * d.iw;
                        let out_row = (o * d.oh + y) * d.ow;
                        for xo in x0..x1 {
                            let xi = in_row + xo * d.stride + kx - d.pw;
                            d_in[xi] += wv * g[out_row + xo].into();
                        }
                    }
                }
            }
        }
    }
    d_in
}

fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Vec<f32> {
    let d = ConvDims::new(input.shape(), weight.shape(), stride);
    conv_fwd_acc(input.data(), weight.data(), Some(bias.data()), &d)
        .iter()
        .map(|&v| v as f32)
        .collect()
}

fn conv2d_backward(input: &Tensor, weight: &Tensor, d_out: &Tensor, stride: usize) -> (Tensor, Tensor, Tensor) {
    let d = ConvDims::new(input.shape(), weight.shape(), stride);
    let x = input.data();
    let g = d_out.data();
    let d_in = conv_bwd_data(g, weight.data(), &d);
    let mut d_w = vec![0.0f64; weight.len()];
    let mut d_b = vec![0.0f64; d.oc];
    for o in 0..d.oc {
        let out_plane = &g[o * d.oh * d.ow..(o + 1) * d.oh * d.ow];
        d_b[o] = out_plane.iter().map(|&v| f64::from(v)).sum();
        for i in 0..d.ic {
            for ky in 0..d.kh {
                let (y0, y1) = d.valid_out_range(ky, d.ph, d.ih, d.oh);
                for kx in 0..d.kw {
                    let (x0, x1) = d.valid_out_range(kx, d.pw, d.iw, d.ow);
                    let mut acc = 0.0f64;
                    for y in y0..y1 {
                        let in_row = (i * d.ih + y * d.stride + ky - d.ph) * d.iw;
                        let out_row = y * d.ow;
                        for xo in x0..x1 {
                            let xi = in_row + xo * d.stride + kx - d.pw;
                            acc += f64::from(x[xi]) * f64::from(out_plane[out_row + xo]);
                        }
                    }
                    d_w[((o * d.ic + i) * d.kh + ky) * d.kw + kx] = acc;
                }
            }
        }
    }
    (
        Tensor::from_raw(input.shape().to_vec(), d_in.iter().map(|&v| v as f32).collect()),
        Tensor::from_raw(weight.shape().to_vec(), d_w.iter().map(|&v| v as f32).collect()),
        Tensor::from_raw(vec![d.oc], d_b.iter().map(|&v| v as f32).collect()),
    )
}

fn dense_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Vec<f32> {
    let (of, inf) = (weight.shape()[0], weight.shape()[1]);
    let x = input.data();
    let w = weight.data();
    let mut out = vec![0.0f32; of];
    for o in 0..of {
        let row = &w[o * inf..(o + 1) * inf];
        let mut acc = f64::from(bias.data()[o]);
        for i in 0..inf {
            acc += f64::from(row[i]) * f64::from(x[i]);
        }
        out[o] = acc as f32;
    }
    out
}

fn dense_backward(input: &Tensor, weight: &Tensor, d_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (of, inf) = (weight.shape()[0], weight.shape()[1]);
    let x = input.data();
    let w = weight.data();
    let g = d_out.data();
    let mut d_in = vec![0.0f64; inf];
    let mut d_w = vec![0.0f32; of * inf];
    for o in 0..of {
        let go = f64::from(g[o]);
        let row = &w[o * inf..(o + 1) * inf];
        for i in 0..inf {
            d_in[i] += f64::from(row[i]) * go;
            d_w[o * inf + i] = (f64::from(x[i]) * go) as f32;
        }
    }
    (
        Tensor::from_raw(vec![inf], d_in.iter().map(|&v| v as f32).collect()),
        Tensor::from_raw(vec![of, inf], d_w),
        d_out.clone(),
    )
}

/// 2x2/stride-2 max pooling plus the flat input index of each window's
/// maximum. Ties go to the first maximum in row-major window order, which
/// fixes the winner-take-all target for relevance routing.
pub(crate) fn maxpool2x2_with_argmax(input: &Tensor) -> (Vec<f32>, Vec<usize>) {
    let [c, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2]];
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = vec![0.0f32; c * oh * ow];
    let mut argmax = vec![0usize; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = (ch * h + 2 * y + dy) * w + 2 * xo + dx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (ch * oh + y) * ow + xo;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    (out, argmax)
}
