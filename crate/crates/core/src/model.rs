//! Plaintext CNN: layer descriptors, float forward/backward passes, SGD, and
//! a bit-exact fixed-point forward pass that mirrors what the secret-shared
//! evaluation computes.
//!
//! Tensors are flat `Vec<f64>` in channel-major (CHW) order.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ring::{FixedPointConfig, RingElement};

/// Channel, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Shape3 { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat(n: usize) -> Self {
        Shape3 { c: n, h: 1, w: 1 }
    }

    pub fn dims(&self) -> Vec<usize> {
        vec![self.c, self.h, self.w]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum LayerKind {
    Conv2d = 1,
    Relu = 2,
    MaxPool2 = 3,
    AvgPool2 = 4,
    Flatten = 5,
    Dense = 6,
}

impl LayerKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => LayerKind::Conv2d,
            2 => LayerKind::Relu,
            3 => LayerKind::MaxPool2,
            4 => LayerKind::AvgPool2,
            5 => LayerKind::Flatten,
            6 => LayerKind::Dense,
            _ => return None,
        })
    }
}

/// A layer with float parameters. Convolutions are valid-padded with stride
/// 1; pools are 2x2 with stride 2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        /// `out_ch x in_ch x kernel x kernel`.
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
    Relu,
    MaxPool2,
    AvgPool2,
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
        /// `outputs x inputs`, row-major.
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d { .. } => LayerKind::Conv2d,
            Layer::Relu => LayerKind::Relu,
            Layer::MaxPool2 => LayerKind::MaxPool2,
            Layer::AvgPool2 => LayerKind::AvgPool2,
            Layer::Flatten => LayerKind::Flatten,
            Layer::Dense { .. } => LayerKind::Dense,
        }
    }

    /// Parameter-shape dims as stored in model files.
    pub fn param_dims(&self) -> Vec<usize> {
        match self {
            Layer::Conv2d { in_ch, out_ch, kernel, .. } => vec![*out_ch, *in_ch, *kernel, *kernel],
            Layer::Dense { inputs, outputs, .. } => vec![*outputs, *inputs],
            _ => Vec::new(),
        }
    }

    pub fn params(&self) -> Option<(&[f64], &[f64])> {
        match self {
            Layer::Conv2d { weights, bias, .. } | Layer::Dense { weights, bias, .. } => Some((weights, bias)),
            _ => None,
        }
    }

    fn params_mut(&mut self) -> Option<(&mut Vec<f64>, &mut Vec<f64>)> {
        match self {
            Layer::Conv2d { weights, bias, .. } | Layer::Dense { weights, bias, .. } => Some((weights, bias)),
            _ => None,
        }
    }

    /// Output shape for `input`, or a shape error.
    pub fn output_shape(&self, input: Shape3) -> Result<Shape3> {
        match self {
            Layer::Conv2d { in_ch, out_ch, kernel, weights, bias } => {
                if input.c != *in_ch || input.h < *kernel || input.w < *kernel || *kernel == 0 {
                    return Err(Error::Shape(format!(
                        "conv {in_ch}->{out_ch} k={kernel} cannot take input {input:?}"
                    )));
                }
                if weights.len() != out_ch * in_ch * kernel * kernel || bias.len() != *out_ch {
                    return Err(Error::Shape("conv parameter count does not match its shape".into()));
                }
                Ok(Shape3::new(*out_ch, input.h - kernel + 1, input.w - kernel + 1))
            }
            Layer::Relu => Ok(input),
            Layer::MaxPool2 | Layer::AvgPool2 => {
                if input.h % 2 != 0 || input.w % 2 != 0 || input.h == 0 {
                    return Err(Error::Shape(format!("2x2 pooling needs even spatial dims, got {input:?}")));
                }
                Ok(Shape3::new(input.c, input.h / 2, input.w / 2))
            }
            Layer::Flatten => Ok(Shape3::flat(input.len())),
            Layer::Dense { inputs, outputs, weights, bias } => {
                if input.len() != *inputs {
                    return Err(Error::Shape(format!(
                        "dense layer expects {inputs} inputs, got {}",
                        input.len()
                    )));
                }
                if weights.len() != inputs * outputs || bias.len() != *outputs {
                    return Err(Error::Shape("dense parameter count does not match its shape".into()));
                }
                Ok(Shape3::flat(*outputs))
            }
        }
    }
}

/// Network weights plus input shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub input: Shape3,
    pub layers: Vec<Layer>,
}

fn he_init<R: Rng + ?Sized>(n: usize, fan_in: usize, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

impl ModelParams {
    pub fn new(input: Shape3, layers: Vec<Layer>) -> Result<Self> {
        let m = ModelParams { input, layers };
        m.shapes()?;
        Ok(m)
    }

    /// conv(8 filters 3x3) -> relu -> maxpool2 -> dense(32) -> relu ->
    /// dense(classes), on 16x16x1 inputs.
    pub fn reference<R: Rng + ?Sized>(num_classes: usize, rng: &mut R) -> Self {
        Self::reference_with(Shape3::new(1, 16, 16), 8, 32, num_classes, rng)
    }

    pub fn reference_with<R: Rng + ?Sized>(
        input: Shape3,
        filters: usize,
        hidden: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        let k = 3;
        let conv_fan = input.c * k * k;
        let pooled = filters * ((input.h - k + 1) / 2) * ((input.w - k + 1) / 2);
        let layers = vec![
            Layer::Conv2d {
                in_ch: input.c,
                out_ch: filters,
                kernel: k,
                weights: he_init(filters * conv_fan, conv_fan, rng),
                bias: vec![0.0; filters],
            },
            Layer::Relu,
            Layer::MaxPool2,
            Layer::Flatten,
            Layer::Dense {
                inputs: pooled,
                outputs: hidden,
                weights: he_init(hidden * pooled, pooled, rng),
                bias: vec![0.0; hidden],
            },
            Layer::Relu,
            Layer::Dense {
                inputs: hidden,
                outputs: num_classes,
                weights: he_init(num_classes * hidden, hidden, rng),
                bias: vec![0.0; num_classes],
            },
        ];
        ModelParams::new(input, layers).expect("reference architecture composes")
    }

    /// Shape after every layer (index 0 is the input).
    pub fn shapes(&self) -> Result<Vec<Shape3>> {
        let mut shapes = vec![self.input];
        for layer in &self.layers {
            let next = layer.output_shape(*shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn num_classes(&self) -> usize {
        self.shapes().map(|s| s.last().unwrap().len()).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.params())
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    /// All weights and biases, layer by layer (weights before bias).
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.layers.iter().filter_map(|l| l.params()) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "model has {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        for (w, b) in self.layers.iter_mut().filter_map(|l| l.params_mut()) {
            let (nw, nb) = (w.len(), b.len());
            w.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            b.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn with_params(&self, flat: &[f64]) -> Result<Self> {
        let mut m = self.clone();
        m.set_params(flat)?;
        Ok(m)
    }

    /// True when both models have the same architecture.
    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.input == other.input
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.kind() == b.kind() && a.param_dims() == b.param_dims())
    }

    /// Float logits.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x)?.pop().unwrap())
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax_f64(&self.forward(x)?))
    }

    /// Activations after every layer (index 0 is the input).
    fn forward_trace(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.input.len() {
            return Err(Error::Shape(format!(
                "input has {} values, model expects {}",
                x.len(),
                self.input.len()
            )));
        }
        let shapes = self.shapes()?;
        let mut acts = vec![x.to_vec()];
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer_forward(layer, &acts[i], shapes[i]);
            acts.push(out);
        }
        Ok(acts)
    }

    /// Cross-entropy loss and parameter gradient (flattened like
    /// [`Self::flatten_params`]) for one sample.
    pub fn loss_and_grad(&self, x: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        let shapes = self.shapes()?;
        let acts = self.forward_trace(x)?;
        let logits = acts.last().unwrap();
        if label >= logits.len() {
            return Err(Error::Parameter(format!("label {label} >= {} classes", logits.len())));
        }
        let probs = softmax(logits);
        let loss = -probs[label].max(1e-300).ln();
        let mut grad_out: Vec<f64> = probs;
        grad_out[label] -= 1.0;

        let mut grads: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; self.layers.len()];
        for i in (0..self.layers.len()).rev() {
            let (gin, gparams) = layer_backward(&self.layers[i], &acts[i], shapes[i], &acts[i + 1], &grad_out);
            grads[i] = gparams;
            grad_out = gin;
        }
        let mut flat = Vec::with_capacity(self.param_count());
        for (gw, gb) in grads.into_iter().flatten() {
            flat.extend(gw);
            flat.extend(gb);
        }
        Ok((loss, flat))
    }

    /// One SGD step on a mini-batch; returns the mean loss.
    pub fn sgd_step(&mut self, batch: &[(&[f64], usize)], lr: f64) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let mut total = vec![0.0; self.param_count()];
        let mut loss = 0.0;
        for (x, y) in batch {
            let (l, g) = self.loss_and_grad(x, *y)?;
            loss += l;
            for (t, gi) in total.iter_mut().zip(g) {
                *t += gi;
            }
        }
        let scale = lr / batch.len() as f64;
        let mut params = self.flatten_params();
        for (p, g) in params.iter_mut().zip(total) {
            *p -= scale * g;
        }
        self.set_params(&params)?;
        Ok(loss / batch.len() as f64)
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest value, lowest index on ties.
pub fn argmax_f64(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[inline]
fn idx(s: Shape3, c: usize, i: usize, j: usize) -> usize {
    (c * s.h + i) * s.w + j
}

/// Offsets of the four cells of pooling window `(c, i, j)` in the order
/// top-left, top-right, bottom-left, bottom-right.
pub fn pool_window(s: Shape3, c: usize, i: usize, j: usize) -> [usize; 4] {
    [
        idx(s, c, 2 * i, 2 * j),
        idx(s, c, 2 * i, 2 * j + 1),
        idx(s, c, 2 * i + 1, 2 * j),
        idx(s, c, 2 * i + 1, 2 * j + 1),
    ]
}

/// For each convolution output, the `(input offset, weight offset)` pairs it
/// sums over (im2col lowering).
pub fn conv_taps(input: Shape3, in_ch: usize, out_ch: usize, kernel: usize) -> Vec<Vec<(usize, usize)>> {
    let (oh, ow) = (input.h - kernel + 1, input.w - kernel + 1);
    let mut out = Vec::with_capacity(out_ch * oh * ow);
    for o in 0..out_ch {
        for i in 0..oh {
            for j in 0..ow {
                let mut taps = Vec::with_capacity(in_ch * kernel * kernel);
                for c in 0..in_ch {
                    for di in 0..kernel {
                        for dj in 0..kernel {
                            let w = ((o * in_ch + c) * kernel + di) * kernel + dj;
                            taps.push((idx(input, c, i + di, j + dj), w));
                        }
                    }
                }
                out.push(taps);
            }
        }
    }
    out
}

fn layer_forward(layer: &Layer, x: &[f64], s: Shape3) -> Vec<f64> {
    match layer {
        Layer::Conv2d { in_ch, out_ch, kernel, weights, bias } => {
            let (oh, ow) = (s.h - kernel + 1, s.w - kernel + 1);
            let mut out = vec![0.0; out_ch * oh * ow];
            for (n, taps) in conv_taps(s, *in_ch, *out_ch, *kernel).iter().enumerate() {
                let o = n / (oh * ow);
                out[n] = bias[o] + taps.iter().map(|&(xi, wi)| x[xi] * weights[wi]).sum::<f64>();
            }
            out
        }
        Layer::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
        Layer::MaxPool2 | Layer::AvgPool2 => {
            let mut out = Vec::with_capacity(s.len() / 4);
            for c in 0..s.c {
                for i in 0..s.h / 2 {
                    for j in 0..s.w / 2 {
                        let win = pool_window(s, c, i, j).map(|k| x[k]);
                        out.push(if matches!(layer, Layer::MaxPool2) {
                            win[0].max(win[1]).max(win[2].max(win[3]))
                        } else {
                            win.iter().sum::<f64>() / 4.0
                        });
                    }
                }
            }
            out
        }
        Layer::Flatten => x.to_vec(),
        Layer::Dense { inputs, outputs, weights, bias } => (0..*outputs)
            .map(|o| bias[o] + (0..*inputs).map(|j| weights[o * inputs + j] * x[j]).sum::<f64>())
            .collect(),
    }
}

type ParamGrad = Option<(Vec<f64>, Vec<f64>)>;

fn layer_backward(layer: &Layer, x: &[f64], s: Shape3, y: &[f64], gy: &[f64]) -> (Vec<f64>, ParamGrad) {
    match layer {
        Layer::Conv2d { in_ch, out_ch, kernel, weights, .. } => {
            let (oh, ow) = (s.h - kernel + 1, s.w - kernel + 1);
            let mut gx = vec![0.0; x.len()];
            let mut gw = vec![0.0; weights.len()];
            let mut gb = vec![0.0; *out_ch];
            for (n, taps) in conv_taps(s, *in_ch, *out_ch, *kernel).iter().enumerate() {
                let g = gy[n];
                if g == 0.0 {
                    continue;
                }
                gb[n / (oh * ow)] += g;
                for &(xi, wi) in taps {
                    gw[wi] += g * x[xi];
                    gx[xi] += g * weights[wi];
                }
            }
            (gx, Some((gw, gb)))
        }
        Layer::Relu => (
            x.iter().zip(gy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect(),
            None,
        ),
        Layer::MaxPool2 => {
            let mut gx = vec![0.0; x.len()];
            let mut n = 0;
            for c in 0..s.c {
                for i in 0..s.h / 2 {
                    for j in 0..s.w / 2 {
                        let win = pool_window(s, c, i, j);
                        let target = win.iter().copied().find(|&k| x[k] == y[n]).unwrap_or(win[0]);
                        gx[target] += gy[n];
                        n += 1;
                    }
                }
            }
            (gx, None)
        }
        Layer::AvgPool2 => {
            let mut gx = vec![0.0; x.len()];
            let mut n = 0;
            for c in 0..s.c {
                for i in 0..s.h / 2 {
                    for j in 0..s.w / 2 {
                        for k in pool_window(s, c, i, j) {
                            gx[k] += gy[n] / 4.0;
                        }
                        n += 1;
                    }
                }
            }
            (gx, None)
        }
        Layer::Flatten => (gy.to_vec(), None),
        Layer::Dense { inputs, outputs, weights, .. } => {
            let mut gx = vec![0.0; *inputs];
            let mut gw = vec![0.0; weights.len()];
            for o in 0..*outputs {
                let g = gy[o];
                for j in 0..*inputs {
                    gw[o * inputs + j] = g * x[j];
                    gx[j] += g * weights[o * inputs + j];
                }
            }
            (gx, Some((gw, gy.to_vec())))
        }
    }
}

/// Ring-encoded copy of a model's parameters, used by the fixed-point
/// reference pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedLayer {
    pub kind: LayerKind,
    pub weights: Vec<RingElement>,
    pub bias: Vec<RingElement>,
}

pub fn encode_layers(model: &ModelParams, cfg: FixedPointConfig) -> Result<Vec<EncodedLayer>> {
    model
        .layers
        .iter()
        .map(|l| {
            let (w, b) = l.params().unwrap_or((&[], &[]));
            Ok(EncodedLayer {
                kind: l.kind(),
                weights: cfg.encode_slice(w)?,
                bias: cfg.encode_slice(b)?,
            })
        })
        .collect()
}

/// Plaintext fixed-point inference with exact floor truncation. The secure
/// pipeline computes the same function up to one unit of truncation noise
/// per rescaling.
pub fn fixed_point_forward(model: &ModelParams, cfg: FixedPointConfig, x: &[f64]) -> Result<Vec<RingElement>> {
    let shapes = model.shapes()?;
    let enc = encode_layers(model, cfg)?;
    let mut act = cfg.encode_slice(x)?;
    if act.len() != model.input.len() {
        return Err(Error::Shape("input length does not match the model".into()));
    }
    let f = cfg.frac_bits();
    for (i, (layer, e)) in model.layers.iter().zip(&enc).enumerate() {
        let s = shapes[i];
        act = match layer {
            Layer::Conv2d { in_ch, out_ch, kernel, .. } => {
                let (oh, ow) = (s.h - kernel + 1, s.w - kernel + 1);
                conv_taps(s, *in_ch, *out_ch, *kernel)
                    .iter()
                    .enumerate()
                    .map(|(n, taps)| {
                        let acc = taps
                            .iter()
                            .fold(RingElement::ZERO, |a, &(xi, wi)| cfg.add(a, cfg.mul(act[xi], e.weights[wi])));
                        cfg.add(cfg.shift_right_signed(acc, f), e.bias[n / (oh * ow)])
                    })
                    .collect()
            }
            Layer::Dense { inputs, outputs, .. } => (0..*outputs)
                .map(|o| {
                    let acc = (0..*inputs).fold(RingElement::ZERO, |a, j| {
                        cfg.add(a, cfg.mul(act[j], e.weights[o * inputs + j]))
                    });
                    cfg.add(cfg.shift_right_signed(acc, f), e.bias[o])
                })
                .collect(),
            Layer::Relu => act
                .iter()
                .map(|&v| if cfg.signed(v) > 0 { v } else { RingElement::ZERO })
                .collect(),
            Layer::MaxPool2 | Layer::AvgPool2 => {
                let quarter = cfg.encode(0.25)?;
                let mut out = Vec::with_capacity(s.len() / 4);
                for c in 0..s.c {
                    for i in 0..s.h / 2 {
                        for j in 0..s.w / 2 {
                            let w = pool_window(s, c, i, j).map(|k| act[k]);
                            out.push(if matches!(layer, Layer::MaxPool2) {
                                let m = |a: RingElement, b: RingElement| if cfg.signed(a) > cfg.signed(b) { a } else { b };
                                m(m(w[0], w[1]), m(w[2], w[3]))
                            } else {
                                let sum = w.iter().fold(RingElement::ZERO, |a, &v| cfg.add(a, v));
                                cfg.shift_right_signed(cfg.mul(sum, quarter), f)
                            });
                        }
                    }
                }
                out
            }
            Layer::Flatten => act,
        };
    }
    Ok(act)
}

/// Lowest-index argmax over signed ring values.
pub fn argmax_ring(cfg: FixedPointConfig, v: &[RingElement]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if cfg.signed(x) > cfg.signed(v[best]) {
            best = i;
        }
    }
    best
}

/// Worst-case distance, in LSBs, between secret-shared logits and the
/// [`fixed_point_forward`] logits. Every rescaling adds at most one unit of
/// floor mismatch plus one unit of share-wrap noise; linear layers scale the
/// incoming error by the row's absolute weight sum; ReLU and max pooling do
/// not amplify it.
pub fn logit_error_budget(model: &ModelParams) -> Result<f64> {
    model.shapes()?;
    let mut err = 0.0f64;
    for layer in &model.layers {
        err = match layer {
            Layer::Conv2d { in_ch, out_ch, kernel, weights, .. } => {
                let per = in_ch * kernel * kernel;
                let worst = (0..*out_ch)
                    .map(|o| weights[o * per..(o + 1) * per].iter().map(|w| w.abs()).sum::<f64>())
                    .fold(0.0, f64::max);
                worst * err + 2.0
            }
            Layer::Dense { inputs, outputs, weights, .. } => {
                let worst = (0..*outputs)
                    .map(|o| weights[o * inputs..(o + 1) * inputs].iter().map(|w| w.abs()).sum::<f64>())
                    .fold(0.0, f64::max);
                worst * err + 2.0
            }
            Layer::AvgPool2 => err + 2.0,
            Layer::Relu | Layer::MaxPool2 | Layer::Flatten => err,
        };
    }
    Ok(err)
}
