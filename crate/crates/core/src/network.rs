//! Declarative layer graphs, their parameters, and tapped execution.
//!
//! A tap is the post-ReLU output of a convolution. Taps are numbered
//! `1..=L` in network order; tap `0` denotes the input image.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{invalid, Error, Result};
use crate::numerics::{self, LayerGrad};
use crate::rng::Rng;
use crate::tensor::{Shape4, Tensor4};
use crate::training::SplitPlan;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    /// Square-kernel convolution with zero padding.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
    },
}

impl Layer {
    pub fn conv3x3(in_channels: usize, out_channels: usize) -> Self {
        Layer::Conv {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 1,
            pad: 1,
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            Layer::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => out_channels * in_channels * kernel * kernel + out_channels,
            Layer::Dense { inputs, outputs } => inputs * outputs + outputs,
            _ => 0,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            Layer::Conv {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            Layer::Dense { inputs, .. } => inputs,
            _ => 0,
        }
    }

    /// Output item shape (batch = 1) for an item of shape `input`.
    pub fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        let input = input.with_n(1);
        match *self {
            Layer::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => numerics::conv2d_output_shape(
                input,
                Shape4::new(out_channels, in_channels, kernel, kernel),
                stride,
                pad,
            ),
            Layer::Relu => Ok(input),
            Layer::MaxPool { window, stride } => numerics::maxpool2d_output_shape(input, window, stride),
            Layer::Flatten => Ok(Shape4::new(1, input.item_len(), 1, 1)),
            Layer::Dense { inputs, outputs } => {
                if input.item_len() != inputs {
                    return Err(Error::ShapeMismatch {
                        context: "dense",
                        expected: format!("{inputs} inputs"),
                        found: format!("item {input}"),
                    });
                }
                Ok(Shape4::new(1, outputs, 1, 1))
            }
        }
    }

    fn split_params<'a>(&self, params: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        match *self {
            Layer::Conv { out_channels, .. } => params.split_at(params.len() - out_channels),
            Layer::Dense { outputs, .. } => params.split_at(params.len() - outputs),
            _ => (params, &[]),
        }
    }

    fn kernel_shape(&self) -> Shape4 {
        match *self {
            Layer::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Shape4::new(out_channels, in_channels, kernel, kernel),
            _ => Shape4::new(0, 0, 0, 0),
        }
    }

    pub fn forward(&self, params: &[f64], x: &Tensor4) -> Result<Tensor4> {
        if params.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                context: "layer parameters",
                expected: format!("{} values", self.param_count()),
                found: format!("{}", params.len()),
            });
        }
        match *self {
            Layer::Conv { stride, pad, .. } => {
                let ks = self.kernel_shape();
                let out_item = self.output_shape(x.shape())?;
                let (kernel, bias) = self.split_params(params);
                let mut out = Tensor4::try_zeros(out_item.with_n(x.shape().n))?;
                numerics::conv2d_forward_raw(x, kernel, ks, bias, stride, pad, &mut out);
                Ok(out)
            }
            Layer::Relu => Ok(numerics::relu(x)),
            Layer::MaxPool { window, stride } => numerics::maxpool2d(x, window, stride),
            Layer::Flatten => {
                let s = x.shape();
                x.clone().reshape(Shape4::new(s.n, s.item_len(), 1, 1))
            }
            Layer::Dense { .. } => {
                let (w, b) = self.split_params(params);
                numerics::dense(x, w, b)
            }
        }
    }

    pub fn backward(&self, params: &[f64], x: &Tensor4, grad_out: &Tensor4, want_params: bool) -> Result<LayerGrad> {
        let no_params = |d_input| LayerGrad {
            d_input,
            d_params: Vec::new(),
        };
        match *self {
            Layer::Conv { stride, pad, .. } => {
                let ks = self.kernel_shape();
                let expected = self.output_shape(x.shape())?.with_n(x.shape().n);
                if grad_out.shape() != expected {
                    return Err(Error::ShapeMismatch {
                        context: "conv backward",
                        expected: format!("{expected}"),
                        found: format!("{}", grad_out.shape()),
                    });
                }
                let (kernel, _) = self.split_params(params);
                Ok(numerics::conv2d_backward_raw(
                    x,
                    kernel,
                    ks,
                    stride,
                    pad,
                    grad_out,
                    want_params,
                ))
            }
            Layer::Relu => Ok(no_params(numerics::relu_backward(x, grad_out)?)),
            Layer::MaxPool { window, stride } => Ok(no_params(numerics::maxpool2d_backward(x, window, stride, grad_out)?)),
            Layer::Flatten => Ok(no_params(grad_out.clone().reshape(x.shape())?)),
            Layer::Dense { .. } => {
                let (w, _) = self.split_params(params);
                numerics::dense_backward(x, w, grad_out, want_params)
            }
        }
    }
}

/// Immutable, validated layer graph.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    input: Shape4,
    layers: Vec<Layer>,
    classes: usize,
    /// Output item shape of each layer.
    shapes: Vec<Shape4>,
    /// Layer index whose output is tap `t` (stored at `t - 1`).
    taps: Vec<usize>,
}

impl NetworkSpec {
    /// Validates that the layer shapes chain and that the network ends in a
    /// dense layer with `classes` outputs.
    pub fn new(input: (usize, usize, usize), layers: Vec<Layer>, classes: usize) -> Result<Self> {
        let (c, h, w) = input;
        if c == 0 || h == 0 || w == 0 || classes == 0 {
            return Err(Error::InvalidNetwork(format!(
                "input {c}x{h}x{w} and class count {classes} must be positive"
            )));
        }
        let input = Shape4::new(1, c, h, w);
        let mut shapes = Vec::with_capacity(layers.len());
        let mut cur = input;
        for (i, layer) in layers.iter().enumerate() {
            cur = layer
                .output_shape(cur)
                .map_err(|e| Error::InvalidNetwork(format!("layer {i} ({layer:?}): {e}")))?;
            if cur.is_empty() {
                return Err(Error::InvalidNetwork(format!("layer {i} collapses the spatial extent")));
            }
            shapes.push(cur);
        }
        match layers.last() {
            Some(Layer::Dense { outputs, .. }) if *outputs == classes => {}
            _ => {
                return Err(Error::InvalidNetwork(format!(
                    "network must end in a dense layer with {classes} outputs"
                )))
            }
        }
        let mut taps = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            if matches!(layer, Layer::Conv { .. }) {
                let tap = if matches!(layers.get(i + 1), Some(Layer::Relu)) { i + 1 } else { i };
                taps.push(tap);
            }
        }
        Ok(Self {
            input,
            layers,
            classes,
            shapes,
            taps,
        })
    }

    /// Item shape of the network input (batch = 1).
    pub fn input_shape(&self) -> Shape4 {
        self.input
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn tap_count(&self) -> usize {
        self.taps.len()
    }

    /// Item shape produced by layer `i`.
    pub fn layer_output_shape(&self, i: usize) -> Shape4 {
        self.shapes[i]
    }

    /// Index of the layer whose output is tap `tap` (1-based).
    pub fn tap_layer(&self, tap: usize) -> Result<usize> {
        self.check_tap(tap)?;
        Ok(self.taps[tap - 1])
    }

    /// Item shape of tap `tap`; tap 0 is the input.
    pub fn tap_shape(&self, tap: usize) -> Result<Shape4> {
        if tap == 0 {
            return Ok(self.input);
        }
        Ok(self.shapes[self.tap_layer(tap)?])
    }

    /// Layer range that maps tap `tap` activations to the class scores.
    pub fn layers_after_tap(&self, tap: usize) -> Result<Range<usize>> {
        let start = if tap == 0 { 0 } else { self.tap_layer(tap)? + 1 };
        Ok(start..self.layers.len())
    }

    /// Layer range that maps tap `from` activations to tap `to` activations.
    pub fn layers_between_taps(&self, from: usize, to: usize) -> Result<Range<usize>> {
        if from > to {
            return Err(invalid(format!("tap range {from}..{to} is reversed")));
        }
        let start = if from == 0 { 0 } else { self.tap_layer(from)? + 1 };
        let end = if to == 0 { 0 } else { self.tap_layer(to)? + 1 };
        Ok(start..end)
    }

    fn check_tap(&self, tap: usize) -> Result<()> {
        if tap == 0 || tap > self.taps.len() {
            return Err(invalid(format!("tap {tap} outside 1..={}", self.taps.len())));
        }
        Ok(())
    }

    fn check_batch(&self, x: &Tensor4, item: Shape4, context: &'static str) -> Result<()> {
        if x.shape().with_n(1) != item {
            return Err(Error::ShapeMismatch {
                context,
                expected: format!("items of {item}"),
                found: format!("{}", x.shape()),
            });
        }
        Ok(())
    }

    /// Item shape entering layer `i`.
    pub fn layer_input_shape(&self, i: usize) -> Shape4 {
        if i == 0 {
            self.input
        } else {
            self.shapes[i - 1]
        }
    }
}

/// `input (c,h,w)` -> six conv3x3+ReLU blocks with 2x2 max-pooling after
/// blocks 2, 4 and 6, then flatten and a dense classifier.
pub fn build_six_layer_net(input: (usize, usize, usize), classes: usize, widths: &[usize]) -> Result<NetworkSpec> {
    if widths.len() != 6 {
        return Err(invalid(format!("expected 6 channel widths, got {}", widths.len())));
    }
    if widths.contains(&0) {
        return Err(invalid("channel widths must be positive"));
    }
    let mut layers = Vec::new();
    let mut in_c = input.0;
    let (mut h, mut w) = (input.1, input.2);
    for (i, &width) in widths.iter().enumerate() {
        layers.push(Layer::conv3x3(in_c, width));
        layers.push(Layer::Relu);
        in_c = width;
        if i % 2 == 1 {
            if h < 2 || w < 2 {
                return Err(Error::InvalidNetwork(format!(
                    "spatial extent {h}x{w} collapses below 1x1 at pool after block {}",
                    i + 1
                )));
            }
            layers.push(Layer::MaxPool { window: 2, stride: 2 });
            h /= 2;
            w /= 2;
        }
    }
    layers.push(Layer::Flatten);
    layers.push(Layer::Dense {
        inputs: in_c * h * w,
        outputs: classes,
    });
    NetworkSpec::new(input, layers, classes)
}

/// How a parameter set was produced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Scheme {
    Untrained,
    EndToEnd,
    Cascade(SplitPlan),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub scheme: Scheme,
    pub seed: u64,
}

/// Learned weights of a [`NetworkSpec`], one flat block per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub blocks: Vec<Vec<f64>>,
    pub frozen: Vec<bool>,
    pub provenance: Provenance,
}

impl ModelParams {
    /// Fan-in scaled uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let blocks = spec
            .layers
            .iter()
            .map(|layer| {
                let count = layer.param_count();
                let mut block = vec![0.0; count];
                let bias_len = match *layer {
                    Layer::Conv { out_channels, .. } => out_channels,
                    Layer::Dense { outputs, .. } => outputs,
                    _ => 0,
                };
                if count > 0 {
                    let bound = libm::sqrt(6.0 / layer.fan_in() as f64);
                    for v in &mut block[..count - bias_len] {
                        *v = rng.uniform_in(-bound, bound);
                    }
                }
                block
            })
            .collect();
        Self {
            blocks,
            frozen: vec![false; spec.layers.len()],
            provenance: Provenance {
                scheme: Scheme::Untrained,
                seed,
            },
        }
    }

    /// Checks block count and lengths against `spec`, naming the first offending layer.
    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        if self.blocks.len() != spec.layers.len() || self.frozen.len() != spec.layers.len() {
            return Err(Error::ShapeMismatch {
                context: "model parameters",
                expected: format!("{} layer blocks", spec.layers.len()),
                found: format!("{}", self.blocks.len()),
            });
        }
        for (i, (block, layer)) in self.blocks.iter().zip(&spec.layers).enumerate() {
            if block.len() != layer.param_count() {
                return Err(Error::ShapeMismatch {
                    context: "model parameters",
                    expected: format!("layer {i} ({layer:?}) with {} values", layer.param_count()),
                    found: format!("{} values", block.len()),
                });
            }
        }
        Ok(())
    }

    /// Order-sensitive 64-bit FNV-1a fingerprint over the parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for block in &self.blocks {
            for v in block {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
            h ^= 0xff;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}

/// Runs layers `range` on `x`. Element 0 of the result is `x` itself and
/// element `i + 1` is the output of layer `range.start + i`.
pub fn forward_layers(spec: &NetworkSpec, params: &ModelParams, x: &Tensor4, range: Range<usize>) -> Result<Vec<Tensor4>> {
    if range.end > spec.layers.len() || range.start > range.end {
        return Err(invalid(format!("layer range {range:?} outside 0..{}", spec.layers.len())));
    }
    spec.check_batch(x, spec.layer_input_shape(range.start), "forward")?;
    let mut acts = Vec::with_capacity(range.len() + 1);
    acts.push(x.clone());
    for i in range {
        let next = spec.layers[i].forward(&params.blocks[i], acts.last().expect("non-empty"))?;
        acts.push(next);
    }
    Ok(acts)
}

/// Output of layers `range` applied to `x` without keeping intermediates.
pub fn run_layers(spec: &NetworkSpec, params: &ModelParams, x: &Tensor4, range: Range<usize>) -> Result<Tensor4> {
    if range.end > spec.layers.len() || range.start > range.end {
        return Err(invalid(format!("layer range {range:?} outside 0..{}", spec.layers.len())));
    }
    spec.check_batch(x, spec.layer_input_shape(range.start), "forward")?;
    let mut cur = x.clone();
    for i in range {
        cur = spec.layers[i].forward(&params.blocks[i], &cur)?;
    }
    Ok(cur)
}

/// Backpropagates `grad` (w.r.t. the last activation in `acts`) through
/// layers `range`. Returns the gradient w.r.t. `acts[0]` and, for each layer in
/// the range, its parameter gradient (empty where `want_params` is false).
pub fn backward_layers(
    spec: &NetworkSpec,
    params: &ModelParams,
    acts: &[Tensor4],
    grad: Tensor4,
    range: Range<usize>,
    want_params: bool,
) -> Result<(Tensor4, Vec<Vec<f64>>)> {
    if acts.len() != range.len() + 1 {
        return Err(invalid("activation trace does not match layer range"));
    }
    let mut d_params = vec![Vec::new(); range.len()];
    let mut g = grad;
    for (offset, i) in range.clone().enumerate().rev() {
        let want = want_params && spec.layers[i].param_count() > 0;
        let lg = spec.layers[i].backward(&params.blocks[i], &acts[offset], &g, want)?;
        d_params[offset] = lg.d_params;
        g = lg.d_input;
    }
    Ok((g, d_params))
}

/// Class scores of the full network, shape (n, classes, 1, 1).
pub fn forward(spec: &NetworkSpec, params: &ModelParams, x: &Tensor4) -> Result<Tensor4> {
    run_layers(spec, params, x, 0..spec.layers.len())
}

/// Activations captured at each tap, keyed by tap index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TapActivations(BTreeMap<usize, Tensor4>);

impl TapActivations {
    pub fn get(&self, tap: usize) -> Option<&Tensor4> {
        self.0.get(&tap)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor4)> {
        self.0.iter().map(|(&k, v)| (k, v))
    }

    pub fn into_inner(self) -> BTreeMap<usize, Tensor4> {
        self.0
    }
}

/// Forward pass that records every tap up to `depth`. Class scores are only
/// produced when `depth` equals the tap count.
pub fn forward_with_taps(
    spec: &NetworkSpec,
    params: &ModelParams,
    x: &Tensor4,
    depth: usize,
) -> Result<(Option<Tensor4>, TapActivations)> {
    if depth > spec.tap_count() {
        return Err(invalid(format!("depth {depth} exceeds tap count {}", spec.tap_count())));
    }
    spec.check_batch(x, spec.input, "forward_with_taps")?;
    let full = depth == spec.tap_count();
    let end = if full {
        spec.layers.len()
    } else if depth == 0 {
        0
    } else {
        spec.taps[depth - 1] + 1
    };
    let mut taps = BTreeMap::new();
    let mut cur = x.clone();
    for i in 0..end {
        cur = spec.layers[i].forward(&params.blocks[i], &cur)?;
        if let Some(t) = spec.taps.iter().position(|&l| l == i) {
            taps.insert(t + 1, cur.clone());
        }
    }
    Ok((full.then_some(cur), TapActivations(taps)))
}

/// Gradient of `scores[:, class]` w.r.t. the activations at `tap`
/// (`tap == 0` is the input image). Batch items are independent.
pub fn backward_to_tap(spec: &NetworkSpec, params: &ModelParams, x: &Tensor4, class: usize, tap: usize) -> Result<Tensor4> {
    Ok(tap_and_gradient(spec, params, x, class, tap)?.1)
}

/// Activations at `tap` together with the class-score gradient w.r.t. them.
pub fn tap_and_gradient(
    spec: &NetworkSpec,
    params: &ModelParams,
    x: &Tensor4,
    class: usize,
    tap: usize,
) -> Result<(Tensor4, Tensor4)> {
    if class >= spec.classes {
        return Err(invalid(format!("class {class} outside 0..{}", spec.classes)));
    }
    if tap > spec.tap_count() {
        return Err(invalid(format!("tap {tap} beyond depth {}", spec.tap_count())));
    }
    let prefix = spec.layers_between_taps(0, tap)?;
    let acts_at_tap = run_layers(spec, params, x, prefix)?;
    let rest = spec.layers_after_tap(tap)?;
    let acts = forward_layers(spec, params, &acts_at_tap, rest.clone())?;
    let n = x.shape().n;
    let mut seed = Tensor4::zeros(Shape4::new(n, spec.classes, 1, 1));
    for i in 0..n {
        seed.set(i, class, 0, 0, 1.0);
    }
    let (grad, _) = backward_layers(spec, params, &acts, seed, rest, false)?;
    Ok((acts_at_tap, grad))
}

/// Probe classifier on tap activations: global average pooling then a dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxHead {
    pub tap: usize,
    pub channels: usize,
    pub classes: usize,
    /// Row-major (classes x channels) weights followed by `classes` biases.
    pub params: Vec<f64>,
}

impl AuxHead {
    pub fn new(tap: usize, channels: usize, classes: usize, rng: &mut Rng) -> Self {
        let bound = libm::sqrt(6.0 / channels as f64);
        let mut params = vec![0.0; classes * channels + classes];
        for v in &mut params[..classes * channels] {
            *v = rng.uniform_in(-bound, bound);
        }
        Self {
            tap,
            channels,
            classes,
            params,
        }
    }

    pub fn zeros(tap: usize, channels: usize, classes: usize) -> Self {
        Self {
            tap,
            channels,
            classes,
            params: vec![0.0; classes * channels + classes],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.params[..self.classes * self.channels]
    }

    pub fn bias(&self) -> &[f64] {
        &self.params[self.classes * self.channels..]
    }

    /// Global average pool, shape (n, c, 1, 1).
    pub fn pool(acts: &Tensor4) -> Tensor4 {
        let s = acts.shape();
        let z = s.plane() as f64;
        let mut out = Vec::with_capacity(s.n * s.c);
        for n in 0..s.n {
            for plane in acts.item(n).chunks_exact(s.plane()) {
                out.push(plane.iter().sum::<f64>() / z);
            }
        }
        Tensor4::from_vec(Shape4::new(s.n, s.c, 1, 1), out).expect("pool shape")
    }

    pub fn forward(&self, acts: &Tensor4) -> Result<Tensor4> {
        self.forward_pooled(&Self::pool(acts))
    }

    pub fn forward_pooled(&self, pooled: &Tensor4) -> Result<Tensor4> {
        if pooled.shape().item_len() != self.channels {
            return Err(Error::ShapeMismatch {
                context: "aux head",
                expected: format!("{} channels", self.channels),
                found: format!("{}", pooled.shape()),
            });
        }
        numerics::dense(pooled, self.weights(), self.bias())
    }

    /// Gradient w.r.t. pooled features and head parameters.
    pub fn backward_pooled(&self, pooled: &Tensor4, d_scores: &Tensor4) -> Result<LayerGrad> {
        numerics::dense_backward(pooled, self.weights(), d_scores, true)
    }

    /// Gradient w.r.t. the spatial activations and head parameters.
    pub fn backward(&self, acts: &Tensor4, d_scores: &Tensor4) -> Result<LayerGrad> {
        let pooled = Self::pool(acts);
        let lg = self.backward_pooled(&pooled, d_scores)?;
        let s = acts.shape();
        let z = s.plane() as f64;
        let mut d_input = Tensor4::zeros(s);
        for n in 0..s.n {
            let dp = lg.d_input.item(n);
            for (c, plane) in d_input.item_mut(n).chunks_exact_mut(s.plane()).enumerate() {
                plane.fill(dp[c] / z);
            }
        }
        Ok(LayerGrad {
            d_input,
            d_params: lg.d_params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error};

    fn random_batch(spec: &NetworkSpec, n: usize, seed: u64) -> Tensor4 {
        let mut rng = Rng::new(seed);
        let shape = spec.input_shape().with_n(n);
        Tensor4::from_vec(shape, (0..shape.len()).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn six_layer_shape_chain() {
        let spec = build_six_layer_net((3, 32, 32), 10, &[8, 8, 16, 16, 32, 32]).unwrap();
        assert_eq!(spec.tap_count(), 6);
        let last_pool = spec.layers().len() - 3;
        assert_eq!(spec.layer_output_shape(last_pool), Shape4::new(1, 32, 4, 4));
        assert_eq!(spec.tap_shape(1).unwrap(), Shape4::new(1, 8, 32, 32));
        assert_eq!(spec.tap_shape(3).unwrap(), Shape4::new(1, 16, 16, 16));
        assert_eq!(spec.tap_shape(6).unwrap(), Shape4::new(1, 32, 8, 8));
    }

    #[test]
    fn single_logit_head_and_collapse_guard() {
        let spec = build_six_layer_net((1, 16, 16), 1, &[2; 6]).unwrap();
        assert_eq!(spec.classes(), 1);
        assert!(build_six_layer_net((1, 8, 8), 2, &[2; 6]).is_ok());
        assert!(build_six_layer_net((1, 4, 4), 2, &[2; 6]).is_err());
        assert!(build_six_layer_net((1, 32, 32), 2, &[2; 5]).is_err());
    }

    #[test]
    fn forward_with_taps_depths() {
        let spec = build_six_layer_net((1, 16, 16), 3, &[2, 2, 3, 3, 4, 4]).unwrap();
        let params = ModelParams::init(&spec, 1);
        let x = random_batch(&spec, 2, 5);
        let (scores, taps) = forward_with_taps(&spec, &params, &x, 0).unwrap();
        assert!(scores.is_none() && taps.is_empty());
        let (scores, taps) = forward_with_taps(&spec, &params, &x, 6).unwrap();
        assert_eq!(scores.unwrap().shape(), Shape4::new(2, 3, 1, 1));
        assert_eq!(taps.len(), 6);
        assert!(forward_with_taps(&spec, &params, &x, 7).is_err());
    }

    #[test]
    fn tap_compositionality_is_bitwise() {
        let spec = build_six_layer_net((1, 16, 16), 3, &[2, 2, 3, 3, 4, 4]).unwrap();
        let params = ModelParams::init(&spec, 2);
        let x = random_batch(&spec, 3, 6);
        let (_, taps) = forward_with_taps(&spec, &params, &x, 2).unwrap();
        let direct = run_layers(&spec, &params, &x, 0..4).unwrap();
        assert_eq!(taps.get(2).unwrap(), &direct);
        let (_, deep) = forward_with_taps(&spec, &params, &x, 6).unwrap();
        assert_eq!(deep.get(2).unwrap(), &direct);
    }

    #[test]
    fn backward_to_tap_matches_finite_differences() {
        let spec = build_six_layer_net((1, 8, 8), 3, &[2, 2, 2, 3, 3, 3]).unwrap();
        let params = ModelParams::init(&spec, 3);
        let x = random_batch(&spec, 1, 7);
        for tap in [0, 3, 6] {
            let (acts, grad) = tap_and_gradient(&spec, &params, &x, 1, tap).unwrap();
            let rest = spec.layers_after_tap(tap).unwrap();
            let fd = finite_diff_grad(|a| run_layers(&spec, &params, a, rest.clone()).unwrap().data()[1], &acts, 1e-6).unwrap();
            assert!(max_relative_error(grad.data(), fd.data(), 1e-4) < 1e-5, "tap {tap}");
        }
    }

    #[test]
    fn zero_head_gives_zero_gradient() {
        let spec = build_six_layer_net((1, 8, 8), 2, &[2; 6]).unwrap();
        let mut params = ModelParams::init(&spec, 4);
        let last = params.blocks.len() - 1;
        params.blocks[last].iter_mut().for_each(|v| *v = 0.0);
        let x = random_batch(&spec, 1, 8);
        for tap in 0..=6 {
            let g = backward_to_tap(&spec, &params, &x, 0, tap).unwrap();
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
        assert!(backward_to_tap(&spec, &params, &x, 0, 7).is_err());
        assert!(backward_to_tap(&spec, &params, &x, 2, 1).is_err());
    }

    #[test]
    fn aux_head_backward_matches_finite_differences() {
        let mut rng = Rng::new(9);
        let head = AuxHead::new(1, 3, 4, &mut rng);
        let acts = Tensor4::from_vec(Shape4::new(2, 3, 3, 3), (0..54).map(|_| rng.uniform()).collect()).unwrap();
        let up = Tensor4::from_vec(Shape4::new(2, 4, 1, 1), (0..8).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap();
        let g = head.backward(&acts, &up).unwrap();
        let fd = finite_diff_grad(
            |a| crate::numerics::dot(head.forward(a).unwrap().data(), up.data()),
            &acts,
            1e-6,
        )
        .unwrap();
        assert!(max_relative_error(g.d_input.data(), fd.data(), 1e-4) < 1e-6);
    }

    #[test]
    fn check_against_names_layer() {
        let a = build_six_layer_net((1, 8, 8), 2, &[2; 6]).unwrap();
        let b = build_six_layer_net((1, 8, 8), 2, &[2, 3, 2, 2, 2, 2]).unwrap();
        let p = ModelParams::init(&a, 1);
        let err = p.check_against(&b).unwrap_err();
        assert!(alloc::format!("{err}").contains("layer 2"));
    }

    #[test]
    fn init_is_seeded() {
        let spec = build_six_layer_net((1, 8, 8), 2, &[2; 6]).unwrap();
        assert_eq!(ModelParams::init(&spec, 5), ModelParams::init(&spec, 5));
        assert_ne!(ModelParams::init(&spec, 5).fingerprint(), ModelParams::init(&spec, 6).fingerprint());
    }
}
