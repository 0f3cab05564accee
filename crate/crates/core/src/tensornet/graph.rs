use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ops::{self, window_output, ConvParams};
use super::tensor::{Scalar, Tensor};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    Relu,
    Flatten,
    Linear {
        out_features: usize,
    },
    /// Joins `parts` branch vectors. Only meaningful where several branches
    /// meet, so a [`Sequential`] rejects it.
    Concat {
        parts: usize,
    },
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize, stride: usize, padding: usize, groups: usize) -> Self {
        LayerSpec::Conv { out_channels, kernel, stride, padding, groups }
    }

    pub fn pool(window: usize, stride: usize) -> Self {
        LayerSpec::MaxPool { window, stride }
    }

    pub fn linear(out_features: usize) -> Self {
        LayerSpec::Linear { out_features }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Linear { .. })
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. })
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv { out_channels, kernel, stride, padding, groups } => {
                let &[c, h, w] = input else {
                    return Err(Error::Config(format!("conv needs a [C,H,W] input, got {input:?}")));
                };
                if stride == 0 || groups == 0 || c % groups != 0 || out_channels % groups != 0 {
                    return Err(Error::Config(format!(
                        "conv {c}->{out_channels} with stride {stride} and {groups} groups is inconsistent"
                    )));
                }
                match (window_output(h, kernel, stride, padding), window_output(w, kernel, stride, padding)) {
                    (Some(ho), Some(wo)) => Ok(vec![out_channels, ho, wo]),
                    _ => Err(Error::Config(format!("kernel {kernel} does not fit {h}x{w}"))),
                }
            }
            LayerSpec::MaxPool { window, stride } => {
                let &[c, h, w] = input else {
                    return Err(Error::Config(format!("pool needs a [C,H,W] input, got {input:?}")));
                };
                match (window_output(h, window, stride, 0), window_output(w, window, stride, 0)) {
                    (Some(ho), Some(wo)) => Ok(vec![c, ho, wo]),
                    _ => Err(Error::Config(format!("pool window {window} stride {stride} does not fit {h}x{w}"))),
                }
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Linear { out_features } => {
                if input.len() != 1 || out_features == 0 {
                    return Err(Error::Config(format!("linear needs a flat input, got {input:?}")));
                }
                Ok(vec![out_features])
            }
            LayerSpec::Concat { parts } => match input {
                &[n] => Ok(vec![n * parts]),
                _ => Err(Error::Config(format!("concat needs flat inputs, got {input:?}"))),
            },
        }
    }

    /// Weight shape and bias length for a parameterized layer.
    pub fn param_shape(&self, input: &[usize]) -> Option<(Vec<usize>, usize)> {
        match *self {
            LayerSpec::Conv { out_channels, kernel, groups, .. } => {
                Some((vec![out_channels, input[0] / groups, kernel, kernel], out_channels))
            }
            LayerSpec::Linear { out_features } => Some((vec![out_features, input[0]], out_features)),
            _ => None,
        }
    }
}

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Independent Gaussian weights, zero biases.
    Gaussian { mean: f64, std: f64 },
    /// Zero-mean Gaussian with variance `2 / fan_in`, zero biases.
    FanIn,
}

impl Init {
    pub const TRAINING_DEFAULT: Init = Init::Gaussian { mean: 0.0, std: 0.01 };
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn zeros(weight_shape: &[usize], bias_len: usize) -> Self {
        Self { weight: Tensor::zeros(weight_shape), bias: Tensor::zeros(&[bias_len]) }
    }

    pub fn count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn init<R: Rng + ?Sized>(&mut self, init: Init, rng: &mut R) {
        let fan_in: usize = self.weight.shape()[1..].iter().product();
        let (mean, std) = match init {
            Init::Gaussian { mean, std } => (mean, std),
            Init::FanIn => (0.0, (2.0 / fan_in as f64).sqrt()),
        };
        let normal = Normal::new(mean, std).expect("finite, non-negative std");
        for w in self.weight.data_mut() {
            *w = T::of(normal.sample(rng));
        }
        self.bias.fill(T::zero());
    }
}

/// Per-layer parameter slots; `None` for parameter-free layers. Used for
/// weights, gradients and optimizer state alike.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T>(pub Vec<Option<LayerParams<T>>>);

impl<T: Scalar> ParamSet<T> {
    pub fn zeros_like(other: &Self) -> Self {
        ParamSet(
            other.0.iter().map(|p| p.as_ref().map(|p| LayerParams::zeros(p.weight.shape(), p.bias.len()))).collect(),
        )
    }

    pub fn layer(&self, idx: usize) -> Option<&LayerParams<T>> {
        self.0.get(idx).and_then(Option::as_ref)
    }

    pub fn layer_mut(&mut self, idx: usize) -> Option<&mut LayerParams<T>> {
        self.0.get_mut(idx).and_then(Option::as_mut)
    }

    /// Weight and bias tensors in layer order.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.0.iter().flatten().flat_map(|p| [&p.weight, &p.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.0.iter_mut().flatten().flat_map(|p| [&mut p.weight, &mut p.bias])
    }

    pub fn count(&self) -> usize {
        self.0.iter().flatten().map(LayerParams::count).sum()
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.0.len() != other.0.len() {
            return Err(invalid!("parameter sets have {} and {} layers", self.0.len(), other.0.len()));
        }
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        self.tensors_mut().for_each(|t| t.scale(factor));
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet(
            self.0
                .iter()
                .map(|p| p.as_ref().map(|p| LayerParams { weight: p.weight.cast(), bias: p.bias.cast() }))
                .collect(),
        )
    }
}

/// Values saved by a forward pass for the matching backward pass.
#[derive(Clone, Debug, Default)]
pub struct SeqTrace<T> {
    inputs: Vec<Tensor<T>>,
    argmax: Vec<Option<Vec<u32>>>,
}

impl<T> SeqTrace<T> {
    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// A chain of layers with its own parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential<T> {
    input_shape: Vec<usize>,
    specs: Vec<LayerSpec>,
    shapes: Vec<Vec<usize>>,
    params: ParamSet<T>,
}

/// Output shape after every layer of a chain.
pub fn infer_shapes(input_shape: &[usize], specs: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    let mut cur = input_shape.to_vec();
    let mut shapes = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        cur = spec.output_shape(&cur).map_err(|e| Error::Config(format!("layer {i} ({spec:?}): {e}")))?;
        shapes.push(cur.clone());
    }
    Ok(shapes)
}

/// Weight and bias counts per parameterized layer, without allocating.
pub fn count_params(input_shape: &[usize], specs: &[LayerSpec]) -> Result<Vec<(usize, usize, usize)>> {
    let shapes = infer_shapes(input_shape, specs)?;
    let mut out = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        let inp = if i == 0 { input_shape } else { &shapes[i - 1] };
        if let Some((w, b)) = spec.param_shape(inp) {
            out.push((i, w.iter().product(), b));
        }
    }
    Ok(out)
}

impl<T: Scalar> Sequential<T> {
    /// Resolve shapes and allocate zeroed parameters.
    pub fn new(input_shape: &[usize], specs: Vec<LayerSpec>) -> Result<Self> {
        if let Some(i) = specs.iter().position(|s| matches!(s, LayerSpec::Concat { .. })) {
            return Err(Error::Config(format!(
                "layer {i}: concat joins branch outputs and cannot appear inside a single chain"
            )));
        }
        let shapes = infer_shapes(input_shape, &specs)?;
        let params = specs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let inp = if i == 0 { input_shape } else { &shapes[i - 1][..] };
                spec.param_shape(inp).map(|(w, b)| LayerParams::zeros(&w, b))
            })
            .collect();
        Ok(Self { input_shape: input_shape.to_vec(), specs, shapes, params: ParamSet(params) })
    }

    pub fn init<R: Rng + ?Sized>(&mut self, init: Init, rng: &mut R) {
        for p in self.params.0.iter_mut().flatten() {
            p.init(init, rng);
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().map_or(&self.input_shape, |s| s)
    }

    pub fn layer_output_shape(&self, idx: usize) -> Option<&[usize]> {
        self.shapes.get(idx).map(Vec::as_slice)
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamSet<T>) -> Result<()> {
        let same_layout = params.0.len() == self.params.0.len()
            && params.tensors().zip(self.params.tensors()).all(|(a, b)| a.shape() == b.shape())
            && params.tensors().count() == self.params.tensors().count();
        if !same_layout {
            return Err(invalid!("parameter layout does not match the network"));
        }
        self.params = params;
        Ok(())
    }

    pub fn zero_grads(&self) -> ParamSet<T> {
        ParamSet::zeros_like(&self.params)
    }

    pub fn cast<U: Scalar>(&self) -> Sequential<U> {
        Sequential {
            input_shape: self.input_shape.clone(),
            specs: self.specs.clone(),
            shapes: self.shapes.clone(),
            params: self.params.cast(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(invalid!("input shape {:?}, network expects {:?}", x.shape(), self.input_shape));
        }
        Ok(())
    }

    fn apply(&self, idx: usize, x: &Tensor<T>) -> Result<(Tensor<T>, Option<Vec<u32>>)> {
        let p = self.params.layer(idx);
        Ok(match self.specs[idx] {
            LayerSpec::Conv { stride, padding, groups, .. } => {
                let p = p.expect("conv layer has parameters");
                (ops::conv2d(x, &p.weight, &p.bias, ConvParams { stride, padding, groups })?, None)
            }
            LayerSpec::MaxPool { window, stride } => {
                let (y, arg) = ops::maxpool(x, window, stride)?;
                (y, Some(arg))
            }
            LayerSpec::Relu => (ops::relu(x), None),
            LayerSpec::Flatten => (ops::flatten(x), None),
            LayerSpec::Linear { .. } => {
                let p = p.expect("linear layer has parameters");
                (ops::linear(x, &p.weight, &p.bias)?, None)
            }
            LayerSpec::Concat { .. } => unreachable!("rejected at construction"),
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_to(x, self.specs.len())
    }

    /// Output after the first `layers` layers.
    pub fn forward_to(&self, x: &Tensor<T>, layers: usize) -> Result<Tensor<T>> {
        self.check_input(x)?;
        if layers > self.specs.len() {
            return Err(invalid!("network has {} layers, asked for {layers}", self.specs.len()));
        }
        let mut cur = x.clone();
        for i in 0..layers {
            cur = self.apply(i, &cur)?.0;
        }
        Ok(cur)
    }

    pub fn forward_traced(&self, x: &Tensor<T>) -> Result<(Tensor<T>, SeqTrace<T>)> {
        self.check_input(x)?;
        let mut trace =
            SeqTrace { inputs: Vec::with_capacity(self.specs.len()), argmax: Vec::with_capacity(self.specs.len()) };
        let mut cur = x.clone();
        for i in 0..self.specs.len() {
            let (y, arg) = self.apply(i, &cur)?;
            trace.inputs.push(cur);
            trace.argmax.push(arg);
            cur = y;
        }
        Ok((cur, trace))
    }

    /// Accumulate parameter gradients into `grads` (summing, never
    /// overwriting) and return the gradient with respect to the input when
    /// asked for.
    pub fn backward(
        &self,
        trace: &SeqTrace<T>,
        dout: &Tensor<T>,
        grads: &mut ParamSet<T>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        if trace.inputs.len() != self.specs.len() {
            return Err(Error::State("backward called without a matching forward pass".into()));
        }
        if dout.shape() != self.output_shape() {
            return Err(invalid!("upstream gradient {:?}, network output {:?}", dout.shape(), self.output_shape()));
        }
        let mut grad = dout.clone();
        for i in (0..self.specs.len()).rev() {
            let x = &trace.inputs[i];
            let want_dx = need_input_grad || i > 0;
            grad = match self.specs[i] {
                LayerSpec::Conv { stride, padding, groups, .. } => {
                    let p = self.params.layer(i).expect("conv layer has parameters");
                    let g = ops::conv2d_backward(x, &p.weight, &grad, ConvParams { stride, padding, groups }, want_dx)?;
                    let acc = grads.layer_mut(i).ok_or_else(|| invalid!("gradient store lacks layer {i}"))?;
                    acc.weight.add_assign(&g.weight)?;
                    acc.bias.add_assign(&g.bias)?;
                    match g.input {
                        Some(dx) => dx,
                        None => return Ok(None),
                    }
                }
                LayerSpec::Linear { .. } => {
                    let p = self.params.layer(i).expect("linear layer has parameters");
                    let g = ops::linear_backward(x, &p.weight, &grad)?;
                    let acc = grads.layer_mut(i).ok_or_else(|| invalid!("gradient store lacks layer {i}"))?;
                    acc.weight.add_assign(&g.weight)?;
                    acc.bias.add_assign(&g.bias)?;
                    g.input
                }
                LayerSpec::MaxPool { .. } => {
                    let arg = trace.argmax[i].as_ref().expect("pool records argmax");
                    ops::maxpool_backward(x.shape(), arg, &grad)?
                }
                LayerSpec::Relu => ops::relu_backward(x, &grad)?,
                LayerSpec::Flatten => grad.reshape(x.shape())?,
                LayerSpec::Concat { .. } => unreachable!("rejected at construction"),
            };
        }
        Ok(need_input_grad.then_some(grad))
    }
}
