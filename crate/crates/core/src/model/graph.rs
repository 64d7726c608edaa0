//! Layer graph execution: forward passes, recorded tapes and adjoints.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{self, BatchNormCache, BatchNormState, ConvParams, LinearParams, Mode};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Standard convolution.
    Conv { name: String, conv: ConvParams },
    /// Depthwise stage followed by a 1×1 pointwise stage.
    DsConv {
        name: String,
        depthwise: ConvParams,
        pointwise: ConvParams,
    },
    BatchNorm { name: String, bn: BatchNormState },
    PRelu { name: String, slope: Vec<f32> },
    LeakyRelu(f32),
    Relu6,
    PixelShuffle(usize),
    AdaptiveAvgPool(usize, usize),
    Flatten,
    Linear { name: String, linear: LinearParams },
    Sigmoid,
    /// `out = x + body(x)`.
    Residual { name: String, body: Vec<Layer> },
}

/// What a learnable or persistent tensor is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TensorKind {
    ConvWeight,
    ConvBias,
    NormScale,
    NormShift,
    Slope,
    LinearWeight,
    LinearBias,
    /// Running statistics; persisted but never trained.
    Buffer,
}

impl TensorKind {
    pub fn is_parameter(self) -> bool {
        self != TensorKind::Buffer
    }

    pub fn is_bias(self) -> bool {
        matches!(self, TensorKind::ConvBias | TensorKind::LinearBias)
    }

    pub fn is_conv(self) -> bool {
        matches!(self, TensorKind::ConvWeight | TensorKind::ConvBias)
    }
}

pub struct Entry<'a> {
    pub name: String,
    pub kind: TensorKind,
    pub dims: Vec<usize>,
    pub data: &'a [f32],
}

pub struct EntryMut<'a> {
    pub name: String,
    pub kind: TensorKind,
    pub dims: Vec<usize>,
    pub data: &'a mut [f32],
}

fn dims4(t: &Tensor) -> Vec<usize> {
    let s = t.shape();
    vec![s.n, s.c, s.h, s.w]
}

fn conv_entries<'a>(prefix: String, conv: &'a ConvParams, out: &mut Vec<Entry<'a>>) {
    out.push(Entry {
        name: format!("{prefix}.weight"),
        kind: TensorKind::ConvWeight,
        dims: dims4(&conv.weight),
        data: conv.weight.data(),
    });
    if let Some(b) = &conv.bias {
        out.push(Entry {
            name: format!("{prefix}.bias"),
            kind: TensorKind::ConvBias,
            dims: vec![b.len()],
            data: b,
        });
    }
}

fn conv_entries_mut<'a>(prefix: String, conv: &'a mut ConvParams, out: &mut Vec<EntryMut<'a>>) {
    let dims = dims4(&conv.weight);
    out.push(EntryMut {
        name: format!("{prefix}.weight"),
        kind: TensorKind::ConvWeight,
        dims,
        data: conv.weight.data_mut(),
    });
    if let Some(b) = &mut conv.bias {
        out.push(EntryMut {
            name: format!("{prefix}.bias"),
            kind: TensorKind::ConvBias,
            dims: vec![b.len()],
            data: b,
        });
    }
}

impl Layer {
    pub fn name(&self) -> Option<&str> {
        match self {
            Layer::Conv { name, .. }
            | Layer::DsConv { name, .. }
            | Layer::BatchNorm { name, .. }
            | Layer::PRelu { name, .. }
            | Layer::Linear { name, .. }
            | Layer::Residual { name, .. } => Some(name),
            _ => None,
        }
    }

    pub fn kind_label(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::DsConv { .. } => "dsconv",
            Layer::BatchNorm { .. } => "batchnorm",
            Layer::PRelu { .. } => "prelu",
            Layer::LeakyRelu(_) => "leaky_relu",
            Layer::Relu6 => "relu6",
            Layer::PixelShuffle(_) => "pixel_shuffle",
            Layer::AdaptiveAvgPool(..) => "adaptive_avg_pool",
            Layer::Flatten => "flatten",
            Layer::Linear { .. } => "linear",
            Layer::Sigmoid => "sigmoid",
            Layer::Residual { .. } => "residual",
        }
    }

    pub(crate) fn entries<'a>(&'a self, out: &mut Vec<Entry<'a>>) {
        match self {
            Layer::Conv { name, conv } => conv_entries(name.clone(), conv, out),
            Layer::DsConv {
                name,
                depthwise,
                pointwise,
            } => {
                conv_entries(format!("{name}.dw"), depthwise, out);
                conv_entries(format!("{name}.pw"), pointwise, out);
            }
            Layer::BatchNorm { name, bn } => {
                let c = bn.channels();
                for (suffix, kind, data) in [
                    ("gamma", TensorKind::NormScale, &bn.gamma),
                    ("beta", TensorKind::NormShift, &bn.beta),
                    ("running_mean", TensorKind::Buffer, &bn.running_mean),
                    ("running_var", TensorKind::Buffer, &bn.running_var),
                ] {
                    out.push(Entry {
                        name: format!("{name}.{suffix}"),
                        kind,
                        dims: vec![c],
                        data,
                    });
                }
            }
            Layer::PRelu { name, slope } => out.push(Entry {
                name: format!("{name}.slope"),
                kind: TensorKind::Slope,
                dims: vec![slope.len()],
                data: slope,
            }),
            Layer::Linear { name, linear } => {
                out.push(Entry {
                    name: format!("{name}.weight"),
                    kind: TensorKind::LinearWeight,
                    dims: vec![linear.out_features, linear.in_features],
                    data: &linear.weight,
                });
                if let Some(b) = &linear.bias {
                    out.push(Entry {
                        name: format!("{name}.bias"),
                        kind: TensorKind::LinearBias,
                        dims: vec![b.len()],
                        data: b,
                    });
                }
            }
            Layer::Residual { body, .. } => body.iter().for_each(|l| l.entries(out)),
            _ => {}
        }
    }

    pub(crate) fn entries_mut<'a>(&'a mut self, out: &mut Vec<EntryMut<'a>>) {
        match self {
            Layer::Conv { name, conv } => conv_entries_mut(name.clone(), conv, out),
            Layer::DsConv {
                name,
                depthwise,
                pointwise,
            } => {
                conv_entries_mut(format!("{name}.dw"), depthwise, out);
                conv_entries_mut(format!("{name}.pw"), pointwise, out);
            }
            Layer::BatchNorm { name, bn } => {
                let c = bn.channels();
                let BatchNormState {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    ..
                } = bn;
                for (suffix, kind, data) in [
                    ("gamma", TensorKind::NormScale, gamma),
                    ("beta", TensorKind::NormShift, beta),
                    ("running_mean", TensorKind::Buffer, running_mean),
                    ("running_var", TensorKind::Buffer, running_var),
                ] {
                    out.push(EntryMut {
                        name: format!("{name}.{suffix}"),
                        kind,
                        dims: vec![c],
                        data,
                    });
                }
            }
            Layer::PRelu { name, slope } => out.push(EntryMut {
                name: format!("{name}.slope"),
                kind: TensorKind::Slope,
                dims: vec![slope.len()],
                data: slope,
            }),
            Layer::Linear { name, linear } => {
                out.push(EntryMut {
                    name: format!("{name}.weight"),
                    kind: TensorKind::LinearWeight,
                    dims: vec![linear.out_features, linear.in_features],
                    data: &mut linear.weight,
                });
                if let Some(b) = &mut linear.bias {
                    out.push(EntryMut {
                        name: format!("{name}.bias"),
                        kind: TensorKind::LinearBias,
                        dims: vec![b.len()],
                        data: b,
                    });
                }
            }
            Layer::Residual { body, .. } => body.iter_mut().for_each(|l| l.entries_mut(out)),
            _ => {}
        }
    }

    fn label(&self) -> String {
        self.name().map_or_else(|| self.kind_label().to_string(), str::to_string)
    }
}

/// Per-layer values saved by a recorded forward pass.
#[derive(Debug, Clone)]
pub(crate) enum Ctx {
    Input(Tensor),
    DsConv { input: Tensor, mid: Tensor },
    BatchNorm(Box<BatchNormCache>),
    Shape(Shape),
    Output(Tensor),
    None,
    Residual(Vec<Ctx>),
}

/// Saved forward context for [`super::ModelGraph::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    pub(crate) ctx: Vec<Ctx>,
    pub(crate) input_shape: Shape,
    pub(crate) output_shape: Shape,
}

impl Tape {
    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn output_shape(&self) -> Shape {
        self.output_shape
    }
}

/// Parameter gradients keyed by dotted parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<String, Vec<f32>>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.map.get(name).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Add `grad` into the entry for `name`, creating it if absent.
    pub fn accumulate(&mut self, name: String, grad: Vec<f32>) {
        match self.map.get_mut(&name) {
            Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
            None => {
                self.map.insert(name, grad);
            }
        }
    }

    pub fn merge(&mut self, other: Gradients) {
        for (k, v) in other.map {
            self.accumulate(k, v);
        }
    }

    /// Name of the first gradient holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.map
            .iter()
            .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(k, _)| k.as_str())
    }
}

pub(crate) fn forward_layers(
    layers: &[Layer],
    input: &Tensor,
    mode: Mode,
    mut tape: Option<&mut Vec<Ctx>>,
) -> Result<Tensor> {
    let mut x = input.clone();
    for layer in layers {
        let (y, ctx) = forward_one(layer, x, mode, tape.is_some()).map_err(|e| e.in_layer(&layer.label()))?;
        if let Some(t) = tape.as_deref_mut() {
            t.push(ctx);
        }
        x = y;
    }
    Ok(x)
}

fn forward_one(layer: &Layer, x: Tensor, mode: Mode, record: bool) -> Result<(Tensor, Ctx)> {
    let keep = |t: Tensor| if record { Ctx::Input(t) } else { Ctx::None };
    Ok(match layer {
        Layer::Conv { conv, .. } => (nn::conv2d(&x, conv)?, keep(x)),
        Layer::DsConv {
            depthwise,
            pointwise,
            ..
        } => {
            let mid = nn::depthwise_conv2d(&x, depthwise)?;
            if pointwise.kernel() != 1 || pointwise.stride != 1 || pointwise.padding != 0 {
                return nn::ds_conv2d(&x, depthwise, pointwise).map(|y| (y, Ctx::None));
            }
            let y = nn::conv2d(&mid, pointwise)?;
            let ctx = if record {
                Ctx::DsConv { input: x, mid }
            } else {
                Ctx::None
            };
            (y, ctx)
        }
        Layer::BatchNorm { bn, .. } => {
            let (y, cache) = bn.forward_cached(&x, mode)?;
            let ctx = if record || mode == Mode::Train {
                Ctx::BatchNorm(Box::new(cache))
            } else {
                Ctx::None
            };
            (y, ctx)
        }
        Layer::PRelu { slope, .. } => (nn::prelu(&x, slope)?, keep(x)),
        Layer::LeakyRelu(a) => (nn::leaky_relu(&x, *a), keep(x)),
        Layer::Relu6 => (nn::relu6(&x), keep(x)),
        Layer::PixelShuffle(r) => (nn::pixel_shuffle(&x, *r)?, Ctx::None),
        Layer::AdaptiveAvgPool(h, w) => {
            let s = x.shape();
            (nn::adaptive_avg_pool(&x, *h, *w)?, Ctx::Shape(s))
        }
        Layer::Flatten => {
            let s = x.shape();
            (x.reshape((s.n, s.c * s.plane(), 1, 1))?, Ctx::Shape(s))
        }
        Layer::Linear { linear, .. } => (nn::linear(&x, linear)?, keep(x)),
        Layer::Sigmoid => {
            let y = nn::sigmoid(&x);
            let ctx = if record { Ctx::Output(y.clone()) } else { Ctx::None };
            (y, ctx)
        }
        Layer::Residual { body, .. } => {
            let mut inner = Vec::new();
            let y = forward_layers(body, &x, mode, record.then_some(&mut inner))?;
            (x.add(&y)?, Ctx::Residual(inner))
        }
    })
}

fn missing_ctx() -> Error {
    Error::InvalidArgument("tape does not match the layer it is replayed against".into())
}

pub(crate) fn backward_layers(
    layers: &[Layer],
    ctxs: &[Ctx],
    grad_out: Tensor,
    grads: &mut Option<&mut Gradients>,
) -> Result<Tensor> {
    if layers.len() != ctxs.len() {
        return Err(missing_ctx());
    }
    let mut g = grad_out;
    for (layer, ctx) in layers.iter().zip(ctxs).rev() {
        g = backward_one(layer, ctx, g, grads).map_err(|e| e.in_layer(&layer.label()))?;
    }
    Ok(g)
}

fn push_conv_grads(
    grads: &mut Option<&mut Gradients>,
    prefix: String,
    p: nn::ParamGrads,
) {
    if let Some(acc) = grads.as_deref_mut() {
        if let Some(b) = p.bias {
            acc.accumulate(format!("{prefix}.bias"), b);
        }
        acc.accumulate(format!("{prefix}.weight"), p.weight.into_vec());
    }
}

fn backward_one(
    layer: &Layer,
    ctx: &Ctx,
    g: Tensor,
    grads: &mut Option<&mut Gradients>,
) -> Result<Tensor> {
    Ok(match (layer, ctx) {
        (Layer::Conv { name, conv }, Ctx::Input(x)) => {
            let r = nn::conv2d_backward(x, conv, &g)?;
            push_conv_grads(grads, name.clone(), r.params);
            r.input
        }
        (
            Layer::DsConv {
                name,
                depthwise,
                pointwise,
            },
            Ctx::DsConv { input, mid },
        ) => {
            let r = nn::ds_conv2d_backward(input, mid, depthwise, pointwise, &g)?;
            push_conv_grads(grads, format!("{name}.dw"), r.depthwise);
            push_conv_grads(grads, format!("{name}.pw"), r.pointwise);
            r.input
        }
        (Layer::BatchNorm { name, bn }, Ctx::BatchNorm(cache)) => {
            let r = bn.backward(cache, &g)?;
            if let Some(acc) = grads.as_deref_mut() {
                acc.accumulate(format!("{name}.gamma"), r.gamma);
                acc.accumulate(format!("{name}.beta"), r.beta);
            }
            r.input
        }
        (Layer::PRelu { name, slope }, Ctx::Input(x)) => {
            let (dx, ds) = nn::prelu_backward(x, slope, &g)?;
            if let Some(acc) = grads.as_deref_mut() {
                acc.accumulate(format!("{name}.slope"), ds);
            }
            dx
        }
        (Layer::LeakyRelu(a), Ctx::Input(x)) => nn::leaky_relu_backward(x, *a, &g)?,
        (Layer::Relu6, Ctx::Input(x)) => nn::relu6_backward(x, &g)?,
        (Layer::PixelShuffle(r), _) => nn::pixel_shuffle_backward(&g, *r)?,
        (Layer::AdaptiveAvgPool(..), Ctx::Shape(s)) => nn::adaptive_avg_pool_backward(*s, &g)?,
        (Layer::Flatten, Ctx::Shape(s)) => g.reshape(*s)?,
        (Layer::Linear { name, linear }, Ctx::Input(x)) => {
            let r = nn::linear_backward(x, linear, &g)?;
            if let Some(acc) = grads.as_deref_mut() {
                if let Some(b) = r.bias {
                    acc.accumulate(format!("{name}.bias"), b);
                }
                acc.accumulate(format!("{name}.weight"), r.weight);
            }
            r.input
        }
        (Layer::Sigmoid, Ctx::Output(y)) => nn::sigmoid_backward(y, &g)?,
        (Layer::Residual { body, .. }, Ctx::Residual(inner)) => {
            let through = backward_layers(body, inner, g.clone(), grads)?;
            g.add(&through)?
        }
        _ => return Err(missing_ctx()),
    })
}

/// Apply train-mode batch statistics from a tape to the running averages.
pub(crate) fn commit_layers(layers: &mut [Layer], ctxs: &[Ctx]) {
    for (layer, ctx) in layers.iter_mut().zip(ctxs) {
        match (layer, ctx) {
            (Layer::BatchNorm { bn, .. }, Ctx::BatchNorm(cache)) => bn.update_running(cache),
            (Layer::Residual { body, .. }, Ctx::Residual(inner)) => commit_layers(body, inner),
            _ => {}
        }
    }
}

/// Output shape and multiply-accumulate count of a layer list.
pub(crate) fn trace_layers(layers: &[Layer], input: Shape, macs: &mut u64) -> Result<Shape> {
    let mut s = input;
    for layer in layers {
        s = trace_one(layer, s, macs).map_err(|e| e.in_layer(&layer.label()))?;
    }
    Ok(s)
}

fn conv_trace(conv: &ConvParams, s: Shape, depthwise: bool) -> Result<(Shape, u64)> {
    let expected = if depthwise { conv.out_channels() } else { conv.in_channels() };
    if s.c != expected {
        return Err(Error::InvalidArgument(format!(
            "input has {} channels, layer expects {expected}",
            s.c
        )));
    }
    let (h, w) = conv.output_size(s.h, s.w)?;
    let out = Shape::new(s.n, conv.out_channels(), h, w);
    let k2 = (conv.kernel() * conv.kernel()) as u64;
    let per_out = if depthwise { k2 } else { k2 * conv.in_channels() as u64 };
    Ok((out, out.numel() as u64 * per_out))
}

fn trace_one(layer: &Layer, s: Shape, macs: &mut u64) -> Result<Shape> {
    Ok(match layer {
        Layer::Conv { conv, .. } => {
            let (o, m) = conv_trace(conv, s, false)?;
            *macs += m;
            o
        }
        Layer::DsConv {
            depthwise,
            pointwise,
            ..
        } => {
            let (mid, m1) = conv_trace(depthwise, s, true)?;
            let (o, m2) = conv_trace(pointwise, mid, false)?;
            *macs += m1 + m2;
            o
        }
        Layer::BatchNorm { bn, .. } => {
            if bn.channels() != s.c {
                return Err(Error::InvalidArgument(format!(
                    "batch norm has {} channels, input has {}",
                    bn.channels(),
                    s.c
                )));
            }
            s
        }
        Layer::PRelu { slope, .. } => {
            if slope.len() != s.c {
                return Err(Error::InvalidArgument("prelu channel mismatch".into()));
            }
            s
        }
        Layer::LeakyRelu(_) | Layer::Relu6 | Layer::Sigmoid => s,
        Layer::PixelShuffle(r) => {
            if !s.c.is_multiple_of(r * r) {
                return Err(Error::InvalidArgument("pixel shuffle channel mismatch".into()));
            }
            Shape::new(s.n, s.c / (r * r), s.h * r, s.w * r)
        }
        Layer::AdaptiveAvgPool(h, w) => Shape::new(s.n, s.c, *h, *w),
        Layer::Flatten => Shape::new(s.n, s.c * s.plane(), 1, 1),
        Layer::Linear { linear, .. } => {
            if s.c * s.plane() != linear.in_features {
                return Err(Error::InvalidArgument("linear feature mismatch".into()));
            }
            *macs += (s.n * linear.in_features * linear.out_features) as u64;
            Shape::new(s.n, linear.out_features, 1, 1)
        }
        Layer::Residual { body, .. } => {
            let o = trace_layers(body, s, macs)?;
            if o != s {
                return Err(Error::ShapeMismatch { left: s, right: o });
            }
            s
        }
    })
}
