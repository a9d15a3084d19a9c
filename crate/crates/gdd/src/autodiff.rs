//! Reverse-mode automatic differentiation over image tensors.
//!
//! Computation is recorded on a tape: every operation appends a [`Node`]
//! holding its forward value and the indices of its parents, so parents
//! always precede children. [`Graph::backward`] seeds the scalar loss node
//! with gradient one and sweeps the tape in reverse, accumulating into each
//! node's gradient buffer and finally into the [`ParamStore`].
//!
//! Parameter gradients accumulate across `backward` calls; node gradients
//! are re-zeroed on every call. A fresh `Graph` is built per optimization
//! step, which keeps the tape free of stale nodes and makes memory use
//! proportional to one forward pass.

use std::collections::HashSet;
use std::sync::Arc;

use crate::error::{GddError, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// A named, optimizable tensor together with its gradient and Adam state.
#[derive(Clone)]
pub struct Parameter {
    pub(crate) name: String,
    pub(crate) value: Tensor,
    pub(crate) grad: Tensor,
    pub(crate) m: Vec<f64>,
    pub(crate) v: Vec<f64>,
    pub(crate) step: u64,
}

/// Owns every parameter of a model. Gradients live here between `backward`
/// and the optimizer step.
#[derive(Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let shape = value.shape();
        let len = value.len();
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad: Tensor::zeros(shape),
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds `grad` into the stored gradient of `id`. `backward` uses this;
    /// it is public so hand-written optimization loops can feed gradients
    /// computed outside the graph.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) {
        let dst = self.params[id.0].grad.data_mut();
        for (d, g) in dst.iter_mut().zip(grad.data()) {
            *d += g;
        }
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }
}

/// A shape-changing linear map with an explicit adjoint. Degradation
/// operators (spatial downsampling, spectral projection, image gradients)
/// implement this once and become differentiable graph ops for free, since
/// the gradient of `y = A x` is exactly `A^T grad_y`.
pub trait LinearOperator: Send + Sync {
    fn output_shape(&self, input: Shape) -> Result<Shape>;
    fn apply(&self, input: &Tensor) -> Tensor;
    fn adjoint(&self, upstream: &Tensor) -> Tensor;
}

enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        out_channels: usize,
        k: usize,
    },
    BilinearUp2x {
        input: NodeId,
    },
    LeakyRelu {
        input: NodeId,
        slope: f64,
    },
    Sigmoid {
        input: NodeId,
    },
    ChannelNorm {
        input: NodeId,
        gain: NodeId,
        shift: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    ScalarMul {
        input: NodeId,
        factor: f64,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    Sum {
        input: NodeId,
    },
    AbsSum {
        input: NodeId,
    },
    SquareSum {
        input: NodeId,
    },
    PerBandScale {
        input: NodeId,
        weights: NodeId,
    },
    Linear {
        input: NodeId,
        op: Arc<dyn LinearOperator>,
    },
}

struct Node {
    value: Tensor,
    grad: Tensor,
    op: Op,
}

/// The tape. Build one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Graph {
            nodes: Vec::with_capacity(nodes),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Node gradient as of the last `backward` call.
    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].grad
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(Node { value, grad, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Introduces a tensor the sweep treats as constant.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { param: None })
    }

    /// Introduces a parameter leaf; `backward` accumulates its gradient into
    /// the store entry.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.value(id).clone(), Op::Leaf { param: Some(id) })
    }

    /// 2D convolution with same-size zero padding, stride 1.
    ///
    /// `weight` packs the kernel bank as `(out_channels * in_channels, k, k)`
    /// with the input-channel index varying fastest; `bias` is
    /// `(out_channels, 1, 1)`.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        self.conv2d_strided(input, weight, bias, 1)
    }

    pub fn conv2d_strided(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
    ) -> Result<NodeId> {
        if !matches!(stride, 1 | 2) {
            return Err(GddError::invalid(format!(
                "conv2d stride must be 1 or 2, got {stride}"
            )));
        }
        let in_shape = self.shape(input);
        let w_shape = self.shape(weight);
        let b_shape = self.shape(bias);
        let k = w_shape.height;
        if !matches!(k, 1 | 3) || w_shape.width != k {
            return Err(GddError::invalid(format!(
                "conv2d kernel must be 1x1 or 3x3, got {}x{}",
                w_shape.height, w_shape.width
            )));
        }
        if in_shape.channels == 0 || w_shape.channels % in_shape.channels != 0 {
            return Err(GddError::shape(
                "conv2d weight bank vs input channels",
                w_shape,
                in_shape,
            ));
        }
        let out_channels = w_shape.channels / in_shape.channels;
        if b_shape != Shape::new(out_channels, 1, 1) {
            return Err(GddError::shape(
                "conv2d bias",
                b_shape,
                Shape::new(out_channels, 1, 1),
            ));
        }
        let value = conv2d_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            out_channels,
            k,
            stride,
        );
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                out_channels,
                k,
            },
        ))
    }

    /// Doubles both spatial dimensions by bilinear interpolation with
    /// half-pixel (align-corners = false) sampling.
    pub fn bilinear_upsample2x(&mut self, input: NodeId) -> NodeId {
        let value = bilinear_up2x_forward(self.value(input));
        self.push(value, Op::BilinearUp2x { input })
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&slope) || slope == 0.0 {
            return Err(GddError::invalid(format!(
                "leaky_relu slope must lie in (0, 1), got {slope}"
            )));
        }
        let value = self
            .value(input)
            .map(|v| if v > 0.0 { v } else { slope * v });
        Ok(self.push(value, Op::LeakyRelu { input, slope }))
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(sigmoid_stable);
        self.push(value, Op::Sigmoid { input })
    }

    /// Per-channel normalization to zero mean and unit variance (population
    /// variance, stabilized by `eps`), followed by a learnable per-channel
    /// affine map: `gain * xhat + shift`.
    pub fn channel_norm(
        &mut self,
        input: NodeId,
        gain: NodeId,
        shift: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let in_shape = self.shape(input);
        if in_shape.plane() < 2 {
            return Err(GddError::invalid(format!(
                "channel_norm needs at least 2 spatial samples per channel, got {}",
                in_shape.plane()
            )));
        }
        let affine = Shape::new(in_shape.channels, 1, 1);
        if self.shape(gain) != affine {
            return Err(GddError::shape("channel_norm gain", self.shape(gain), affine));
        }
        if self.shape(shift) != affine {
            return Err(GddError::shape(
                "channel_norm shift",
                self.shape(shift),
                affine,
            ));
        }
        if !(eps > 0.0) {
            return Err(GddError::invalid(format!(
                "channel_norm eps must be positive, got {eps}"
            )));
        }

        let x = self.value(input);
        let n = in_shape.plane() as f64;
        let mut mean = Vec::with_capacity(in_shape.channels);
        let mut inv_std = Vec::with_capacity(in_shape.channels);
        let mut out = Tensor::zeros(in_shape);
        for c in 0..in_shape.channels {
            let ch = x.channel(c);
            let m = ch.iter().sum::<f64>() / n;
            let var = ch.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            let g = self.value(gain).data()[c];
            let s = self.value(shift).data()[c];
            for (o, &v) in out.channel_mut(c).iter_mut().zip(ch) {
                *o = g * (v - m) * is + s;
            }
            mean.push(m);
            inv_std.push(is);
        }
        Ok(self.push(
            out,
            Op::ChannelNorm {
                input,
                gain,
                shift,
                mean,
                inv_std,
            },
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.elementwise(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.elementwise(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.elementwise(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    fn elementwise(
        &self,
        a: NodeId,
        b: NodeId,
        context: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(GddError::shape(format!("elementwise {context}"), sa, sb));
        }
        let mut out = Tensor::zeros(sa);
        for ((o, &x), &y) in out
            .data_mut()
            .iter_mut()
            .zip(self.value(a).data())
            .zip(self.value(b).data())
        {
            *o = f(x, y);
        }
        Ok(out)
    }

    pub fn scalar_mul(&mut self, input: NodeId, factor: f64) -> NodeId {
        let value = self.value(input).map(|v| factor * v);
        self.push(value, Op::ScalarMul { input, factor })
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if (sa.height, sa.width) != (sb.height, sb.width) {
            return Err(GddError::shape("concat_channels spatial dims", sa, sb));
        }
        let shape = Shape::new(sa.channels + sb.channels, sa.height, sa.width);
        let mut data = Vec::with_capacity(shape.len());
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::from_vec_unchecked(shape, data);
        Ok(self.push(value, Op::ConcatChannels { a, b }))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { input })
    }

    pub fn abs_sum(&mut self, input: NodeId) -> NodeId {
        let s = self.value(input).data().iter().map(|v| v.abs()).sum();
        self.push(Tensor::scalar(s), Op::AbsSum { input })
    }

    pub fn square_sum(&mut self, input: NodeId) -> NodeId {
        let s = self.value(input).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SquareSum { input })
    }

    /// Scales each channel of `input` by one entry of `weights` (shape
    /// `(D, 1, 1)`); channel `c` uses weight `c % D`, so a `D`-band weight
    /// vector applies to any stack of whole `D`-band groups.
    pub fn per_band_scale(&mut self, input: NodeId, weights: NodeId) -> Result<NodeId> {
        let in_shape = self.shape(input);
        let w_shape = self.shape(weights);
        if w_shape.height != 1 || w_shape.width != 1 || w_shape.channels == 0 {
            return Err(GddError::shape(
                "per_band_scale weights",
                w_shape,
                "(D,1,1)",
            ));
        }
        if in_shape.channels % w_shape.channels != 0 {
            return Err(GddError::shape(
                "per_band_scale channel grouping",
                in_shape,
                w_shape,
            ));
        }
        let d = w_shape.channels;
        let mut out = Tensor::zeros(in_shape);
        for c in 0..in_shape.channels {
            let w = self.value(weights).data()[c % d];
            for (o, &v) in out.channel_mut(c).iter_mut().zip(self.value(input).channel(c)) {
                *o = w * v;
            }
        }
        Ok(self.push(out, Op::PerBandScale { input, weights }))
    }

    /// Applies a linear operator with a known adjoint (downsampling,
    /// spectral projection, gradient filters).
    pub fn linear(&mut self, input: NodeId, op: Arc<dyn LinearOperator>) -> Result<NodeId> {
        op.output_shape(self.shape(input))?;
        let value = op.apply(self.value(input));
        Ok(self.push(value, Op::Linear { input, op }))
    }

    /// Reverse sweep from a scalar loss node. Node gradients are reset,
    /// the loss is seeded with 1, and parameter gradients are accumulated
    /// into `store`.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if self.shape(loss) != Shape::new(1, 1, 1) {
            return Err(GddError::shape(
                "backward loss node",
                self.shape(loss),
                Shape::new(1, 1, 1),
            ));
        }
        for node in &mut self.nodes {
            node.grad.data_mut().fill(0.0);
        }
        self.nodes[loss.0].grad.data_mut()[0] = 1.0;

        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            match &node.op {
                Op::Leaf { .. } => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    out_channels,
                    k,
                } => {
                    let (d_input, d_weight, d_bias) = conv2d_backward(
                        &before[input.0].value,
                        &before[weight.0].value,
                        &node.grad,
                        *out_channels,
                        *k,
                        *stride,
                    );
                    accumulate(&mut before[input.0].grad, &d_input);
                    accumulate(&mut before[weight.0].grad, &d_weight);
                    accumulate(&mut before[bias.0].grad, &d_bias);
                }
                Op::BilinearUp2x { input } => {
                    let d_input = bilinear_up2x_backward(
                        &node.grad,
                        before[input.0].value.shape(),
                    );
                    accumulate(&mut before[input.0].grad, &d_input);
                }
                Op::LeakyRelu { input, slope } => {
                    let parent = &mut before[input.0];
                    let slope = *slope;
                    for ((d, &g), &v) in parent
                        .grad
                        .data_mut()
                        .iter_mut()
                        .zip(node.grad.data())
                        .zip(parent.value.data())
                    {
                        *d += g * if v > 0.0 { 1.0 } else { slope };
                    }
                }
                Op::Sigmoid { input } => {
                    let parent = &mut before[input.0];
                    for ((d, &g), &s) in parent
                        .grad
                        .data_mut()
                        .iter_mut()
                        .zip(node.grad.data())
                        .zip(node.value.data())
                    {
                        *d += g * s * (1.0 - s);
                    }
                }
                Op::ChannelNorm {
                    input,
                    gain,
                    shift,
                    mean,
                    inv_std,
                } => {
                    let (d_input, d_gain, d_shift) = channel_norm_backward(
                        &before[input.0].value,
                        &before[gain.0].value,
                        &node.grad,
                        mean,
                        inv_std,
                    );
                    accumulate(&mut before[input.0].grad, &d_input);
                    accumulate(&mut before[gain.0].grad, &d_gain);
                    accumulate(&mut before[shift.0].grad, &d_shift);
                }
                Op::Add { a, b } => {
                    accumulate(&mut before[a.0].grad, &node.grad);
                    accumulate(&mut before[b.0].grad, &node.grad);
                }
                Op::Sub { a, b } => {
                    accumulate(&mut before[a.0].grad, &node.grad);
                    for (d, &g) in before[b.0].grad.data_mut().iter_mut().zip(node.grad.data())
                    {
                        *d -= g;
                    }
                }
                Op::Mul { a, b } => {
                    let d_a: Vec<f64> = node
                        .grad
                        .data()
                        .iter()
                        .zip(before[b.0].value.data())
                        .map(|(&g, &bv)| g * bv)
                        .collect();
                    let d_b: Vec<f64> = node
                        .grad
                        .data()
                        .iter()
                        .zip(before[a.0].value.data())
                        .map(|(&g, &av)| g * av)
                        .collect();
                    for (d, gv) in before[a.0].grad.data_mut().iter_mut().zip(&d_a) {
                        *d += gv;
                    }
                    for (d, gv) in before[b.0].grad.data_mut().iter_mut().zip(&d_b) {
                        *d += gv;
                    }
                }
                Op::ScalarMul { input, factor } => {
                    let factor = *factor;
                    for (d, &g) in before[input.0]
                        .grad
                        .data_mut()
                        .iter_mut()
                        .zip(node.grad.data())
                    {
                        *d += factor * g;
                    }
                }
                Op::ConcatChannels { a, b } => {
                    let split = before[a.0].grad.len();
                    let g = node.grad.data();
                    for (d, &gv) in before[a.0].grad.data_mut().iter_mut().zip(&g[..split]) {
                        *d += gv;
                    }
                    for (d, &gv) in before[b.0].grad.data_mut().iter_mut().zip(&g[split..]) {
                        *d += gv;
                    }
                }
                Op::Sum { input } => {
                    let g = node.grad.data()[0];
                    for d in before[input.0].grad.data_mut() {
                        *d += g;
                    }
                }
                Op::AbsSum { input } => {
                    let g = node.grad.data()[0];
                    let parent = &mut before[input.0];
                    for (d, &v) in parent.grad.data_mut().iter_mut().zip(parent.value.data())
                    {
                        *d += g * sign(v);
                    }
                }
                Op::SquareSum { input } => {
                    let g = node.grad.data()[0];
                    let parent = &mut before[input.0];
                    for (d, &v) in parent.grad.data_mut().iter_mut().zip(parent.value.data())
                    {
                        *d += g * 2.0 * v;
                    }
                }
                Op::PerBandScale { input, weights } => {
                    let d = before[weights.0].value.shape().channels;
                    let channels = node.grad.shape().channels;
                    let mut d_weights = vec![0.0; d];
                    let mut d_input = Tensor::zeros(node.grad.shape());
                    for c in 0..channels {
                        let w = before[weights.0].value.data()[c % d];
                        let g_ch = node.grad.channel(c);
                        let in_ch = before[input.0].value.channel(c);
                        let mut dot = 0.0;
                        for ((di, &g), &iv) in d_input
                            .channel_mut(c)
                            .iter_mut()
                            .zip(g_ch)
                            .zip(in_ch)
                        {
                            *di = w * g;
                            dot += g * iv;
                        }
                        d_weights[c % d] += dot;
                    }
                    accumulate(&mut before[input.0].grad, &d_input);
                    for (dst, dv) in before[weights.0].grad.data_mut().iter_mut().zip(&d_weights)
                    {
                        *dst += dv;
                    }
                }
                Op::Linear { input, op } => {
                    let d_input = op.adjoint(&node.grad);
                    accumulate(&mut before[input.0].grad, &d_input);
                }
            }
        }

        for node in &self.nodes {
            if let Op::Leaf { param: Some(pid) } = node.op {
                store.accumulate_grad(pid, &node.grad);
            }
        }
        Ok(())
    }

    /// Every parameter whose leaf is an ancestor of `from`. Used to audit
    /// that a model's forward pass touches all of its weights.
    pub fn reachable_params(&self, from: NodeId) -> HashSet<ParamId> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![from.0];
        let mut out = HashSet::new();
        while let Some(i) = stack.pop() {
            if seen[i] {
                continue;
            }
            seen[i] = true;
            let mut visit = |id: &NodeId| stack.push(id.0);
            match &self.nodes[i].op {
                Op::Leaf { param } => {
                    if let Some(pid) = param {
                        out.insert(*pid);
                    }
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    ..
                } => {
                    visit(input);
                    visit(weight);
                    visit(bias);
                }
                Op::BilinearUp2x { input }
                | Op::LeakyRelu { input, .. }
                | Op::Sigmoid { input }
                | Op::ScalarMul { input, .. }
                | Op::Sum { input }
                | Op::AbsSum { input }
                | Op::SquareSum { input }
                | Op::Linear { input, .. } => visit(input),
                Op::ChannelNorm {
                    input, gain, shift, ..
                } => {
                    visit(input);
                    visit(gain);
                    visit(shift);
                }
                Op::Add { a, b }
                | Op::Sub { a, b }
                | Op::Mul { a, b }
                | Op::ConcatChannels { a, b } => {
                    visit(a);
                    visit(b);
                }
                Op::PerBandScale { input, weights } => {
                    visit(input);
                    visit(weights);
                }
            }
        }
        out
    }
}

fn accumulate(dst: &mut Tensor, src: &Tensor) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sigmoid_stable(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn conv_out_spatial(h: usize, w: usize, k: usize, stride: usize) -> (usize, usize) {
    let pad = k / 2;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    (oh, ow)
}

fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    out_channels: usize,
    k: usize,
    stride: usize,
) -> Tensor {
    let in_shape = input.shape();
    let (h, w) = (in_shape.height, in_shape.width);
    let in_c = in_shape.channels;
    let pad = k / 2;
    let (oh, ow) = conv_out_spatial(h, w, k, stride);
    let mut out = Tensor::zeros(Shape::new(out_channels, oh, ow));

    if stride == 1 {
        // Shifted-row accumulation: for each kernel tap, the valid output
        // region is a contiguous row span, which keeps the inner loop a
        // straight multiply-add over slices.
        for o in 0..out_channels {
            let b = bias.data()[o];
            out.channel_mut(o).fill(b);
            for c in 0..in_c {
                for ky in 0..k {
                    let dy = ky as isize - pad as isize;
                    for kx in 0..k {
                        let dx = kx as isize - pad as isize;
                        let wv = weight.get(o * in_c + c, ky, kx);
                        if wv == 0.0 {
                            continue;
                        }
                        let y0 = (-dy).max(0) as usize;
                        let y1 = (h as isize - dy.max(0)) as usize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx.max(0)) as usize;
                        let in_ch_range = input.channel(c);
                        let out_ch = out.channel_mut(o);
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let ix0 = (x0 as isize + dx) as usize;
                            let orow = &mut out_ch[y * w + x0..y * w + x1];
                            let irow = &in_ch_range[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
                            for (ov, &iv) in orow.iter_mut().zip(irow) {
                                *ov += wv * iv;
                            }
                        }
                    }
                }
            }
        }
    } else {
        for o in 0..out_channels {
            let b = bias.data()[o];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b;
                    for c in 0..in_c {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += weight.get(o * in_c + c, ky, kx)
                                    * input.get(c, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(o, oy, ox, acc);
                }
            }
        }
    }
    out
}

fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    upstream: &Tensor,
    out_channels: usize,
    k: usize,
    stride: usize,
) -> (Tensor, Tensor, Tensor) {
    let in_shape = input.shape();
    let (h, w) = (in_shape.height, in_shape.width);
    let in_c = in_shape.channels;
    let pad = k / 2;
    let out_shape = upstream.shape();
    let (oh, ow) = (out_shape.height, out_shape.width);

    let mut d_input = Tensor::zeros(in_shape);
    let mut d_weight = Tensor::zeros(weight.shape());
    let mut d_bias = Tensor::zeros(Shape::new(out_channels, 1, 1));

    for o in 0..out_channels {
        d_bias.data_mut()[o] = upstream.channel(o).iter().sum();
    }

    if stride == 1 {
        for o in 0..out_channels {
            let g_ch = upstream.channel(o);
            for c in 0..in_c {
                let in_ch = input.channel(c);
                for ky in 0..k {
                    let dy = ky as isize - pad as isize;
                    for kx in 0..k {
                        let dx = kx as isize - pad as isize;
                        let y0 = (-dy).max(0) as usize;
                        let y1 = (h as isize - dy.max(0)) as usize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx.max(0)) as usize;
                        let wv = weight.get(o * in_c + c, ky, kx);
                        let mut wgrad = 0.0;
                        let d_in_ch = d_input.channel_mut(c);
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let ix0 = (x0 as isize + dx) as usize;
                            let grow = &g_ch[y * w + x0..y * w + x1];
                            let irow = &in_ch[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
                            let drow = &mut d_in_ch[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
                            for ((&g, &iv), dv) in grow.iter().zip(irow).zip(drow.iter_mut()) {
                                wgrad += g * iv;
                                *dv += wv * g;
                            }
                        }
                        let wi = d_weight.index(o * in_c + c, ky, kx);
                        d_weight.data_mut()[wi] += wgrad;
                    }
                }
            }
        }
    } else {
        for o in 0..out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = upstream.get(o, oy, ox);
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..in_c {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let (iy, ix) = (iy as usize, ix as usize);
                                let wi = d_weight.index(o * in_c + c, ky, kx);
                                d_weight.data_mut()[wi] += g * input.get(c, iy, ix);
                                let di = d_input.index(c, iy, ix);
                                d_input.data_mut()[di] += g * weight.get(o * in_c + c, ky, kx);
                            }
                        }
                    }
                }
            }
        }
    }
    (d_input, d_weight, d_bias)
}

struct LerpTap {
    i0: usize,
    i1: usize,
    t: f64,
}

fn up2x_taps(len: usize) -> Vec<LerpTap> {
    (0..2 * len)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let floor = src.floor();
            let t = src - floor;
            let i = floor as isize;
            LerpTap {
                i0: i.clamp(0, len as isize - 1) as usize,
                i1: (i + 1).clamp(0, len as isize - 1) as usize,
                t,
            }
        })
        .collect()
}

fn bilinear_up2x_forward(input: &Tensor) -> Tensor {
    let s = input.shape();
    let ytaps = up2x_taps(s.height);
    let xtaps = up2x_taps(s.width);
    let mut out = Tensor::zeros(Shape::new(s.channels, 2 * s.height, 2 * s.width));
    for c in 0..s.channels {
        let src = input.channel(c);
        let dst = out.channel_mut(c);
        for (oy, yt) in ytaps.iter().enumerate() {
            let r0 = &src[yt.i0 * s.width..(yt.i0 + 1) * s.width];
            let r1 = &src[yt.i1 * s.width..(yt.i1 + 1) * s.width];
            let drow = &mut dst[oy * 2 * s.width..(oy + 1) * 2 * s.width];
            for (ox, xt) in xtaps.iter().enumerate() {
                let top = (1.0 - xt.t) * r0[xt.i0] + xt.t * r0[xt.i1];
                let bot = (1.0 - xt.t) * r1[xt.i0] + xt.t * r1[xt.i1];
                drow[ox] = (1.0 - yt.t) * top + yt.t * bot;
            }
        }
    }
    out
}

fn bilinear_up2x_backward(upstream: &Tensor, in_shape: Shape) -> Tensor {
    let ytaps = up2x_taps(in_shape.height);
    let xtaps = up2x_taps(in_shape.width);
    let mut d_input = Tensor::zeros(in_shape);
    let w = in_shape.width;
    for c in 0..in_shape.channels {
        let g = upstream.channel(c);
        let d = d_input.channel_mut(c);
        for (oy, yt) in ytaps.iter().enumerate() {
            let grow = &g[oy * 2 * w..(oy + 1) * 2 * w];
            for (ox, xt) in xtaps.iter().enumerate() {
                let gv = grow[ox];
                d[yt.i0 * w + xt.i0] += (1.0 - yt.t) * (1.0 - xt.t) * gv;
                d[yt.i0 * w + xt.i1] += (1.0 - yt.t) * xt.t * gv;
                d[yt.i1 * w + xt.i0] += yt.t * (1.0 - xt.t) * gv;
                d[yt.i1 * w + xt.i1] += yt.t * xt.t * gv;
            }
        }
    }
    d_input
}

fn channel_norm_backward(
    input: &Tensor,
    gain: &Tensor,
    upstream: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
) -> (Tensor, Tensor, Tensor) {
    let s = input.shape();
    let n = s.plane() as f64;
    let mut d_input = Tensor::zeros(s);
    let mut d_gain = Tensor::zeros(Shape::new(s.channels, 1, 1));
    let mut d_shift = Tensor::zeros(Shape::new(s.channels, 1, 1));
    for c in 0..s.channels {
        let x = input.channel(c);
        let g = upstream.channel(c);
        let gm = gain.data()[c];
        let (m, is) = (mean[c], inv_std[c]);

        let mut sum_g = 0.0;
        let mut sum_g_xhat = 0.0;
        let mut dot_gain = 0.0;
        for (&gv, &xv) in g.iter().zip(x) {
            let xhat = (xv - m) * is;
            sum_g += gv;
            sum_g_xhat += gv * xhat;
            dot_gain += gv * xhat;
        }
        d_gain.data_mut()[c] = dot_gain;
        d_shift.data_mut()[c] = sum_g;

        // d_xhat = g * gain; fold the mean removal and variance terms in a
        // single pass: d_x = is/N * (N*d_xhat - sum(d_xhat) - xhat*sum(d_xhat*xhat)).
        let sum_dxhat = sum_g * gm;
        let sum_dxhat_xhat = sum_g_xhat * gm;
        for ((dv, &gv), &xv) in d_input.channel_mut(c).iter_mut().zip(g).zip(x) {
            let xhat = (xv - m) * is;
            let dxhat = gv * gm;
            *dv = is / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
        }
    }
    (d_input, d_gain, d_shift)
}
