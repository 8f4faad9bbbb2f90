//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of a forward pass (define-by-run) and
//! replays the records in reverse to accumulate gradients. Tapes are cheap
//! and rebuilt for every forward pass; parameters live outside the tape and
//! are bound as leaves per pass.
//!
//! 5-D tensors use `[batch, channel, z, y, x]` layout with `x` fastest.

mod gradcheck;
mod kernels;

pub use gradcheck::check_gradients;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("tensor shape {shape:?} implies {expected} elements, got {got}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("tensor shape {shape:?} contains a zero extent")]
    ZeroExtent { shape: Vec<usize> },
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a 5-d [b, c, z, y, x] tensor, got shape {shape:?}")]
    NotFiveDim { op: &'static str, shape: Vec<usize> },
    #[error(
        "conv3d: input {input:?} carries {input_channels} channels but weight {weight:?} expects {weight_channels}"
    )]
    ChannelMismatch {
        input: Vec<usize>,
        input_channels: usize,
        weight: Vec<usize>,
        weight_channels: usize,
    },
    #[error("conv3d: weight must be [c_out, c_in, 3, 3, 3], got {shape:?}")]
    BadKernel { shape: Vec<usize> },
    #[error("conv3d: bias must be [{expected}], got {shape:?}")]
    BadBias { expected: usize, shape: Vec<usize> },
    #[error("maxpool3d: spatial extents must be even, got {shape:?}")]
    OddExtent { shape: Vec<usize> },
    #[error("boxfilter3d: window {window} exceeds spatial extents of {shape:?}")]
    WindowTooLarge { window: usize, shape: Vec<usize> },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

/// Dense N-d array of f32 with optional gradient storage.
///
/// The shape is fixed at construction; operations that change shape produce
/// new tensors.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ZeroExtent { shape });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                expected,
                got: data.len(),
                shape,
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).expect("zeros: valid shape")
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n]).expect("full: valid shape")
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::new(vec![1], vec![value]).expect("scalar")
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Extents of a 5-d tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Dim5 {
    pub b: usize,
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dim5 {
    pub fn spatial(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn numel(&self) -> usize {
        self.b * self.c * self.spatial()
    }
}

fn dim5(shape: &[usize]) -> Option<Dim5> {
    match shape {
        [b, c, d, h, w] => Some(Dim5 {
            b: *b,
            c: *c,
            d: *d,
            h: *h,
            w: *w,
        }),
        _ => None,
    }
}

fn require_dim5(op: &'static str, shape: &[usize]) -> Result<Dim5, TensorError> {
    dim5(shape).ok_or_else(|| TensorError::NotFiveDim {
        op,
        shape: shape.to_vec(),
    })
}

/// Backward rule recorded alongside each operation.
#[derive(Clone, Debug)]
enum Rule {
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    AddScalar { a: TensorId },
    MulScalar { a: TensorId, c: f32 },
    Relu { a: TensorId },
    Abs { a: TensorId },
    Sum { a: TensorId },
    Mean { a: TensorId },
    ChannelMean { a: TensorId },
    ChannelStd { a: TensorId, means: Vec<f32> },
    AddChannel { a: TensorId, m: TensorId },
    SubChannel { a: TensorId, m: TensorId },
    MulChannel { a: TensorId, s: TensorId },
    DivChannel { a: TensorId, s: TensorId },
    Conv3d { input: TensorId, weight: TensorId, bias: TensorId },
    MaxPool3d { input: TensorId, argmax: Vec<u32> },
    Upsample { input: TensorId },
    BoxFilter { input: TensorId, window: usize },
}

struct Recorded {
    out: TensorId,
    rule: Rule,
}

/// Define-by-run operation tape.
///
/// Operations are recorded in the order they execute, so the list is
/// topologically ordered by construction; `backward` walks it exactly once
/// in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
    ops: Vec<Recorded>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Registers `tensor` as a leaf (no backward rule).
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(tensor);
        id
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        self.nodes[id.0].data()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].shape()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id.0].grad()
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> f32 {
        debug_assert_eq!(self.nodes[id.0].numel(), 1);
        self.nodes[id.0].data()[0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, rule: Rule) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        });
        self.ops.push(Recorded { out: id, rule });
        id
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn check_same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape("add", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Rule::Add { a, b }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape("sub", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x - y);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Rule::Sub { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape("mul", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Rule::Mul { a, b }))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape("div", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x / y);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Rule::Div { a, b }))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f32) -> TensorId {
        let data = self.data(a).iter().map(|x| x + c).collect();
        let rg = self.needs_grad(&[a]);
        self.push(self.shape(a).to_vec(), data, rg, Rule::AddScalar { a })
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: f32) -> TensorId {
        let data = self.data(a).iter().map(|x| x * c).collect();
        let rg = self.needs_grad(&[a]);
        self.push(self.shape(a).to_vec(), data, rg, Rule::MulScalar { a, c })
    }

    /// Elementwise max(0, v). Subgradient at 0 is 0.
    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let rg = self.needs_grad(&[a]);
        self.push(self.shape(a).to_vec(), data, rg, Rule::Relu { a })
    }

    /// Elementwise |v|. Subgradient at 0 is 0.
    pub fn abs(&mut self, a: TensorId) -> TensorId {
        let data = self.data(a).iter().map(|x| x.abs()).collect();
        let rg = self.needs_grad(&[a]);
        self.push(self.shape(a).to_vec(), data, rg, Rule::Abs { a })
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let total: f64 = self.data(a).iter().map(|&x| x as f64).sum();
        let rg = self.needs_grad(&[a]);
        self.push(vec![1], vec![total as f32], rg, Rule::Sum { a })
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.data(a).len();
        let total: f64 = self.data(a).iter().map(|&x| x as f64).sum();
        let rg = self.needs_grad(&[a]);
        self.push(vec![1], vec![(total / n as f64) as f32], rg, Rule::Mean { a })
    }

    // ── per-channel statistics and broadcasts ───────────────────────────

    /// Mean over the spatial extent of each (batch, channel) slice → `[b, c]`.
    pub fn channel_mean(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let d = require_dim5("channel_mean", self.shape(a))?;
        let data = kernels::channel_mean(self.data(a), d);
        let rg = self.needs_grad(&[a]);
        Ok(self.push(vec![d.b, d.c], data, rg, Rule::ChannelMean { a }))
    }

    /// Population standard deviation `sqrt(var + epsilon)` per (batch, channel) → `[b, c]`.
    pub fn channel_std(&mut self, a: TensorId, epsilon: f32) -> Result<TensorId, TensorError> {
        let d = require_dim5("channel_std", self.shape(a))?;
        let (means, stds) = kernels::channel_mean_std(self.data(a), d, epsilon);
        let rg = self.needs_grad(&[a]);
        Ok(self.push(vec![d.b, d.c], stds, rg, Rule::ChannelStd { a, means }))
    }

    /// Per-(batch, channel) mean and standard deviation of a 5-d tensor.
    pub fn channel_stats(
        &mut self,
        a: TensorId,
        epsilon: f32,
    ) -> Result<(TensorId, TensorId), TensorError> {
        let mean = self.channel_mean(a)?;
        let std = self.channel_std(a, epsilon)?;
        Ok((mean, std))
    }

    fn check_channel_operand(
        &self,
        op: &'static str,
        a: TensorId,
        m: TensorId,
    ) -> Result<Dim5, TensorError> {
        let d = require_dim5(op, self.shape(a))?;
        if self.shape(m) != [d.b, d.c] {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(m).to_vec(),
            });
        }
        Ok(d)
    }

    /// `out[b,c,·] = a[b,c,·] + m[b,c]`.
    pub fn add_channel(&mut self, a: TensorId, m: TensorId) -> Result<TensorId, TensorError> {
        let d = self.check_channel_operand("add_channel", a, m)?;
        let data = kernels::channel_broadcast(self.data(a), self.data(m), d, |x, v| x + v);
        let rg = self.needs_grad(&[a, m]);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Rule::AddChannel { a, m }))
    }

    /// `out[b,c,·] = a[b,c,·] - m[b,c]`.
    pub fn sub_channel(&mut self, a: TensorId, m: TensorId) -> Result<TensorId, TensorError> {
        let d = self.check_channel_operand("sub_channel", a, m)?;
        let data = kernels::channel_broadcast(self.data(a), self.data(m), d, |x, v| x - v);
        let rg = self.needs_grad(&[a, m]);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Rule::SubChannel { a, m }))
    }

    /// `out[b,c,·] = a[b,c,·] * s[b,c]`.
    pub fn mul_channel(&mut self, a: TensorId, s: TensorId) -> Result<TensorId, TensorError> {
        let d = self.check_channel_operand("mul_channel", a, s)?;
        let data = kernels::channel_broadcast(self.data(a), self.data(s), d, |x, v| x * v);
        let rg = self.needs_grad(&[a, s]);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Rule::MulChannel { a, s }))
    }

    /// `out[b,c,·] = a[b,c,·] / s[b,c]`.
    pub fn div_channel(&mut self, a: TensorId, s: TensorId) -> Result<TensorId, TensorError> {
        let d = self.check_channel_operand("div_channel", a, s)?;
        let data = kernels::channel_broadcast(self.data(a), self.data(s), d, |x, v| x / v);
        let rg = self.needs_grad(&[a, s]);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Rule::DivChannel { a, s }))
    }

    // ── neural-network primitives ───────────────────────────────────────

    /// 3-d convolution, kernel 3³, stride 1, zero padding 1. Output spatial
    /// size equals input spatial size.
    pub fn conv3d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, TensorError> {
        let d = require_dim5("conv3d", self.shape(input))?;
        let wshape = self.shape(weight).to_vec();
        let (c_out, c_in) = match wshape.as_slice() {
            [co, ci, 3, 3, 3] => (*co, *ci),
            _ => return Err(TensorError::BadKernel { shape: wshape }),
        };
        if c_in != d.c {
            return Err(TensorError::ChannelMismatch {
                input: self.shape(input).to_vec(),
                input_channels: d.c,
                weight: wshape,
                weight_channels: c_in,
            });
        }
        if self.shape(bias) != [c_out] {
            return Err(TensorError::BadBias {
                expected: c_out,
                shape: self.shape(bias).to_vec(),
            });
        }
        let data = kernels::conv3d_forward(self.data(input), d, self.data(weight), self.data(bias), c_out);
        let rg = self.needs_grad(&[input, weight, bias]);
        Ok(self.push(
            vec![d.b, c_out, d.d, d.h, d.w],
            data,
            rg,
            Rule::Conv3d { input, weight, bias },
        ))
    }

    /// 2×2×2 max pooling with stride 2. Requires even spatial extents.
    pub fn maxpool3d(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        let d = require_dim5("maxpool3d", self.shape(input))?;
        if d.d % 2 != 0 || d.h % 2 != 0 || d.w % 2 != 0 {
            return Err(TensorError::OddExtent {
                shape: self.shape(input).to_vec(),
            });
        }
        let (data, argmax) = kernels::maxpool3d_forward(self.data(input), d);
        let rg = self.needs_grad(&[input]);
        Ok(self.push(
            vec![d.b, d.c, d.d / 2, d.h / 2, d.w / 2],
            data,
            rg,
            Rule::MaxPool3d { input, argmax },
        ))
    }

    /// Nearest-neighbour upsampling by a factor of 2 along z, y, x.
    pub fn upsample_nearest3d(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        let d = require_dim5("upsample_nearest3d", self.shape(input))?;
        let data = kernels::upsample_forward(self.data(input), d);
        let rg = self.needs_grad(&[input]);
        Ok(self.push(
            vec![d.b, d.c, d.d * 2, d.h * 2, d.w * 2],
            data,
            rg,
            Rule::Upsample { input },
        ))
    }

    /// Uniform mean filter over `window`³ neighbourhoods, valid padding:
    /// each spatial extent shrinks by `window - 1`.
    pub fn boxfilter3d(&mut self, input: TensorId, window: usize) -> Result<TensorId, TensorError> {
        let d = require_dim5("boxfilter3d", self.shape(input))?;
        if window == 0 || window > d.d || window > d.h || window > d.w {
            return Err(TensorError::WindowTooLarge {
                window,
                shape: self.shape(input).to_vec(),
            });
        }
        let data = kernels::boxfilter_forward(self.data(input), d, window);
        let rg = self.needs_grad(&[input]);
        Ok(self.push(
            vec![d.b, d.c, d.d - window + 1, d.h - window + 1, d.w - window + 1],
            data,
            rg,
            Rule::BoxFilter { input, window },
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Accumulates `d loss / d node` into every tensor that requires grad
    /// and is reachable from `loss`. Existing gradients are discarded first.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.nodes[loss.0].numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        let nodes = &mut self.nodes;
        for rec in self.ops.iter().rev() {
            let Some(g) = nodes[rec.out.0].grad.clone() else {
                continue;
            };
            match &rec.rule {
                Rule::Add { a, b } => {
                    accumulate(nodes, *a, &g);
                    accumulate(nodes, *b, &g);
                }
                Rule::Sub { a, b } => {
                    accumulate(nodes, *a, &g);
                    let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                    accumulate(nodes, *b, &neg);
                }
                Rule::Mul { a, b } => {
                    if nodes[a.0].requires_grad {
                        let da = zip_map(&g, nodes[b.0].data(), |g, b| g * b);
                        accumulate(nodes, *a, &da);
                    }
                    if nodes[b.0].requires_grad {
                        let db = zip_map(&g, nodes[a.0].data(), |g, a| g * a);
                        accumulate(nodes, *b, &db);
                    }
                }
                Rule::Div { a, b } => {
                    if nodes[a.0].requires_grad {
                        let da = zip_map(&g, nodes[b.0].data(), |g, b| g / b);
                        accumulate(nodes, *a, &da);
                    }
                    if nodes[b.0].requires_grad {
                        let db: Vec<f32> = g
                            .iter()
                            .zip(nodes[a.0].data())
                            .zip(nodes[b.0].data())
                            .map(|((g, a), b)| -g * a / (b * b))
                            .collect();
                        accumulate(nodes, *b, &db);
                    }
                }
                Rule::AddScalar { a } => accumulate(nodes, *a, &g),
                Rule::MulScalar { a, c } => {
                    let da: Vec<f32> = g.iter().map(|g| g * c).collect();
                    accumulate(nodes, *a, &da);
                }
                Rule::Relu { a } => {
                    let da = zip_map(&g, nodes[a.0].data(), |g, x| if x > 0.0 { g } else { 0.0 });
                    accumulate(nodes, *a, &da);
                }
                Rule::Abs { a } => {
                    let da = zip_map(&g, nodes[a.0].data(), |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    });
                    accumulate(nodes, *a, &da);
                }
                Rule::Sum { a } => {
                    let da = vec![g[0]; nodes[a.0].numel()];
                    accumulate(nodes, *a, &da);
                }
                Rule::Mean { a } => {
                    let n = nodes[a.0].numel();
                    let da = vec![g[0] / n as f32; n];
                    accumulate(nodes, *a, &da);
                }
                Rule::ChannelMean { a } => {
                    let d = dim5(nodes[a.0].shape()).expect("recorded on 5-d input");
                    let da = kernels::channel_mean_backward(&g, d);
                    accumulate(nodes, *a, &da);
                }
                Rule::ChannelStd { a, means } => {
                    let d = dim5(nodes[a.0].shape()).expect("recorded on 5-d input");
                    let stds = nodes[rec.out.0].data();
                    let da = kernels::channel_std_backward(&g, nodes[a.0].data(), d, means, stds);
                    accumulate(nodes, *a, &da);
                }
                Rule::AddChannel { a, m } => {
                    accumulate(nodes, *a, &g);
                    if nodes[m.0].requires_grad {
                        let d = dim5(nodes[a.0].shape()).expect("5-d");
                        let dm = kernels::channel_reduce(&g, d);
                        accumulate(nodes, *m, &dm);
                    }
                }
                Rule::SubChannel { a, m } => {
                    accumulate(nodes, *a, &g);
                    if nodes[m.0].requires_grad {
                        let d = dim5(nodes[a.0].shape()).expect("5-d");
                        let dm: Vec<f32> = kernels::channel_reduce(&g, d).iter().map(|v| -v).collect();
                        accumulate(nodes, *m, &dm);
                    }
                }
                Rule::MulChannel { a, s } => {
                    let d = dim5(nodes[a.0].shape()).expect("5-d");
                    if nodes[a.0].requires_grad {
                        let da = kernels::channel_broadcast(&g, nodes[s.0].data(), d, |g, v| g * v);
                        accumulate(nodes, *a, &da);
                    }
                    if nodes[s.0].requires_grad {
                        let prod = zip_map(&g, nodes[a.0].data(), |g, x| g * x);
                        let ds = kernels::channel_reduce(&prod, d);
                        accumulate(nodes, *s, &ds);
                    }
                }
                Rule::DivChannel { a, s } => {
                    let d = dim5(nodes[a.0].shape()).expect("5-d");
                    if nodes[a.0].requires_grad {
                        let da = kernels::channel_broadcast(&g, nodes[s.0].data(), d, |g, v| g / v);
                        accumulate(nodes, *a, &da);
                    }
                    if nodes[s.0].requires_grad {
                        let sdata = nodes[s.0].data();
                        let spatial = d.spatial();
                        let prod: Vec<f32> = g
                            .iter()
                            .zip(nodes[a.0].data())
                            .enumerate()
                            .map(|(i, (g, x))| {
                                let v = sdata[i / spatial];
                                -g * x / (v * v)
                            })
                            .collect();
                        let ds = kernels::channel_reduce(&prod, d);
                        accumulate(nodes, *s, &ds);
                    }
                }
                Rule::Conv3d { input, weight, bias } => {
                    let d = dim5(nodes[input.0].shape()).expect("5-d");
                    let c_out = nodes[weight.0].shape()[0];
                    let (dx, dw, db) = kernels::conv3d_backward(
                        &g,
                        nodes[input.0].data(),
                        d,
                        nodes[weight.0].data(),
                        c_out,
                        nodes[input.0].requires_grad,
                        nodes[weight.0].requires_grad,
                        nodes[bias.0].requires_grad,
                    );
                    if let Some(dx) = dx {
                        accumulate(nodes, *input, &dx);
                    }
                    if let Some(dw) = dw {
                        accumulate(nodes, *weight, &dw);
                    }
                    if let Some(db) = db {
                        accumulate(nodes, *bias, &db);
                    }
                }
                Rule::MaxPool3d { input, argmax } => {
                    let mut da = vec![0.0f32; nodes[input.0].numel()];
                    for (gi, &src) in g.iter().zip(argmax.iter()) {
                        da[src as usize] += gi;
                    }
                    accumulate(nodes, *input, &da);
                }
                Rule::Upsample { input } => {
                    let d = dim5(nodes[input.0].shape()).expect("5-d");
                    let da = kernels::upsample_backward(&g, d);
                    accumulate(nodes, *input, &da);
                }
                Rule::BoxFilter { input, window } => {
                    let d = dim5(nodes[input.0].shape()).expect("5-d");
                    let da = kernels::boxfilter_backward(&g, d, *window);
                    accumulate(nodes, *input, &da);
                }
            }
        }
        Ok(())
    }
}

fn zip_map(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate(nodes: &mut [Tensor], id: TensorId, contrib: &[f32]) {
    let node = &mut nodes[id.0];
    if !node.requires_grad {
        return;
    }
    let grad = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
    for (g, c) in grad.iter_mut().zip(contrib) {
        *g += c;
    }
}
