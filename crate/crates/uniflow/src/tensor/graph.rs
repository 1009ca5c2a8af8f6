//! Recording tape for reverse-mode differentiation.
//!
//! A [`Graph`] is an ordered record of executed ops: each forward call
//! validates shapes, computes the result eagerly, checks it for non-finite
//! values, and appends a node. [`Graph::backward`] walks the record in exact
//! reverse execution order. A graph is recorded per forward pass and is
//! single-use: a second backward without re-recording is an error.

use super::ops;
use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Val(pub(crate) usize);

/// Elementwise nonlinearities supported by [`Graph::pointwise`].
///
/// `ExpNegScale(a)` multiplies by the constant exp(-a); the argument is a
/// plain scalar (a decay exponent), never differentiated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PointwiseKind {
    Gelu,
    Sigmoid,
    Tanh,
    ExpNegScale(f64),
}

/// Symmetric zero padding of `p` pixels per side, or none at all.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zeros(usize),
    None,
}

impl Padding {
    fn pixels(self) -> usize {
        match self {
            Padding::Zeros(p) => p,
            Padding::None => 0,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Val,
        weight: Val,
        bias: Val,
        stride: usize,
        pad: usize,
    },
    Linear {
        input: Val,
        weight: Val,
        bias: Val,
    },
    GroupNorm {
        input: Val,
        gamma: Val,
        beta: Val,
        groups: usize,
        /// (mean, inv_std) per (sample, group), saved for backward.
        stats: Vec<(f64, f64)>,
    },
    Pointwise {
        input: Val,
        kind: PointwiseKind,
    },
    SpatialMean {
        input: Val,
    },
    UpsampleNearest {
        input: Val,
        factor: usize,
    },
    /// Keep every second row and column (offset 0). Together with a stride-1
    /// conv this realizes the stride-2 downsampling convs of the backbone.
    Subsample2 {
        input: Val,
    },
    ConcatChannels {
        a: Val,
        b: Val,
    },
    Add {
        a: Val,
        b: Val,
    },
    Sub {
        a: Val,
        b: Val,
    },
    Mul {
        a: Val,
        b: Val,
    },
    /// a + b where b has shape (1|N, 1|C, 1, 1) broadcast over a.
    AddBroadcast {
        a: Val,
        b: Val,
    },
    /// a * b with the same broadcast rule.
    MulBroadcast {
        a: Val,
        b: Val,
    },
    Scale {
        input: Val,
        factor: f64,
    },
    Abs {
        input: Val,
    },
    Sum {
        input: Val,
    },
    Mean {
        input: Val,
    },
}

struct Node {
    shape: Shape,
    data: Vec<f64>,
    requires_grad: bool,
}

/// The recording tape. See the module docs.
pub struct Graph {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf node. Finite data is required.
    pub fn leaf(&mut self, shape: Shape, data: Vec<f64>, requires_grad: bool) -> Result<Val> {
        if data.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "leaf data length {} does not match shape {}",
                data.len(),
                shape
            )));
        }
        self.push(shape, data, Op::Leaf, requires_grad)
    }

    /// Leaf from a tensor value, keeping its requires_grad flag.
    pub fn param(&mut self, t: &Tensor) -> Result<Val> {
        self.leaf(t.shape(), t.data().to_vec(), t.requires_grad())
    }

    /// Leaf from a plain input (never grad-tracked).
    pub fn input(&mut self, t: &Tensor) -> Result<Val> {
        self.leaf(t.shape(), t.data().to_vec(), false)
    }

    /// Constant zero leaf of the given shape.
    pub fn zeros(&mut self, shape: Shape) -> Result<Val> {
        self.leaf(shape, vec![0.0; shape.numel()], false)
    }

    pub fn shape(&self, v: Val) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn data(&self, v: Val) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, v: Val) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn to_tensor(&self, v: Val) -> Tensor {
        Tensor::new(self.shape(v), self.data(v).to_vec()).expect("node is self-consistent")
    }

    /// Gradient of a node after [`Graph::backward`] ran.
    pub fn grad(&self, v: Val) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Shape, data: Vec<f64>, op: Op, requires_grad: bool) -> Result<Val> {
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value at element {bad} produced by {}",
                op_name(&op)
            )));
        }
        debug_assert_eq!(data.len(), shape.numel());
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
        });
        self.ops.push(op);
        Ok(Val(id))
    }

    fn any_requires(&self, vals: &[Val]) -> bool {
        vals.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- forward ops -------------------------------------------------------

    /// 2-D cross-correlation (no kernel flip), weight (Cout, Cin, kh, kw),
    /// bias (1, Cout, 1, 1). Odd kernels, stride 1 or 2; the output extent
    /// (H + 2p - kh)/stride + 1 must be an exact integer.
    pub fn conv2d(
        &mut self,
        input: Val,
        weight: Val,
        bias: Val,
        stride: usize,
        padding: Padding,
    ) -> Result<Val> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        let bs = self.shape(bias);
        let (cout, cin, kh, kw) = (ws.n(), ws.c(), ws.h(), ws.w());
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Shape(format!(
                "conv2d kernel extents must be odd, got {kh}x{kw}"
            )));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::Shape(format!(
                "conv2d stride must be 1 or 2, got {stride}"
            )));
        }
        if xs.c() != cin {
            return Err(Error::Shape(format!(
                "conv2d input has {} channels but weight expects {}",
                xs.c(),
                cin
            )));
        }
        if bs != Shape::new(1, cout, 1, 1) {
            return Err(Error::Shape(format!(
                "conv2d bias must be 1x{cout}x1x1, got {bs}"
            )));
        }
        let pad = padding.pixels();
        let oh = conv_extent(xs.h(), kh, pad, stride)?;
        let ow = conv_extent(xs.w(), kw, pad, stride)?;
        let out_shape = Shape::new(xs.n(), cout, oh, ow);
        let data = ops::conv2d_forward(
            self.data(input),
            xs,
            self.data(weight),
            ws,
            self.data(bias),
            stride,
            pad,
            out_shape,
        );
        let req = self.any_requires(&[input, weight, bias]);
        self.push(
            out_shape,
            data,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            req,
        )
    }

    /// Fully connected layer on 1x1 spatial input: weight (Cout, Cin, 1, 1),
    /// bias (1, Cout, 1, 1).
    pub fn linear(&mut self, input: Val, weight: Val, bias: Val) -> Result<Val> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        if xs.h() != 1 || xs.w() != 1 {
            return Err(Error::Shape(format!(
                "linear input must have 1x1 spatial extents, got {xs}"
            )));
        }
        let (cout, cin) = (ws.n(), ws.c());
        if ws.h() != 1 || ws.w() != 1 || xs.c() != cin {
            return Err(Error::Shape(format!(
                "linear weight {ws} incompatible with input {xs}"
            )));
        }
        if self.shape(bias) != Shape::new(1, cout, 1, 1) {
            return Err(Error::Shape(format!(
                "linear bias must be 1x{cout}x1x1, got {}",
                self.shape(bias)
            )));
        }
        let out_shape = Shape::new(xs.n(), cout, 1, 1);
        let data =
            ops::linear_forward(self.data(input), xs, self.data(weight), ws, self.data(bias));
        let req = self.any_requires(&[input, weight, bias]);
        self.push(
            out_shape,
            data,
            Op::Linear {
                input,
                weight,
                bias,
            },
            req,
        )
    }

    /// Group normalization with per-channel affine terms gamma/beta of shape
    /// (1, C, 1, 1). Statistics use the population variance.
    pub fn group_norm(
        &mut self,
        input: Val,
        gamma: Val,
        beta: Val,
        groups: usize,
        eps: f64,
    ) -> Result<Val> {
        let xs = self.shape(input);
        if groups == 0 || xs.c() % groups != 0 {
            return Err(Error::Shape(format!(
                "group_norm: {} channels not divisible by {groups} groups",
                xs.c()
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!(
                "group_norm eps must be > 0, got {eps}"
            )));
        }
        let affine = Shape::new(1, xs.c(), 1, 1);
        if self.shape(gamma) != affine || self.shape(beta) != affine {
            return Err(Error::Shape(format!(
                "group_norm affine terms must be {affine}, got {} and {}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (data, stats) = ops::group_norm_forward(
            self.data(input),
            xs,
            self.data(gamma),
            self.data(beta),
            groups,
            eps,
        );
        let req = self.any_requires(&[input, gamma, beta]);
        self.push(
            xs,
            data,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                stats,
            },
            req,
        )
    }

    /// Elementwise nonlinearity. GELU uses the exact Gaussian-CDF form.
    pub fn pointwise(&mut self, input: Val, kind: PointwiseKind) -> Result<Val> {
        let xs = self.shape(input);
        let data = ops::pointwise_forward(self.data(input), kind);
        let req = self.nodes[input.0].requires_grad;
        self.push(xs, data, Op::Pointwise { input, kind }, req)
    }

    pub fn gelu(&mut self, input: Val) -> Result<Val> {
        self.pointwise(input, PointwiseKind::Gelu)
    }

    pub fn sigmoid(&mut self, input: Val) -> Result<Val> {
        self.pointwise(input, PointwiseKind::Sigmoid)
    }

    pub fn tanh(&mut self, input: Val) -> Result<Val> {
        self.pointwise(input, PointwiseKind::Tanh)
    }

    /// Arithmetic mean over the spatial extents, one value per (n, c).
    pub fn spatial_mean(&mut self, input: Val) -> Result<Val> {
        let xs = self.shape(input);
        if xs.h() * xs.w() == 0 {
            return Err(Error::Shape("spatial_mean needs H*W >= 1".into()));
        }
        let out_shape = Shape::new(xs.n(), xs.c(), 1, 1);
        let data = ops::spatial_mean_forward(self.data(input), xs);
        let req = self.nodes[input.0].requires_grad;
        self.push(out_shape, data, Op::SpatialMean { input }, req)
    }

    /// Nearest-neighbour upsampling by an integer factor >= 2.
    pub fn upsample_nearest(&mut self, input: Val, factor: usize) -> Result<Val> {
        if factor < 2 {
            return Err(Error::Shape(format!(
                "upsample_nearest factor must be >= 2, got {factor}"
            )));
        }
        let xs = self.shape(input);
        let out_shape = Shape::new(xs.n(), xs.c(), xs.h() * factor, xs.w() * factor);
        let data = ops::upsample_forward(self.data(input), xs, factor);
        let req = self.nodes[input.0].requires_grad;
        self.push(out_shape, data, Op::UpsampleNearest { input, factor }, req)
    }

    /// Take every second row and column (offset 0); H and W become ceil(H/2),
    /// ceil(W/2). Applied after a stride-1 conv this is exactly the stride-2
    /// convolution used for downsampling.
    pub fn subsample2(&mut self, input: Val) -> Result<Val> {
        let xs = self.shape(input);
        let out_shape = Shape::new(xs.n(), xs.c(), xs.h().div_ceil(2), xs.w().div_ceil(2));
        let data = ops::subsample2_forward(self.data(input), xs, out_shape);
        let req = self.nodes[input.0].requires_grad;
        self.push(out_shape, data, Op::Subsample2 { input }, req)
    }

    /// Concatenate along the channel axis, `a` first.
    pub fn concat_channels(&mut self, a: Val, b: Val) -> Result<Val> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.n() != sb.n() || sa.h() != sb.h() || sa.w() != sb.w() {
            return Err(Error::Shape(format!(
                "concat_channels operands disagree outside the channel axis: {sa} vs {sb}"
            )));
        }
        let out_shape = Shape::new(sa.n(), sa.c() + sb.c(), sa.h(), sa.w());
        let data = ops::concat_forward(self.data(a), sa, self.data(b), sb);
        let req = self.any_requires(&[a, b]);
        self.push(out_shape, data, Op::ConcatChannels { a, b }, req)
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        self.elementwise(a, b, "add")
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        self.elementwise(a, b, "sub")
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        self.elementwise(a, b, "mul")
    }

    fn elementwise(&mut self, a: Val, b: Val, kind: &str) -> Result<Val> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            // (1|N, 1|C, 1, 1) operands broadcast for add and mul.
            if sb.h() == 1
                && sb.w() == 1
                && (sb.n() == 1 || sb.n() == sa.n())
                && (sb.c() == 1 || sb.c() == sa.c())
                && kind != "sub"
            {
                return self.broadcast_op(a, b, kind);
            }
            return Err(Error::Shape(format!(
                "{kind}: incompatible shapes {sa} vs {sb}"
            )));
        }
        let data: Vec<f64> = match kind {
            "add" => ops::zip2(self.data(a), self.data(b), |x, y| x + y),
            "sub" => ops::zip2(self.data(a), self.data(b), |x, y| x - y),
            _ => ops::zip2(self.data(a), self.data(b), |x, y| x * y),
        };
        let op = match kind {
            "add" => Op::Add { a, b },
            "sub" => Op::Sub { a, b },
            _ => Op::Mul { a, b },
        };
        let req = self.any_requires(&[a, b]);
        self.push(sa, data, op, req)
    }

    fn broadcast_op(&mut self, a: Val, b: Val, kind: &str) -> Result<Val> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let data = ops::broadcast_forward(self.data(a), sa, self.data(b), sb, kind == "mul");
        let op = if kind == "mul" {
            Op::MulBroadcast { a, b }
        } else {
            Op::AddBroadcast { a, b }
        };
        let req = self.any_requires(&[a, b]);
        self.push(sa, data, op, req)
    }

    /// Multiply by a plain scalar constant.
    pub fn scale(&mut self, input: Val, factor: f64) -> Result<Val> {
        let xs = self.shape(input);
        let data = self.data(input).iter().map(|v| v * factor).collect();
        let req = self.nodes[input.0].requires_grad;
        self.push(xs, data, Op::Scale { input, factor }, req)
    }

    /// Elementwise |x|; the subgradient at 0 is taken as 0.
    pub fn abs(&mut self, input: Val) -> Result<Val> {
        let xs = self.shape(input);
        let data = self.data(input).iter().map(|v| v.abs()).collect();
        let req = self.nodes[input.0].requires_grad;
        self.push(xs, data, Op::Abs { input }, req)
    }

    /// Sum of all elements, as a 1x1x1x1 node.
    pub fn sum(&mut self, input: Val) -> Result<Val> {
        let total: f64 = self.data(input).iter().sum();
        let req = self.nodes[input.0].requires_grad;
        self.push(Shape::new(1, 1, 1, 1), vec![total], Op::Sum { input }, req)
    }

    /// Mean of all elements, as a 1x1x1x1 node.
    pub fn mean(&mut self, input: Val) -> Result<Val> {
        let n = self.data(input).len() as f64;
        let total: f64 = self.data(input).iter().sum();
        let req = self.nodes[input.0].requires_grad;
        self.push(
            Shape::new(1, 1, 1, 1),
            vec![total / n],
            Op::Mean { input },
            req,
        )
    }

    /// Mean of |pred - target| over all elements.
    pub fn l1_loss(&mut self, pred: Val, target: Val) -> Result<Val> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::Shape(format!(
                "l1_loss shapes disagree: {} vs {}",
                self.shape(pred),
                self.shape(target)
            )));
        }
        let d = self.sub(pred, target)?;
        let a = self.abs(d)?;
        self.mean(a)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss. Populates gradients for every
    /// grad-tracked node; leaves not on the path keep zero grads. The graph
    /// is consumed: call it once per recording.
    pub fn backward(&mut self, loss: Val) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {}",
                self.shape(loss)
            )));
        }
        if self.consumed {
            return Err(Error::Config(
                "graph already consumed by backward; re-record the forward pass".into(),
            ));
        }
        self.consumed = true;
        self.grads = self
            .nodes
            .iter()
            .map(|n| {
                if n.requires_grad {
                    Some(vec![0.0; n.data.len()])
                } else {
                    None
                }
            })
            .collect();
        if let Some(g) = self.grads[loss.0].as_mut() {
            g[0] = 1.0;
        } else {
            // Loss does not depend on any grad-tracked leaf; all grads stay zero.
            return Ok(());
        }

        for i in (0..self.ops.len()).rev() {
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.backprop_op(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn backprop_op(&mut self, i: usize, gout: &[f64]) {
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let (input, weight, bias, stride, pad) = (*input, *weight, *bias, *stride, *pad);
                let xs = self.nodes[input.0].shape;
                let ws = self.nodes[weight.0].shape;
                let os = self.nodes[i].shape;
                if self.grads[input.0].is_some() {
                    let mut gx = self.grads[input.0].take().unwrap();
                    ops::conv2d_backward_input(
                        gout,
                        os,
                        &self.nodes[weight.0].data,
                        ws,
                        stride,
                        pad,
                        xs,
                        &mut gx,
                    );
                    self.grads[input.0] = Some(gx);
                }
                if self.grads[weight.0].is_some() {
                    let mut gw = self.grads[weight.0].take().unwrap();
                    ops::conv2d_backward_weight(
                        gout,
                        os,
                        &self.nodes[input.0].data,
                        xs,
                        ws,
                        stride,
                        pad,
                        &mut gw,
                    );
                    self.grads[weight.0] = Some(gw);
                }
                if let Some(gb) = self.grads[bias.0].as_mut() {
                    ops::conv2d_backward_bias(gout, os, gb);
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let xs = self.nodes[input.0].shape;
                let ws = self.nodes[weight.0].shape;
                if self.grads[input.0].is_some() {
                    let mut gx = self.grads[input.0].take().unwrap();
                    ops::linear_backward_input(gout, &self.nodes[weight.0].data, ws, xs, &mut gx);
                    self.grads[input.0] = Some(gx);
                }
                if self.grads[weight.0].is_some() {
                    let mut gw = self.grads[weight.0].take().unwrap();
                    ops::linear_backward_weight(gout, &self.nodes[input.0].data, xs, ws, &mut gw);
                    self.grads[weight.0] = Some(gw);
                }
                if let Some(gb) = self.grads[bias.0].as_mut() {
                    let cout = ws.n();
                    for n in 0..xs.n() {
                        for co in 0..cout {
                            gb[co] += gout[n * cout + co];
                        }
                    }
                }
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let (input, gamma, beta, groups) = (*input, *gamma, *beta, *groups);
                let xs = self.nodes[input.0].shape;
                // Split the grad slots out to appease the borrow checker.
                let mut gx = self.grads[input.0].take();
                let mut gg = self.grads[gamma.0].take();
                let mut gb = self.grads[beta.0].take();
                ops::group_norm_backward(
                    gout,
                    &self.nodes[input.0].data,
                    xs,
                    &self.nodes[gamma.0].data,
                    groups,
                    stats,
                    gx.as_deref_mut(),
                    gg.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                self.grads[input.0] = gx;
                self.grads[gamma.0] = gg;
                self.grads[beta.0] = gb;
            }
            Op::Pointwise { input, kind } => {
                let (input, kind) = (*input, *kind);
                if self.grads[input.0].is_some() {
                    let mut gx = self.grads[input.0].take().unwrap();
                    ops::pointwise_backward(
                        gout,
                        &self.nodes[input.0].data,
                        &self.nodes[i].data,
                        kind,
                        &mut gx,
                    );
                    self.grads[input.0] = Some(gx);
                }
            }
            Op::SpatialMean { input } => {
                let input = *input;
                let xs = self.nodes[input.0].shape;
                if let Some(gx) = self.grads[input.0].as_mut() {
                    let inv = 1.0 / (xs.h() * xs.w()) as f64;
                    for nc in 0..xs.n() * xs.c() {
                        let g = gout[nc] * inv;
                        let base = nc * xs.h() * xs.w();
                        for v in gx[base..base + xs.h() * xs.w()].iter_mut() {
                            *v += g;
                        }
                    }
                }
            }
            Op::UpsampleNearest { input, factor } => {
                let (input, factor) = (*input, *factor);
                let xs = self.nodes[input.0].shape;
                let os = self.nodes[i].shape;
                if let Some(gx) = self.grads[input.0].as_mut() {
                    ops::upsample_backward(gout, os, xs, factor, gx);
                }
            }
            Op::Subsample2 { input } => {
                let input = *input;
                let xs = self.nodes[input.0].shape;
                let os = self.nodes[i].shape;
                if let Some(gx) = self.grads[input.0].as_mut() {
                    ops::subsample2_backward(gout, os, xs, gx);
                }
            }
            Op::ConcatChannels { a, b } => {
                let (a, b) = (*a, *b);
                let sa = self.nodes[a.0].shape;
                let sb = self.nodes[b.0].shape;
                if let Some(ga) = self.grads[a.0].as_mut() {
                    ops::concat_backward(gout, sa, sb, true, ga);
                }
                if let Some(gb) = self.grads[b.0].as_mut() {
                    ops::concat_backward(gout, sa, sb, false, gb);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if let Some(ga) = self.grads[a.0].as_mut() {
                    for (g, go) in ga.iter_mut().zip(gout) {
                        *g += go;
                    }
                }
                if let Some(gb) = self.grads[b.0].as_mut() {
                    for (g, go) in gb.iter_mut().zip(gout) {
                        *g += go;
                    }
                }
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                if let Some(ga) = self.grads[a.0].as_mut() {
                    for (g, go) in ga.iter_mut().zip(gout) {
                        *g += go;
                    }
                }
                if let Some(gb) = self.grads[b.0].as_mut() {
                    for (g, go) in gb.iter_mut().zip(gout) {
                        *g -= go;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.grads[a.0].is_some() {
                    let mut ga = self.grads[a.0].take().unwrap();
                    for ((g, go), bv) in ga.iter_mut().zip(gout).zip(&self.nodes[b.0].data) {
                        *g += go * bv;
                    }
                    self.grads[a.0] = Some(ga);
                }
                if self.grads[b.0].is_some() {
                    let mut gb = self.grads[b.0].take().unwrap();
                    for ((g, go), av) in gb.iter_mut().zip(gout).zip(&self.nodes[a.0].data) {
                        *g += go * av;
                    }
                    self.grads[b.0] = Some(gb);
                }
            }
            Op::AddBroadcast { a, b } => {
                let (a, b) = (*a, *b);
                let sa = self.nodes[a.0].shape;
                let sb = self.nodes[b.0].shape;
                if let Some(ga) = self.grads[a.0].as_mut() {
                    for (g, go) in ga.iter_mut().zip(gout) {
                        *g += go;
                    }
                }
                if let Some(gb) = self.grads[b.0].as_mut() {
                    ops::broadcast_backward_rhs(gout, sa, sb, None, gb);
                }
            }
            Op::MulBroadcast { a, b } => {
                let (a, b) = (*a, *b);
                let sa = self.nodes[a.0].shape;
                let sb = self.nodes[b.0].shape;
                if self.grads[a.0].is_some() {
                    let mut ga = self.grads[a.0].take().unwrap();
                    ops::broadcast_grad_lhs(gout, sa, &self.nodes[b.0].data, sb, &mut ga);
                    self.grads[a.0] = Some(ga);
                }
                if self.grads[b.0].is_some() {
                    let mut gb = self.grads[b.0].take().unwrap();
                    ops::broadcast_backward_rhs(gout, sa, sb, Some(&self.nodes[a.0].data), &mut gb);
                    self.grads[b.0] = Some(gb);
                }
            }
            Op::Scale { input, factor } => {
                let (input, factor) = (*input, *factor);
                if let Some(gx) = self.grads[input.0].as_mut() {
                    for (g, go) in gx.iter_mut().zip(gout) {
                        *g += go * factor;
                    }
                }
            }
            Op::Abs { input } => {
                let input = *input;
                if self.grads[input.0].is_some() {
                    let mut gx = self.grads[input.0].take().unwrap();
                    for ((g, go), x) in gx.iter_mut().zip(gout).zip(&self.nodes[input.0].data) {
                        let s = if *x > 0.0 {
                            1.0
                        } else if *x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *g += go * s;
                    }
                    self.grads[input.0] = Some(gx);
                }
            }
            Op::Sum { input } => {
                let input = *input;
                if let Some(gx) = self.grads[input.0].as_mut() {
                    let g = gout[0];
                    for v in gx.iter_mut() {
                        *v += g;
                    }
                }
            }
            Op::Mean { input } => {
                let input = *input;
                if let Some(gx) = self.grads[input.0].as_mut() {
                    let g = gout[0] / gx.len() as f64;
                    for v in gx.iter_mut() {
                        *v += g;
                    }
                }
            }
        }
    }
}

/// Output extent of a convolution; errors when the division is not exact.
fn conv_extent(extent: usize, k: usize, pad: usize, stride: usize) -> Result<usize> {
    let padded = extent + 2 * pad;
    if padded < k {
        return Err(Error::Shape(format!(
            "conv2d kernel {k} larger than padded extent {padded}"
        )));
    }
    let span = padded - k;
    if span % stride != 0 {
        return Err(Error::Shape(format!(
            "conv2d non-integer output extent: ({extent} + 2*{pad} - {k}) not divisible by stride {stride}"
        )));
    }
    Ok(span / stride + 1)
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::Linear { .. } => "linear",
        Op::GroupNorm { .. } => "group_norm",
        Op::Pointwise { .. } => "pointwise",
        Op::SpatialMean { .. } => "spatial_mean",
        Op::UpsampleNearest { .. } => "upsample_nearest",
        Op::Subsample2 { .. } => "subsample2",
        Op::ConcatChannels { .. } => "concat_channels",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::AddBroadcast { .. } => "add_broadcast",
        Op::MulBroadcast { .. } => "mul_broadcast",
        Op::Scale { .. } => "scale",
        Op::Abs { .. } => "abs",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
    }
}
