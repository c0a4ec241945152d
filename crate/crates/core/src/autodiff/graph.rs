use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};

use super::kernels::{add_into, col2im_add, im2col, ConvGeometry};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward-pass gradient scale applied by a gradient-reversal node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrlSetting {
    multiplier: f64,
}

impl GrlSetting {
    pub fn new(multiplier: f64) -> Result<Self> {
        if !multiplier.is_finite() {
            return Err(Error::Contract(format!(
                "gradient reversal multiplier must be finite, got {multiplier}"
            )));
        }
        Ok(GrlSetting { multiplier })
    }

    pub fn multiplier(self) -> f64 {
        self.multiplier
    }
}

impl Default for GrlSetting {
    fn default() -> Self {
        GrlSetting { multiplier: -1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Linear,
    Conv2d,
    ChannelAffine,
    AvgPool2d,
    GlobalAvgPool,
    GlobalMaxPool,
    Relu,
    Sigmoid,
    Add,
    Mul,
    Scale,
    Softmax,
    GradReversal,
    ConcatRows,
    GroupMean,
    Sum,
    Mean,
    CccLoss,
    CrossEntropy,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Linear => "linear",
            OpKind::Conv2d => "conv2d",
            OpKind::ChannelAffine => "channel_affine",
            OpKind::AvgPool2d => "avg_pool2d",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::GlobalMaxPool => "global_max_pool",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Softmax => "softmax",
            OpKind::GradReversal => "grad_reversal",
            OpKind::ConcatRows => "concat_rows",
            OpKind::GroupMean => "group_mean",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::CccLoss => "ccc_loss",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn parse(name: &str) -> Option<OpKind> {
        ALL_OPS.iter().copied().find(|k| k.name() == name)
    }
}

const ALL_OPS: [OpKind; 20] = [
    OpKind::Leaf,
    OpKind::Linear,
    OpKind::Conv2d,
    OpKind::ChannelAffine,
    OpKind::AvgPool2d,
    OpKind::GlobalAvgPool,
    OpKind::GlobalMaxPool,
    OpKind::Relu,
    OpKind::Sigmoid,
    OpKind::Add,
    OpKind::Mul,
    OpKind::Scale,
    OpKind::Softmax,
    OpKind::GradReversal,
    OpKind::ConcatRows,
    OpKind::GroupMean,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::CccLoss,
    OpKind::CrossEntropy,
];

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, geom: ConvGeometry },
    ChannelAffine { x: Var, scale: Var, shift: Var },
    AvgPool2d { x: Var, size: usize },
    GlobalAvgPool { x: Var },
    GlobalMaxPool { x: Var, argmax: Vec<usize> },
    Relu { x: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Softmax { x: Var, axis: usize },
    GradReversal { x: Var, multiplier: f64 },
    ConcatRows { parts: Vec<Var> },
    GroupMean { x: Var, group: usize },
    Sum { x: Var },
    Mean { x: Var },
    CccLoss { pred: Var, target: Var },
    CrossEntropy { logits: Var, labels: Vec<usize> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Linear { .. } => OpKind::Linear,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ChannelAffine { .. } => OpKind::ChannelAffine,
            Op::AvgPool2d { .. } => OpKind::AvgPool2d,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::GlobalMaxPool { .. } => OpKind::GlobalMaxPool,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::GradReversal { .. } => OpKind::GradReversal,
            Op::ConcatRows { .. } => OpKind::ConcatRows,
            Op::GroupMean { .. } => OpKind::GroupMean,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::CccLoss { .. } => OpKind::CccLoss,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Conv2d { x, k, .. } => vec![*x, *k],
            Op::ChannelAffine { x, scale, shift } => vec![*x, *scale, *shift],
            Op::AvgPool2d { x, .. }
            | Op::GlobalAvgPool { x }
            | Op::GlobalMaxPool { x, .. }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Scale { x, .. }
            | Op::Softmax { x, .. }
            | Op::GradReversal { x, .. }
            | Op::GroupMean { x, .. }
            | Op::Sum { x }
            | Op::Mean { x } => vec![*x],
            Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::ConcatRows { parts } => parts.clone(),
            Op::CccLoss { pred, target } => vec![*pred, *target],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    op: Op,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` for nodes that do not require grad or are unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// How gradient-reversal nodes evaluate their forward pass.
///
/// `Anchored` evaluates `m·x + (1−m)·x₀`, where `x₀` is the node's input at a
/// recorded base point: same value as the identity at that point, and its
/// finite differences carry the factor `m`. Used only by gradient-check oracles.
enum ReversalMode<T> {
    Identity,
    Record(Vec<Tensor<T>>),
    Anchored { anchors: Vec<Tensor<T>>, next: usize },
}

/// Tape of tensor operations in creation (hence topological) order.
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
    reversal: ReversalMode<T>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: None,
            reversal: ReversalMode::Identity,
        }
    }

    /// Records the input of every reversal node built afterwards.
    #[doc(hidden)]
    pub fn record_reversal_anchors(&mut self) {
        self.reversal = ReversalMode::Record(Vec::new());
    }

    #[doc(hidden)]
    pub fn take_reversal_anchors(&mut self) -> Vec<Tensor<T>> {
        match std::mem::replace(&mut self.reversal, ReversalMode::Identity) {
            ReversalMode::Record(a) | ReversalMode::Anchored { anchors: a, .. } => a,
            ReversalMode::Identity => Vec::new(),
        }
    }

    /// Evaluates reversal nodes as `m·x + (1−m)·x₀` against recorded anchors.
    #[doc(hidden)]
    pub fn anchor_reversals(&mut self, anchors: Vec<Tensor<T>>) {
        self.reversal = ReversalMode::Anchored { anchors, next: 0 };
    }

    /// Negates the backward rule of every node of `kind`. Mutation fixture used
    /// to confirm the gradient checker catches sign bugs.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// First node holding a NaN or infinity, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.nodes.iter().position(|n| !n.value.all_finite()) {
            None => Ok(()),
            Some(node) => Err(Error::Numeric {
                node,
                op: self.nodes[node].op.kind().name(),
            }),
        }
    }

    /// Fingerprint of the piecewise-linear branch taken by every ReLU and max
    /// pool in the graph. Two evaluations with equal fingerprints lie on the
    /// same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for &v in self.nodes[x.0].value.data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::GlobalMaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, op: Op, value: Tensor<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never accumulates a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::dim("linear", xs, ws));
        }
        if bs != [ws[1]] {
            return Err(Error::dim("linear bias", ws, bs));
        }
        let (rows, inner, cols) = (xs[0], xs[1], ws[1]);
        let mut out = Vec::with_capacity(rows * cols);
        let bias = self.value(b).data();
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        T::gemm(
            rows,
            inner,
            cols,
            self.value(x).data(),
            (inner as isize, 1),
            self.value(w).data(),
            (cols as isize, 1),
            T::one(),
            &mut out,
            (cols as isize, 1),
        );
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(Op::Linear { x, w, b }, value))
    }

    /// Cross-correlation of `B×C×H×W` input with `F×C×kh×kw` kernels, no bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(Error::dim("conv2d", &xs, &ks));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        let (batch, channels, height, width) = (xs[0], xs[1], xs[2], xs[3]);
        let (filters, kernel_h, kernel_w) = (ks[0], ks[2], ks[3]);
        if kernel_h > height + 2 * pad.0 || kernel_w > width + 2 * pad.1 {
            return Err(Error::dim("conv2d kernel vs padded input", &ks, &xs));
        }
        let geom = ConvGeometry {
            channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            pad,
            out_h: (height + 2 * pad.0 - kernel_h) / stride.0 + 1,
            out_w: (width + 2 * pad.1 - kernel_w) / stride.1 + 1,
        };
        let (rows, ohw) = (geom.col_rows(), geom.col_cols());
        let item = channels * height * width;
        let mut col = vec![T::zero(); rows * ohw];
        let mut out = vec![T::zero(); batch * filters * ohw];
        let (xv, kv) = (self.value(x).data(), self.value(k).data());
        for bi in 0..batch {
            im2col(&xv[bi * item..(bi + 1) * item], &geom, &mut col);
            T::gemm(
                filters,
                rows,
                ohw,
                kv,
                (rows as isize, 1),
                &col,
                (ohw as isize, 1),
                T::zero(),
                &mut out[bi * filters * ohw..(bi + 1) * filters * ohw],
                (ohw as isize, 1),
            );
        }
        let value = Tensor::new(vec![batch, filters, geom.out_h, geom.out_w], out)?;
        Ok(self.push(Op::Conv2d { x, k, geom }, value))
    }

    /// Per-channel `x·scale[c] + shift[c]` on a `B×C×…` tensor.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::dim("channel_affine", &xs, self.shape(scale)));
        }
        let channels = xs[1];
        for p in [scale, shift] {
            if self.shape(p) != [channels] {
                return Err(Error::dim("channel_affine", &xs, self.shape(p)));
            }
        }
        let inner: usize = xs[2..].iter().product();
        let (xv, sv, tv) = (
            self.value(x).data(),
            self.value(scale).data(),
            self.value(shift).data(),
        );
        let out = xv
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i / inner) % channels;
                v * sv[c] + tv[c]
            })
            .collect();
        let value = Tensor::new(xs, out)?;
        Ok(self.push(Op::ChannelAffine { x, scale, shift }, value))
    }

    /// Non-overlapping `size×size` average pooling; trailing rows/cols are dropped.
    pub fn avg_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || size == 0 || xs[2] < size || xs[3] < size {
            return Err(Error::dim("avg_pool2d", &xs, &[size, size]));
        }
        let (oh, ow) = (xs[2] / size, xs[3] / size);
        let planes = xs[0] * xs[1];
        let (h, w) = (xs[2], xs[3]);
        let norm = T::one() / T::from_usize(size * size).unwrap();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let plane = &xv[p * h * w..(p + 1) * h * w];
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = T::zero();
                    for di in 0..size {
                        for dj in 0..size {
                            acc = acc + plane[(oi * size + di) * w + oj * size + dj];
                        }
                    }
                    out.push(acc * norm);
                }
            }
        }
        let value = Tensor::new(vec![xs[0], xs[1], oh, ow], out)?;
        Ok(self.push(Op::AvgPool2d { x, size }, value))
    }

    /// Mean over the spatial axes: `B×C×H×W → B×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::dim("global_avg_pool", &xs, &[0, 0, 0, 0]));
        }
        let hw = xs[2] * xs[3];
        let norm = T::from_usize(hw).unwrap();
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) / norm)
            .collect();
        let value = Tensor::new(vec![xs[0], xs[1]], out)?;
        Ok(self.push(Op::GlobalAvgPool { x }, value))
    }

    /// Max over the spatial axes: `B×C×H×W → B×C`. Ties route to the first maximum.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::dim("global_max_pool", &xs, &[0, 0, 0, 0]));
        }
        let hw = xs[2] * xs[3];
        let mut argmax = Vec::with_capacity(xs[0] * xs[1]);
        let mut out = Vec::with_capacity(xs[0] * xs[1]);
        for (p, plane) in self.value(x).data().chunks(hw).enumerate() {
            let mut best = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = i;
                }
            }
            argmax.push(p * hw + best);
            out.push(plane[best]);
        }
        let value = Tensor::new(vec![xs[0], xs[1]], out)?;
        Ok(self.push(Op::GlobalMaxPool { x, argmax }, value))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(T) -> T) -> Result<Var> {
        let src = self.value(x);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect())?;
        Ok(self.push(op, value))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu { x }, |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid { x }, |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let c = T::from_f64_lossy(factor);
        self.map(x, Op::Scale { x, factor }, |v| v * c)
    }

    /// Identity forward; the backward pass scales the upstream gradient by the
    /// setting's multiplier.
    pub fn grad_reversal(&mut self, x: Var, setting: GrlSetting) -> Result<Var> {
        let multiplier = setting.multiplier();
        let input = &self.nodes[x.0].value;
        match &mut self.reversal {
            ReversalMode::Identity => {}
            ReversalMode::Record(anchors) => anchors.push(input.clone()),
            ReversalMode::Anchored { anchors, next } => {
                let anchor = anchors.get(*next).ok_or_else(|| {
                    Error::Contract("more reversal nodes than recorded anchors".into())
                })?;
                if anchor.shape() != input.shape() {
                    return Err(Error::dim("grad_reversal anchor", anchor.shape(), input.shape()));
                }
                *next += 1;
                let m = T::from_f64_lossy(multiplier);
                let rest = T::one() - m;
                let data = input
                    .data()
                    .iter()
                    .zip(anchor.data())
                    .map(|(&v, &a)| m * v + rest * a)
                    .collect();
                let value = Tensor::new(anchor.shape().to_vec(), data)?;
                return Ok(self.push(Op::GradReversal { x, multiplier }, value));
            }
        }
        self.map(x, Op::GradReversal { x, multiplier }, |v| v)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Result<Var> {
        let name = op.kind().name();
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(name, self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add { a, b }, |p, q| p + q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul { a, b }, |p, q| p * q)
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {xs:?}"
            )));
        }
        let src = self.value(x);
        if !src.all_finite() {
            return Err(Error::NumericInput { op: "softmax" });
        }
        let (outer, dim, inner) = axis_split(&xs, axis);
        let xv = src.data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * dim + j) * inner + i;
                let max = (0..dim).fold(T::neg_infinity(), |m, j| m.max(xv[at(j)]));
                let mut sum = T::zero();
                for j in 0..dim {
                    let e = (xv[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum = sum + e;
                }
                for j in 0..dim {
                    out[at(j)] = out[at(j)] / sum;
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(Op::Softmax { x, axis }, value))
    }

    /// Concatenates tensors along the leading (batch) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows needs at least one input".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let ps = self.shape(p);
            if ps[1..] != tail[..] {
                return Err(Error::dim("concat_rows", self.shape(*first), ps));
            }
            rows += ps[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            value,
        ))
    }

    /// Averages consecutive groups of `group` rows: `N×… → (N/group)×…`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if group == 0 || xs[0] % group != 0 {
            return Err(Error::Contract(format!(
                "group_mean: {} rows not divisible into groups of {group}",
                xs[0]
            )));
        }
        let row: usize = xs[1..].iter().product();
        let norm = T::from_usize(group).unwrap();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len() / group);
        for chunk in xv.chunks(row * group) {
            for j in 0..row {
                let sum = (0..group).fold(T::zero(), |a, r| a + chunk[r * row + j]);
                out.push(sum / norm);
            }
        }
        let mut shape = xs;
        shape[0] /= group;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::GroupMean { x, group }, value))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        Ok(self.push(Op::Sum { x }, Tensor::scalar(s)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let s = src.data().iter().fold(T::zero(), |a, &v| a + v);
        let m = s / T::from_usize(src.len()).unwrap();
        Ok(self.push(Op::Mean { x }, Tensor::scalar(m)))
    }

    /// `1 − mean_k ccc(pred[:,k], target[:,k])` over a `B×K` batch, population moments.
    pub fn ccc_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (ps, ts) = (self.shape(pred), self.shape(target));
        if ps.len() != 2 || ps != ts {
            return Err(Error::dim("ccc_loss", ps, ts));
        }
        if ps[0] < 2 {
            return Err(Error::Contract(format!(
                "ccc_loss needs a batch of at least 2, got {}",
                ps[0]
            )));
        }
        let cols = ps[1];
        let stats = ccc_columns(self.value(pred).data(), self.value(target).data(), cols);
        let mean_ccc = stats.iter().map(|s| s.ccc).sum::<f64>() / cols as f64;
        let value = Tensor::scalar(T::from_f64_lossy(1.0 - mean_ccc));
        Ok(self.push(Op::CccLoss { pred, target }, value))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::dim("cross_entropy", ls, &[labels.len()]));
        }
        let classes = ls[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let lv = self.value(logits).data();
        let mut total = 0.0;
        for (row, &label) in lv.chunks(classes).zip(labels) {
            let row: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap()).collect();
            total += log_sum_exp(&row) - row[label];
        }
        let value = Tensor::scalar(T::from_f64_lossy(total / labels.len() as f64));
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            value,
        ))
    }

    /// Reverse-mode sweep from a scalar loss. Nodes are visited in reverse
    /// creation order, so accumulation order is fixed for a given graph.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if root.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(mut upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if self.fault == Some(node.op.kind()) {
                upstream.iter_mut().for_each(|g| *g = -*g);
            }
            self.propagate(node, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        macro_rules! slot {
            ($v:expr) => {{
                let len = self.nodes[$v.0].value.len();
                grads[$v.0].get_or_insert_with(|| vec![T::zero(); len])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (rows, inner) = (self.shape(*x)[0], self.shape(*x)[1]);
                let cols = self.shape(*w)[1];
                if needs(*x) {
                    let wv = val(*w);
                    T::gemm(
                        rows,
                        cols,
                        inner,
                        g,
                        (cols as isize, 1),
                        wv,
                        (1, cols as isize),
                        T::one(),
                        slot!(x),
                        (inner as isize, 1),
                    );
                }
                if needs(*w) {
                    let xv = val(*x);
                    T::gemm(
                        inner,
                        rows,
                        cols,
                        xv,
                        (1, inner as isize),
                        g,
                        (cols as isize, 1),
                        T::one(),
                        slot!(w),
                        (cols as isize, 1),
                    );
                }
                if needs(*b) {
                    let db = slot!(b);
                    for row in g.chunks(cols) {
                        add_into(db, row);
                    }
                }
            }
            Op::Conv2d { x, k, geom } => {
                let batch = self.shape(*x)[0];
                let filters = self.shape(*k)[0];
                let (rows, ohw) = (geom.col_rows(), geom.col_cols());
                let item = geom.channels * geom.height * geom.width;
                let (xv, kv) = (val(*x), val(*k));
                let mut col = vec![T::zero(); rows * ohw];
                let mut dcol = vec![T::zero(); rows * ohw];
                for bi in 0..batch {
                    let gb = &g[bi * filters * ohw..(bi + 1) * filters * ohw];
                    if needs(*k) {
                        im2col(&xv[bi * item..(bi + 1) * item], geom, &mut col);
                        T::gemm(
                            filters,
                            ohw,
                            rows,
                            gb,
                            (ohw as isize, 1),
                            &col,
                            (1, ohw as isize),
                            T::one(),
                            slot!(k),
                            (rows as isize, 1),
                        );
                    }
                    if needs(*x) {
                        T::gemm(
                            rows,
                            filters,
                            ohw,
                            kv,
                            (1, rows as isize),
                            gb,
                            (ohw as isize, 1),
                            T::zero(),
                            &mut dcol,
                            (ohw as isize, 1),
                        );
                        let dx = slot!(x);
                        col2im_add(&dcol, geom, &mut dx[bi * item..(bi + 1) * item]);
                    }
                }
            }
            Op::ChannelAffine { x, scale, shift } => {
                let xs = self.shape(*x);
                let channels = xs[1];
                let inner: usize = xs[2..].iter().product();
                let channel_of = |i: usize| (i / inner) % channels;
                if needs(*x) {
                    let sv = val(*scale);
                    let dx = slot!(x);
                    for (i, (d, &gi)) in dx.iter_mut().zip(g).enumerate() {
                        *d = *d + gi * sv[channel_of(i)];
                    }
                }
                if needs(*scale) {
                    let xv = val(*x);
                    let ds = slot!(scale);
                    for (i, (&gi, &xi)) in g.iter().zip(xv).enumerate() {
                        let c = channel_of(i);
                        ds[c] = ds[c] + gi * xi;
                    }
                }
                if needs(*shift) {
                    let dt = slot!(shift);
                    for (i, &gi) in g.iter().enumerate() {
                        let c = channel_of(i);
                        dt[c] = dt[c] + gi;
                    }
                }
            }
            Op::AvgPool2d { x, size } => {
                if needs(*x) {
                    let xs = self.shape(*x);
                    let (h, w) = (xs[2], xs[3]);
                    let (oh, ow) = (h / size, w / size);
                    let norm = T::one() / T::from_usize(size * size).unwrap();
                    let dx = slot!(x);
                    for (p, gp) in g.chunks(oh * ow).enumerate() {
                        let plane = &mut dx[p * h * w..(p + 1) * h * w];
                        for oi in 0..oh {
                            for oj in 0..ow {
                                let share = gp[oi * ow + oj] * norm;
                                for di in 0..*size {
                                    for dj in 0..*size {
                                        let at = (oi * size + di) * w + oj * size + dj;
                                        plane[at] = plane[at] + share;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                if needs(*x) {
                    let xs = self.shape(*x);
                    let hw = xs[2] * xs[3];
                    let norm = T::from_usize(hw).unwrap();
                    let dx = slot!(x);
                    for (plane, &gp) in dx.chunks_mut(hw).zip(g) {
                        let share = gp / norm;
                        plane.iter_mut().for_each(|d| *d = *d + share);
                    }
                }
            }
            Op::GlobalMaxPool { x, argmax } => {
                if needs(*x) {
                    let dx = slot!(x);
                    for (&at, &gp) in argmax.iter().zip(g) {
                        dx[at] = dx[at] + gp;
                    }
                }
            }
            Op::Relu { x } => {
                if needs(*x) {
                    let xv = val(*x);
                    let dx = slot!(x);
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        if xi > T::zero() {
                            *d = *d + gi;
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                if needs(*x) {
                    let yv = node.value.data();
                    let dx = slot!(x);
                    for ((d, &gi), &y) in dx.iter_mut().zip(g).zip(yv) {
                        *d = *d + gi * y * (T::one() - y);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if needs(*v) {
                        add_into(slot!(v), g);
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(a, b), (b, a)] {
                    if needs(*v) {
                        let ov = val(*other);
                        let dv = slot!(v);
                        for ((d, &gi), &o) in dv.iter_mut().zip(g).zip(ov) {
                            *d = *d + gi * o;
                        }
                    }
                }
            }
            Op::Scale { x, factor } | Op::GradReversal { x, multiplier: factor } => {
                if needs(*x) {
                    let c = T::from_f64_lossy(*factor);
                    let dx = slot!(x);
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d = *d + gi * c;
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if needs(*x) {
                    let (outer, dim, inner) = axis_split(node.value.shape(), *axis);
                    let yv = node.value.data();
                    let dx = slot!(x);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * dim + j) * inner + i;
                            let dot = (0..dim).fold(T::zero(), |a, j| a + g[at(j)] * yv[at(j)]);
                            for j in 0..dim {
                                dx[at(j)] = dx[at(j)] + yv[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    if needs(*p) {
                        add_into(slot!(p), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::GroupMean { x, group } => {
                if needs(*x) {
                    let row: usize = node.value.shape()[1..].iter().product();
                    let norm = T::from_usize(*group).unwrap();
                    let dx = slot!(x);
                    for (n, chunk) in dx.chunks_mut(row * group).enumerate() {
                        let gr = &g[n * row..(n + 1) * row];
                        for r in 0..*group {
                            for j in 0..row {
                                chunk[r * row + j] = chunk[r * row + j] + gr[j] / norm;
                            }
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if needs(*x) {
                    let dx = slot!(x);
                    dx.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Mean { x } => {
                if needs(*x) {
                    let dx = slot!(x);
                    let share = g[0] / T::from_usize(dx.len()).unwrap();
                    dx.iter_mut().for_each(|d| *d = *d + share);
                }
            }
            Op::CccLoss { pred, target } => {
                let cols = self.shape(*pred)[1];
                let (pv, tv) = (val(*pred), val(*target));
                let stats = ccc_columns(pv, tv, cols);
                let upstream = g[0].to_f64().unwrap();
                let rows = pv.len() / cols;
                let n = rows as f64;
                // d(1 − mean ccc)/d p[i,k] for each column; t's rule is the mirror image.
                let column_grad = |s: &CccStats, own: f64, own_mean: f64, other: f64, other_mean: f64| {
                    if s.denom == 0.0 {
                        return 0.0;
                    }
                    let dcov = (other - other_mean) / n;
                    let ddenom = 2.0 * (own - own_mean) / n + 2.0 * (own_mean - other_mean) / n;
                    let dccc = (2.0 * dcov * s.denom - 2.0 * s.cov * ddenom) / (s.denom * s.denom);
                    -dccc / cols as f64 * upstream
                };
                for (v, flip) in [(pred, false), (target, true)] {
                    if !needs(*v) {
                        continue;
                    }
                    let dv = slot!(v);
                    for r in 0..rows {
                        for (k, s) in stats.iter().enumerate() {
                            let at = r * cols + k;
                            let (p, t) = (pv[at].to_f64().unwrap(), tv[at].to_f64().unwrap());
                            let d = if flip {
                                column_grad(s, t, s.mean_t, p, s.mean_p)
                            } else {
                                column_grad(s, p, s.mean_p, t, s.mean_t)
                            };
                            dv[at] = dv[at] + T::from_f64_lossy(d);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels } => {
                if needs(*logits) {
                    let classes = self.shape(*logits)[1];
                    let lv = val(*logits);
                    let scale = g[0].to_f64().unwrap() / labels.len() as f64;
                    let dl = slot!(logits);
                    for (r, &label) in labels.iter().enumerate() {
                        let row: Vec<f64> = lv[r * classes..(r + 1) * classes]
                            .iter()
                            .map(|v| v.to_f64().unwrap())
                            .collect();
                        let lse = log_sum_exp(&row);
                        for (c, &z) in row.iter().enumerate() {
                            let p = (z - lse).exp() - if c == label { 1.0 } else { 0.0 };
                            let at = r * classes + c;
                            dl[at] = dl[at] + T::from_f64_lossy(p * scale);
                        }
                    }
                }
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

struct CccStats {
    mean_p: f64,
    mean_t: f64,
    cov: f64,
    denom: f64,
    ccc: f64,
}

fn ccc_columns<T: Scalar>(pred: &[T], target: &[T], cols: usize) -> Vec<CccStats> {
    let rows = pred.len() / cols;
    let n = rows as f64;
    (0..cols)
        .map(|k| {
            let p = |r: usize| pred[r * cols + k].to_f64().unwrap();
            let t = |r: usize| target[r * cols + k].to_f64().unwrap();
            let mean_p = (0..rows).map(p).sum::<f64>() / n;
            let mean_t = (0..rows).map(t).sum::<f64>() / n;
            let mut var_p = 0.0;
            let mut var_t = 0.0;
            let mut cov = 0.0;
            for r in 0..rows {
                let (dp, dt) = (p(r) - mean_p, t(r) - mean_t);
                var_p += dp * dp;
                var_t += dt * dt;
                cov += dp * dt;
            }
            let (var_p, var_t, cov) = (var_p / n, var_t / n, cov / n);
            let gap = mean_p - mean_t;
            let denom = var_p + var_t + gap * gap;
            let ccc = if denom == 0.0 { 1.0 } else { 2.0 * cov / denom };
            CccStats {
                mean_p,
                mean_t,
                cov,
                denom,
                ccc,
            }
        })
        .collect()
}
