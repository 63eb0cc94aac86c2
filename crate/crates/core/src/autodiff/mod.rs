//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is an append-only list of nodes; insertion order is a
//! topological order, so [`Tape::backward`] walks the nodes in reverse
//! exactly once. The operator set is the one the segmentation pipeline
//! needs: 3D (de)convolutions, batch norm, linear layers, pointwise
//! nonlinearities, channel softmax, broadcasting arithmetic, row gathers
//! and reductions. Larger fused kernels (the fusion pass, the loss) plug in
//! through [`CustomOp`].
//!
//! Volume activations are channel-last `[B, D, H, W, C]` tensors.

pub mod conv;
pub mod gemm;
pub mod gradcheck;
pub mod params;
pub mod suite;

use std::fmt;

use conv::{ConvGeom, DeconvGeom};
use gemm::{gemm, Mat};

use crate::error::{Error, Result};
use crate::volgrid::Dims;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use params::{BoundParams, ParamSet};

/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in the exponential average.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 8 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch { op: "tensor", lhs: shape, rhs: vec![data.len()] });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Extent of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        let k = self.last_dim();
        if k == 0 {
            0
        } else {
            self.data.len() / k
        }
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Spatial dims of a `[B, D, H, W, C]` tensor.
    pub fn volume_dims(&self) -> Option<(usize, Dims, usize)> {
        match self.shape[..] {
            [b, d, h, w, c] => Some((b, Dims::new(d, h, w), c)),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fused operator with a hand-written backward pass.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients w.r.t. each input. Entries for inputs with `needs[i] == false`
    /// may be `None`; returned vectors must match the input's element count.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    /// `b` has the extent of `a`'s last axis and repeats across rows.
    LastAxis(usize),
    /// `b` holds one value per row of `a`.
    PerRow(usize),
}

impl Bcast {
    fn resolve(a: &[usize], b: &[usize]) -> Option<Self> {
        if a == b {
            return Some(Bcast::Same);
        }
        if b.iter().product::<usize>() == 1 {
            return Some(Bcast::Scalar);
        }
        let k = a.last().copied()?;
        if b == [k] || (b.len() == a.len() && b[..b.len() - 1].iter().all(|&e| e == 1) && b[b.len() - 1] == k) {
            return Some(Bcast::LastAxis(k));
        }
        if b.len() == a.len() && b[..b.len() - 1] == a[..a.len() - 1] && b[b.len() - 1] == 1 {
            return Some(Bcast::PerRow(k));
        }
        None
    }

    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::LastAxis(k) => i % k,
            Bcast::PerRow(k) => i / k,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    Binary(Binary, NodeId, NodeId, Bcast),
    ScaleConst(NodeId, f64),
    Relu(NodeId),
    Softplus(NodeId),
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Conv3d { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom },
    Deconv3d { x: NodeId, w: NodeId, b: Option<NodeId>, geom: DeconvGeom },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    ConcatChannels(NodeId, NodeId),
    Softmax(NodeId),
    ReduceSum(NodeId),
    SumRows(NodeId),
    GatherRows(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    Reshape(NodeId),
    Custom(Box<dyn CustomOp>, Vec<NodeId>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(Binary::Add, ..) => "add",
            Op::Binary(Binary::Sub, ..) => "sub",
            Op::Binary(Binary::Mul, ..) => "mul",
            Op::Binary(Binary::Div, ..) => "div",
            Op::ScaleConst(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::Linear { .. } => "linear",
            Op::Conv3d { .. } => "conv3d",
            Op::Deconv3d { .. } => "deconv3d",
            Op::BatchNorm { .. } => "batchnorm3d",
            Op::ConcatChannels(..) => "concat_channels",
            Op::Softmax(_) => "channel_softmax",
            Op::ReduceSum(_) => "reduce_sum",
            Op::SumRows(_) => "sum_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::Reshape(_) => "reshape",
            Op::Custom(op, _) => op.name(),
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Binary(_, a, b, _) => vec![*a, *b],
            Op::ScaleConst(x, _) | Op::Relu(x) | Op::Softplus(x) | Op::Softmax(x) => vec![*x],
            Op::ReduceSum(x) | Op::SumRows(x) | Op::GatherRows(x, _) | Op::Reshape(x) => vec![*x],
            Op::Linear { x, w, b } | Op::Conv3d { x, w, b, .. } | Op::Deconv3d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatChannels(a, b) => vec![*a, *b],
            Op::ConcatRows(v) | Op::Custom(_, v) => v.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased per-channel variance, used for running estimates.
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let requires_grad = match &op {
            Op::Leaf => false,
            other => other.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node { value, grad: Vec::new(), op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.push(value, Op::Leaf);
        self.nodes[id.0].requires_grad = true;
        id
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    /// Gradient of the last backward pass; zeros when the node was not reached.
    pub fn grad(&self, id: NodeId) -> Vec<f64> {
        let node = &self.nodes[id.0];
        if node.grad.is_empty() {
            vec![0.0; node.value.numel()]
        } else {
            node.grad.clone()
        }
    }

    fn binary(&mut self, kind: Binary, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let bc = Bcast::resolve(&av.shape, &bv.shape).ok_or_else(|| {
            mismatch(
                match kind {
                    Binary::Add => "add",
                    Binary::Sub => "sub",
                    Binary::Mul => "mul",
                    Binary::Div => "div",
                },
                &av.shape,
                &bv.shape,
            )
        })?;
        let bd = &bv.data;
        let data: Vec<f64> = av
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bd[bc.index(i)];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        let value = Tensor { shape: av.shape.clone(), data };
        Ok(self.push(value, Op::Binary(kind, a, b, bc)))
    }

    /// Elementwise `a + b`; `b` may broadcast as a scalar, along the last axis, or per row.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Div, a, b)
    }

    /// `s * x` for a scalar-shaped node `s`.
    pub fn scalar_mul(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.nodes[s.0].value.numel() != 1 {
            return Err(mismatch("scalar_mul", &self.nodes[x.0].value.shape, &self.nodes[s.0].value.shape));
        }
        self.binary(Binary::Mul, x, s)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[x.0].value;
        let value = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|a| a * c).collect() };
        self.push(value, Op::ScaleConst(x, c))
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let value = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|&a| a.max(0.0)).collect() };
        self.push(value, Op::Relu(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let value = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|&a| softplus(a)).collect() };
        self.push(value, Op::Softplus(x))
    }

    /// `x W + b` over the last axis; `W` is `[Fin, Fout]`, `b` is `[Fout]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if wv.shape.len() != 2 || xv.last_dim() != wv.shape[0] {
            return Err(mismatch("linear", &xv.shape, &wv.shape));
        }
        let (rows, fin, fout) = (xv.rows(), wv.shape[0], wv.shape[1]);
        let mut data = vec![0.0; rows * fout];
        if let Some(b) = b {
            let bv = &self.nodes[b.0].value;
            if bv.numel() != fout {
                return Err(mismatch("linear bias", &wv.shape, &bv.shape));
            }
            for row in data.chunks_exact_mut(fout) {
                row.copy_from_slice(&bv.data);
            }
        }
        gemm(Mat::new(&xv.data, rows, fin), Mat::new(&wv.data, fin, fout), &mut data, 1.0);
        let mut shape = xv.shape.clone();
        *shape.last_mut().unwrap() = fout;
        Ok(self.push(Tensor { shape, data }, Op::Linear { x, w, b }))
    }

    /// 3D convolution with cubic kernel `[k, k, k, Cin, Cout]`, zero padding `pad`.
    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> Result<NodeId> {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (batch, input, cin) = xv.volume_dims().ok_or_else(|| mismatch("conv3d", &xv.shape, &wv.shape))?;
        let ok = wv.shape.len() == 5
            && wv.shape[0] == wv.shape[1]
            && wv.shape[1] == wv.shape[2]
            && wv.shape[3] == cin
            && stride >= 1;
        if !ok {
            return Err(mismatch("conv3d", &xv.shape, &wv.shape));
        }
        let geom = ConvGeom { batch, input, cin, cout: wv.shape[4], kernel: wv.shape[0], stride, pad };
        let out = geom.output().ok_or_else(|| mismatch("conv3d", &xv.shape, &wv.shape))?;
        let bias = match b {
            Some(b) => {
                let bv = &self.nodes[b.0].value;
                if bv.numel() != geom.cout {
                    return Err(mismatch("conv3d bias", &wv.shape, &bv.shape));
                }
                Some(bv.data.as_slice())
            }
            None => None,
        };
        let data = conv::conv3d_forward(&geom, &xv.data, &wv.data, bias);
        let shape = vec![batch, out.d, out.h, out.w, geom.cout];
        Ok(self.push(Tensor { shape, data }, Op::Conv3d { x, w, b, geom }))
    }

    /// Stride-2 transposed convolution with kernel `[2, 2, 2, Cin, Cout]`.
    pub fn deconv3d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (batch, input, cin) = xv.volume_dims().ok_or_else(|| mismatch("deconv3d", &xv.shape, &wv.shape))?;
        if wv.shape.len() != 5 || wv.shape[..3] != [2, 2, 2] || wv.shape[3] != cin {
            return Err(mismatch("deconv3d", &xv.shape, &wv.shape));
        }
        let geom = DeconvGeom { batch, input, cin, cout: wv.shape[4] };
        let bias = match b {
            Some(b) => {
                let bv = &self.nodes[b.0].value;
                if bv.numel() != geom.cout {
                    return Err(mismatch("deconv3d bias", &wv.shape, &bv.shape));
                }
                Some(bv.data.as_slice())
            }
            None => None,
        };
        let data = conv::deconv3d_forward(&geom, &xv.data, &wv.data, bias);
        let out = geom.output();
        let shape = vec![batch, out.d, out.h, out.w, geom.cout];
        Ok(self.push(Tensor { shape, data }, Op::Deconv3d { x, w, b, geom }))
    }

    fn bn_check(&self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<usize> {
        let xv = &self.nodes[x.0].value;
        let c = xv.last_dim();
        for p in [gamma, beta] {
            if self.nodes[p.0].value.numel() != c {
                return Err(mismatch("batchnorm3d", &xv.shape, &self.nodes[p.0].value.shape));
            }
        }
        Ok(c)
    }

    /// Training-mode batch norm: per-channel statistics over batch and space.
    pub fn batchnorm3d_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<(NodeId, BatchStats)> {
        let c = self.bn_check(x, gamma, beta)?;
        let xv = &self.nodes[x.0].value;
        let m = xv.rows();
        if m < 2 {
            return Err(Error::ShapeMismatch { op: "batchnorm3d (needs >= 2 elements per channel)", lhs: xv.shape.clone(), rhs: vec![m] });
        }
        let mut mean = vec![0.0; c];
        for row in xv.data.chunks_exact(c) {
            for (s, v) in mean.iter_mut().zip(row) {
                *s += v;
            }
        }
        mean.iter_mut().for_each(|s| *s /= m as f64);
        let mut var = vec![0.0; c];
        for row in xv.data.chunks_exact(c) {
            for ((s, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / m as f64 + BN_EPS).sqrt()).collect();
        let stats = BatchStats { mean: mean.clone(), var: var.iter().map(|v| v / (m - 1) as f64).collect() };
        let id = self.bn_apply(x, gamma, beta, &mean, inv_std, true);
        Ok((id, stats))
    }

    /// Inference-mode batch norm with fixed running statistics.
    pub fn batchnorm3d_eval(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, mean: &[f64], var: &[f64]) -> Result<NodeId> {
        let c = self.bn_check(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(mismatch("batchnorm3d running stats", &[c], &[mean.len(), var.len()]));
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        Ok(self.bn_apply(x, gamma, beta, mean, inv_std, false))
    }

    fn bn_apply(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, mean: &[f64], inv_std: Vec<f64>, batch_stats: bool) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (g, b) = (&self.nodes[gamma.0].value.data, &self.nodes[beta.0].value.data);
        let c = mean.len();
        let mut xhat = vec![0.0; xv.numel()];
        let mut data = vec![0.0; xv.numel()];
        for ((xr, hr), yr) in xv.data.chunks_exact(c).zip(xhat.chunks_exact_mut(c)).zip(data.chunks_exact_mut(c)) {
            for j in 0..c {
                let h = (xr[j] - mean[j]) * inv_std[j];
                hr[j] = h;
                yr[j] = g[j] * h + b[j];
            }
        }
        let value = Tensor { shape: xv.shape.clone(), data };
        self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats })
    }

    /// Concatenation along the last axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let n = av.shape.len();
        if n == 0 || bv.shape.len() != n || av.shape[..n - 1] != bv.shape[..n - 1] {
            return Err(mismatch("concat_channels", &av.shape, &bv.shape));
        }
        let (ka, kb) = (av.last_dim(), bv.last_dim());
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        for (ra, rb) in av.data.chunks_exact(ka).zip(bv.data.chunks_exact(kb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = av.shape.clone();
        shape[n - 1] = ka + kb;
        Ok(self.push(Tensor { shape, data }, Op::ConcatChannels(a, b)))
    }

    /// Softmax over the last axis.
    pub fn channel_softmax(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let mut data = v.data.clone();
        for row in data.chunks_exact_mut(v.last_dim()) {
            crate::volgrid::softmax_in_place(row);
        }
        let value = Tensor { shape: v.shape.clone(), data };
        self.push(value, Op::Softmax(x))
    }

    /// Sum of all elements, as a scalar.
    pub fn reduce_sum(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::ReduceSum(x))
    }

    /// Column sums of the `[rows, K]` view, shaped `[1, K]`.
    pub fn sum_rows(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let k = v.last_dim();
        let mut data = vec![0.0; k];
        for row in v.data.chunks_exact(k) {
            for (s, a) in data.iter_mut().zip(row) {
                *s += a;
            }
        }
        self.push(Tensor { shape: vec![1, k], data }, Op::SumRows(x))
    }

    /// Selects rows of the `[rows, K]` view; indices may repeat.
    pub fn gather_rows(&mut self, x: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let k = v.last_dim();
        if let Some(&bad) = rows.iter().find(|&&r| r >= v.rows()) {
            return Err(mismatch("gather_rows", &v.shape, &[bad]));
        }
        let mut data = Vec::with_capacity(rows.len() * k);
        for &r in &rows {
            data.extend_from_slice(&v.data[r * k..(r + 1) * k]);
        }
        let shape = vec![rows.len(), k];
        Ok(self.push(Tensor { shape, data }, Op::GatherRows(x, rows)))
    }

    /// Stacks `[r_i, K]` views into `[sum r_i, K]`.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let k = parts.first().map(|p| self.nodes[p.0].value.last_dim()).unwrap_or(0);
        let mut data = Vec::new();
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.last_dim() != k {
                return Err(mismatch("concat_rows", &[k], &v.shape));
            }
            data.extend_from_slice(&v.data);
        }
        let shape = vec![data.len() / k.max(1), k];
        Ok(self.push(Tensor { shape, data }, Op::ConcatRows(parts.to_vec())))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != v.numel() {
            return Err(mismatch("reshape", &v.shape, &shape));
        }
        let value = Tensor { shape, data: v.data.clone() };
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Records a fused operator whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[NodeId], output: Tensor, op: Box<dyn CustomOp>) -> NodeId {
        self.push(output, Op::Custom(op, inputs.to_vec()))
    }

    /// Backpropagates from a scalar node. Gradients of earlier passes are cleared.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let shape = &self.nodes[loss.0].value.shape;
        if self.nodes[loss.0].value.numel() != 1 || shape.len() > 1 {
            return Err(Error::NonScalarLoss(shape.clone()));
        }
        for n in &mut self.nodes {
            n.grad = Vec::new();
        }
        self.nodes[loss.0].grad = vec![1.0];
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_empty() || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = std::mem::take(&mut self.nodes[i].grad);
            let contributions = self.node_backward(i, &g);
            self.nodes[i].grad = g;
            for (id, contrib) in contributions {
                let node = &mut self.nodes[id.0];
                if node.grad.is_empty() {
                    node.grad = contrib;
                } else {
                    for (a, b) in node.grad.iter_mut().zip(&contrib) {
                        *a += b;
                    }
                }
            }
        }
        Ok(())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn node_backward(&self, i: usize, g: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |id: NodeId| &self.nodes[id.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b, bc) => {
                let (av, bv) = (&val(*a).data, &val(*b).data);
                if self.needs(*a) {
                    let ga = match kind {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => g.iter().enumerate().map(|(j, gj)| gj * bv[bc.index(j)]).collect(),
                        Binary::Div => g.iter().enumerate().map(|(j, gj)| gj / bv[bc.index(j)]).collect(),
                    };
                    out.push((*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; bv.len()];
                    for (j, gj) in g.iter().enumerate() {
                        let k = bc.index(j);
                        gb[k] += match kind {
                            Binary::Add => *gj,
                            Binary::Sub => -gj,
                            Binary::Mul => gj * av[j],
                            Binary::Div => -gj * node.value.data[j] / bv[k],
                        };
                    }
                    out.push((*b, gb));
                }
            }
            Op::ScaleConst(x, c) => out.push((*x, g.iter().map(|v| v * c).collect())),
            Op::Relu(x) => {
                let xv = &val(*x).data;
                out.push((*x, g.iter().zip(xv).map(|(gj, &v)| if v > 0.0 { *gj } else { 0.0 }).collect()));
            }
            Op::Softplus(x) => {
                let xv = &val(*x).data;
                out.push((*x, g.iter().zip(xv).map(|(gj, &v)| gj * sigmoid(v)).collect()));
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (rows, fin, fout) = (xv.rows(), wv.shape[0], wv.shape[1]);
                let gm = Mat::new(g, rows, fout);
                if self.needs(*x) {
                    let mut gx = vec![0.0; rows * fin];
                    gemm(gm, Mat::new(&wv.data, fin, fout).t(), &mut gx, 0.0);
                    out.push((*x, gx));
                }
                if self.needs(*w) {
                    let mut gw = vec![0.0; fin * fout];
                    gemm(Mat::new(&xv.data, rows, fin).t(), gm, &mut gw, 0.0);
                    out.push((*w, gw));
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    out.push((b, column_sums(g, fout)));
                }
            }
            Op::Conv3d { x, w, b, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                let mut gx = self.needs(*x).then(|| vec![0.0; xv.numel()]);
                let mut gw = self.needs(*w).then(|| vec![0.0; wv.numel()]);
                let mut gb = b.filter(|b| self.needs(*b)).map(|_| vec![0.0; geom.cout]);
                conv::conv3d_backward(geom, &xv.data, &wv.data, g, gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut());
                out.extend(gx.map(|v| (*x, v)));
                out.extend(gw.map(|v| (*w, v)));
                out.extend(gb.map(|v| (b.unwrap(), v)));
            }
            Op::Deconv3d { x, w, b, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                let mut gx = self.needs(*x).then(|| vec![0.0; xv.numel()]);
                let mut gw = self.needs(*w).then(|| vec![0.0; wv.numel()]);
                let mut gb = b.filter(|b| self.needs(*b)).map(|_| vec![0.0; geom.cout]);
                conv::deconv3d_backward(geom, &xv.data, &wv.data, g, gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut());
                out.extend(gx.map(|v| (*x, v)));
                out.extend(gw.map(|v| (*w, v)));
                out.extend(gb.map(|v| (b.unwrap(), v)));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let c = inv_std.len();
                let m = xhat.len() / c;
                let gam = &val(*gamma).data;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        sum_g[j] += gr[j];
                        sum_gx[j] += gr[j] * hr[j];
                    }
                }
                if self.needs(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for ((dst, gr), hr) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            dst[j] = if *batch_stats {
                                gam[j] * inv_std[j] * (gr[j] - sum_g[j] / m as f64 - hr[j] * sum_gx[j] / m as f64)
                            } else {
                                gam[j] * inv_std[j] * gr[j]
                            };
                        }
                    }
                    out.push((*x, gx));
                }
                if self.needs(*gamma) {
                    out.push((*gamma, sum_gx));
                }
                if self.needs(*beta) {
                    out.push((*beta, sum_g));
                }
            }
            Op::ConcatChannels(a, b) => {
                let (ka, kb) = (val(*a).last_dim(), val(*b).last_dim());
                let rows = g.len() / (ka + kb);
                if self.needs(*a) {
                    let mut ga = Vec::with_capacity(rows * ka);
                    for r in g.chunks_exact(ka + kb) {
                        ga.extend_from_slice(&r[..ka]);
                    }
                    out.push((*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = Vec::with_capacity(rows * kb);
                    for r in g.chunks_exact(ka + kb) {
                        gb.extend_from_slice(&r[ka..]);
                    }
                    out.push((*b, gb));
                }
            }
            Op::Softmax(x) => {
                let k = node.value.last_dim();
                let mut gx = vec![0.0; g.len()];
                for ((dst, gr), yr) in gx.chunks_exact_mut(k).zip(g.chunks_exact(k)).zip(node.value.data.chunks_exact(k)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        dst[j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*x, gx));
            }
            Op::ReduceSum(x) => out.push((*x, vec![g[0]; val(*x).numel()])),
            Op::SumRows(x) => {
                let xv = val(*x);
                let k = xv.last_dim();
                let mut gx = Vec::with_capacity(xv.numel());
                for _ in 0..xv.rows() {
                    gx.extend_from_slice(&g[..k]);
                }
                out.push((*x, gx));
            }
            Op::GatherRows(x, rows) => {
                let xv = val(*x);
                let k = xv.last_dim();
                let mut gx = vec![0.0; xv.numel()];
                for (r, gr) in rows.iter().zip(g.chunks_exact(k)) {
                    for (d, v) in gx[r * k..(r + 1) * k].iter_mut().zip(gr) {
                        *d += v;
                    }
                }
                out.push((*x, gx));
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let n = val(*p).numel();
                    if self.needs(*p) {
                        out.push((*p, g[at..at + n].to_vec()));
                    }
                    at += n;
                }
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Custom(op, inputs) => {
                let tensors: Vec<&Tensor> = inputs.iter().map(|id| val(*id)).collect();
                let needs: Vec<bool> = inputs.iter().map(|id| self.needs(*id)).collect();
                for ((id, grad), need) in inputs.iter().zip(op.backward(&tensors, &node.value, g, &needs)).zip(needs) {
                    if let (Some(grad), true) = (grad, need) {
                        out.push((*id, grad));
                    }
                }
            }
        }
        out
    }
}

pub(crate) fn column_sums(g: &[f64], k: usize) -> Vec<f64> {
    let mut s = vec![0.0; k];
    for row in g.chunks_exact(k) {
        for (a, b) in s.iter_mut().zip(row) {
            *a += b;
        }
    }
    s
}

#[cfg(test)]
mod tests;
