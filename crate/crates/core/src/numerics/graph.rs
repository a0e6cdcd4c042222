//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only arena: every operation evaluates eagerly,
//! stores its value, and records how to route gradients back to its inputs.
//! Because nodes are only ever appended, arena order is a topological order
//! and `backward` is a single reverse sweep.
//!
//! There is no implicit broadcasting. Shapes must match exactly except for
//! the explicit scalar ops ([`Graph::scale`], [`Graph::add_scalar`]).

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};

use super::linalg::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Norm floor used by [`Graph::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation families, used for reporting and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    Leaf,
    StopGradient,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Matmul,
    Linear,
    Conv2d,
    MaxPool2d,
    Relu,
    Sigmoid,
    Log,
    Exp,
    SmoothL1,
    Clamp,
    UpsampleNearest,
    BilinearSample,
    MeanGroups,
    Reshape,
    ConcatRows,
    Gather,
    L2Normalize,
    SumLast,
    Sum,
    Mean,
    Softmax,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OpKind::Leaf => "leaf",
            OpKind::StopGradient => "stop_gradient",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Matmul => "matmul",
            OpKind::Linear => "linear",
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool2d => "max_pool2d",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::SmoothL1 => "smooth_l1",
            OpKind::Clamp => "clamp",
            OpKind::UpsampleNearest => "upsample_nearest",
            OpKind::BilinearSample => "bilinear_sample",
            OpKind::MeanGroups => "mean_groups",
            OpKind::Reshape => "reshape",
            OpKind::ConcatRows => "concat_rows",
            OpKind::Gather => "gather",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::SumLast => "sum_last",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Softmax => "softmax",
        };
        f.write_str(name)
    }
}

impl OpKind {
    pub const ALL: [OpKind; 28] = [
        OpKind::Leaf,
        OpKind::StopGradient,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Matmul,
        OpKind::Linear,
        OpKind::Conv2d,
        OpKind::MaxPool2d,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Log,
        OpKind::Exp,
        OpKind::SmoothL1,
        OpKind::Clamp,
        OpKind::UpsampleNearest,
        OpKind::BilinearSample,
        OpKind::MeanGroups,
        OpKind::Reshape,
        OpKind::ConcatRows,
        OpKind::Gather,
        OpKind::L2Normalize,
        OpKind::SumLast,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Softmax,
    ];
}

impl std::str::FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        OpKind::ALL.into_iter().find(|k| k.to_string() == s).ok_or_else(|| format!("unknown op {s:?}"))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    StopGradient,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Matmul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec, cols: Vec<f64> },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    SmoothL1(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    UpsampleNearest { x: Var, factor: usize },
    BilinearSample { x: Var, taps: Vec<[(usize, f64); 4]> },
    MeanGroups { x: Var, group: usize },
    Reshape(Var),
    ConcatRows(Vec<Var>),
    Gather { x: Var, indices: Vec<usize> },
    L2Normalize(Var),
    SumLast(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::StopGradient => OpKind::StopGradient,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Matmul(..) => OpKind::Matmul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Log(_) => OpKind::Log,
            Op::Exp(_) => OpKind::Exp,
            Op::SmoothL1(_) => OpKind::SmoothL1,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::UpsampleNearest { .. } => OpKind::UpsampleNearest,
            Op::BilinearSample { .. } => OpKind::BilinearSample,
            Op::MeanGroups { .. } => OpKind::MeanGroups,
            Op::Reshape(_) => OpKind::Reshape,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::Gather { .. } => OpKind::Gather,
            Op::L2Normalize(_) => OpKind::L2Normalize,
            Op::SumLast(_) => OpKind::SumLast,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Softmax(_) => OpKind::Softmax,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Accumulated gradient of `var`, or `None` if no gradient reached it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, zeros if nothing flowed there.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

/// Computation graph. Single-threaded; independent graphs may live on
/// different threads.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    consumed: bool,
    fault: Option<OpKind>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, consumed: false, fault: None }
    }

    /// A graph that only evaluates: nothing requires gradients and no
    /// backward buffers are kept.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    /// Corrupts the backward rule of every `kind` node (gradients scaled by
    /// 1.5). Test fixture for the gradient checker.
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Distinct operation families recorded so far.
    pub fn op_kinds(&self) -> std::collections::BTreeSet<OpKind> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf (receives gradients unless the graph is inference-only).
    pub fn param(&mut self, t: Tensor) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Same value, no gradient flows back through it.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.nodes.push(Node { value, op: Op::StopGradient, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch { op, lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() });
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    /// Sum of scalar (one-element) tensors; empty input gives 0.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = terms.split_first() else {
            return Ok(self.constant(Tensor::scalar(0.0)));
        };
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(a, b), &[a, b]))
    }

    /// Fully connected layer: `x (n, in)`, `w (out, in)`, `b (out)` ->
    /// `x w^T + b`, shape `(n, out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch { op: "linear", lhs: sx, rhs: sw });
        }
        let (n, inp, out_dim) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(Error::ShapeMismatch { op: "linear bias", lhs: self.shape(b).to_vec(), rhs: vec![out_dim] });
            }
        }
        let mut out = vec![0.0; n * out_dim];
        gemm(n, inp, out_dim, self.data(x), false, self.data(w), true, &mut out, false);
        if let Some(b) = b {
            let bias = self.data(b).to_vec();
            for row in out.chunks_mut(out_dim) {
                row.iter_mut().zip(&bias).for_each(|(o, bb)| *o += bb);
            }
        }
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Tensor::new(vec![n, out_dim], out)?, Op::Linear { x, w, b }, &parents))
    }

    /// 2-D convolution of one `(C, H, W)` input with `(O, C, kh, kw)`
    /// weights and optional `(O)` bias, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[1] {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: sx, rhs: sw });
        }
        if stride == 0 {
            return Err(Error::InvalidShape { op: "conv2d", detail: "stride must be >= 1".into() });
        }
        let (c, h, wd) = (sx[0], sx[1], sx[2]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: sx, rhs: sw });
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::ShapeMismatch { op: "conv2d bias", lhs: self.shape(b).to_vec(), rhs: vec![o] });
            }
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom { c, h, w: wd, kh, kw, ho, wo, stride, pad };
        let cols = im2col(self.data(x), &geom);
        let mut out = vec![0.0; o * ho * wo];
        gemm(o, c * kh * kw, ho * wo, self.data(w), false, &cols, false, &mut out, false);
        if let Some(b) = b {
            let bias = self.data(b);
            for (plane, bb) in out.chunks_mut(ho * wo).zip(bias) {
                plane.iter_mut().for_each(|v| *v += bb);
            }
        }
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        let needs_cols = self.grad_enabled && parents.iter().any(|p| self.requires_grad(*p));
        let op = Op::Conv2d { x, w, b, spec: ConvSpec { stride, pad }, cols: if needs_cols { cols } else { Vec::new() } };
        Ok(self.push(Tensor::new(vec![o, ho, wo], out)?, op, &parents))
    }

    /// Max pooling over `(C, H, W)` with a square window, no padding.
    /// Ties resolve to the first maximum in scan order.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] < kernel || s[2] < kernel || kernel == 0 || stride == 0 {
            return Err(Error::InvalidShape { op: "max_pool2d", detail: format!("input {s:?}, kernel {kernel}, stride {stride}") });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let ho = (h - kernel) / stride + 1;
        let wo = (w - kernel) / stride + 1;
        let src = self.data(x);
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for di in 0..kernel {
                        for dj in 0..kernel {
                            let idx = ch * h * w + (i * stride + di) * w + j * stride + dj;
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        Ok(self.push(Tensor::new(vec![c, ho, wo], out)?, Op::MaxPool2d { x, argmax }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| a.max(0.0));
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map(x, sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.map(x, f64::ln);
        self.push(v, Op::Log(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.map(x, f64::exp);
        self.push(v, Op::Exp(x), &[x])
    }

    /// `0.5 x^2` for `|x| < 1`, else `|x| - 0.5`, element-wise.
    pub fn smooth_l1(&mut self, x: Var) -> Var {
        let v = self.map(x, smooth_l1);
        self.push(v, Op::SmoothL1(x), &[x])
    }

    /// Element-wise clamp; zero gradient where the bound is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.map(x, |a| a.clamp(lo, hi));
        self.push(v, Op::Clamp { x, lo, hi }, &[x])
    }

    /// Nearest-neighbour upsampling of `(C, H, W)` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || factor == 0 {
            return Err(Error::InvalidShape { op: "upsample_nearest", detail: format!("input {s:?}, factor {factor}") });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h * factor, w * factor);
        let src = self.data(x);
        let mut out = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    out.push(src[ch * h * w + (i / factor) * w + j / factor]);
                }
            }
        }
        Ok(self.push(Tensor::new(vec![c, oh, ow], out)?, Op::UpsampleNearest { x, factor }, &[x]))
    }

    /// Bilinear interpolation of a `(C, H, W)` map at `(y, x)` points given in
    /// lattice coordinates (cell `i` sits at `i`), clamped to the border.
    /// Output shape `(C, N)`. Differentiable with respect to the map.
    pub fn bilinear_sample(&mut self, x: Var, points: &[(f64, f64)]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] == 0 || s[2] == 0 {
            return Err(Error::InvalidShape { op: "bilinear_sample", detail: format!("input {s:?}") });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let taps: Vec<[(usize, f64); 4]> = points.iter().map(|&(py, px)| bilinear_taps(py, px, h, w)).collect();
        let src = self.data(x);
        let n = points.len();
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for (p, t) in taps.iter().enumerate() {
                out[ch * n + p] = t.iter().map(|&(idx, wt)| wt * plane[idx]).sum();
            }
        }
        Ok(self.push(Tensor::new(vec![c, n], out)?, Op::BilinearSample { x, taps }, &[x]))
    }

    /// Averages consecutive groups of `group` entries along the last axis.
    pub fn mean_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let last = *s.last().unwrap_or(&0);
        if group == 0 || !last.is_multiple_of(group) {
            return Err(Error::InvalidShape { op: "mean_groups", detail: format!("last axis {last} not divisible by {group}") });
        }
        let out: Vec<f64> = self.data(x).chunks(group).map(|g| g.iter().sum::<f64>() / group as f64).collect();
        let mut shape = s;
        *shape.last_mut().expect("non-empty") /= group;
        Ok(self.push(Tensor::new(shape, out)?, Op::MeanGroups { x, group }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Concatenates along axis 0; trailing dimensions must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidShape { op: "concat_rows", detail: "no inputs".into() });
        };
        let tail = self.shape(first).get(1..).unwrap_or(&[]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::ShapeMismatch { op: "concat_rows", lhs: self.shape(first).to_vec(), rhs: s.to_vec() });
            }
            rows += s[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Picks flat-indexed entries into a 1-D tensor.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidShape { op: "gather", detail: format!("index {bad} out of range for {n} elements") });
        }
        let src = self.data(x);
        let out: Vec<f64> = indices.iter().map(|&i| src[i]).collect();
        Ok(self.push(Tensor::vector(out), Op::Gather { x, indices: indices.to_vec() }, &[x]))
    }

    /// Divides each vector along the last axis by `max(norm, 1e-12)`.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let Some(&d) = s.last() else {
            return Err(Error::InvalidShape { op: "l2_normalize", detail: "scalar input".into() });
        };
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.data(x).chunks(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            out.extend(row.iter().map(|v| v / norm));
        }
        Ok(self.push(Tensor::new(s, out)?, Op::L2Normalize(x), &[x]))
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let Some(&d) = s.last() else {
            return Err(Error::InvalidShape { op: "sum_last", detail: "scalar input".into() });
        };
        let out: Vec<f64> = if d == 0 { Vec::new() } else { self.data(x).chunks(d).map(|r| r.iter().sum()).collect() };
        Ok(self.push(Tensor::new(s[..s.len() - 1].to_vec(), out)?, Op::SumLast(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let total: f64 = self.data(x).iter().sum();
        self.push(Tensor::scalar(total / n), Op::Mean(x), &[x])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let Some(&d) = s.last() else {
            return Err(Error::InvalidShape { op: "softmax", detail: "scalar input".into() });
        };
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.data(x).chunks(d) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            out.extend(e.iter().map(|v| v / z));
        }
        Ok(self.push(Tensor::new(s, out)?, Op::Softmax(x), &[x]))
    }

    /// Hash of every piecewise branch taken in this graph (relu signs,
    /// max-pool winners, smooth-L1 and clamp regimes). Two evaluations with
    /// equal signatures lie in the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(x) => {
                    i.hash(&mut h);
                    for v in self.data(*x) {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::SmoothL1(x) => {
                    i.hash(&mut h);
                    for v in self.data(*x) {
                        (v.abs() < 1.0).hash(&mut h);
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    i.hash(&mut h);
                    for v in self.data(*x) {
                        (v < lo).hash(&mut h);
                        (v > hi).hash(&mut h);
                    }
                }
                Op::MaxPool2d { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::L2Normalize(x) => {
                    i.hash(&mut h);
                    let d = *self.shape(*x).last().unwrap_or(&1);
                    for row in self.data(*x).chunks(d.max(1)) {
                        (row.iter().map(|v| v * v).sum::<f64>().sqrt() > NORM_EPS).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `loss`. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(mut g) = grads[idx].take() else { continue };
            if self.fault == Some(self.nodes[idx].op.kind()) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // only leaves keep their gradient
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        let numel = |v: &Var| self.nodes[v.0].value.numel();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(v) {
                        accumulate(&mut grads[v.0], g.len()).iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    accumulate(&mut grads[a.0], g.len()).iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if needs(b) {
                    accumulate(&mut grads[b.0], g.len()).iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    let other = self.data(*b);
                    let d = accumulate(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        d[i] += g[i] * other[i];
                    }
                }
                if needs(b) {
                    let other = self.data(*a);
                    let d = accumulate(&mut grads[b.0], g.len());
                    for i in 0..g.len() {
                        d[i] += g[i] * other[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if needs(a) {
                    accumulate(&mut grads[a.0], g.len()).iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if needs(a) {
                    accumulate(&mut grads[a.0], g.len()).iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if needs(a) {
                    let d = accumulate(&mut grads[a.0], m * k);
                    gemm(m, n, k, g, false, self.data(*b), true, d, true);
                }
                if needs(b) {
                    let d = accumulate(&mut grads[b.0], k * n);
                    gemm(k, m, n, self.data(*a), true, g, false, d, true);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, inp) = (self.shape(*x)[0], self.shape(*x)[1]);
                let out_dim = self.shape(*w)[0];
                if needs(x) {
                    let d = accumulate(&mut grads[x.0], n * inp);
                    gemm(n, out_dim, inp, g, false, self.data(*w), false, d, true);
                }
                if needs(w) {
                    let d = accumulate(&mut grads[w.0], out_dim * inp);
                    gemm(out_dim, n, inp, g, true, self.data(*x), false, d, true);
                }
                if let Some(b) = b.filter(|b| needs(b)) {
                    let d = accumulate(&mut grads[b.0], out_dim);
                    for row in g.chunks(out_dim) {
                        d.iter_mut().zip(row).for_each(|(dd, r)| *dd += r);
                    }
                }
            }
            Op::Conv2d { x, w, b, spec, cols } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let so = node.value.shape();
                let geom = ConvGeom {
                    c: sx[0],
                    h: sx[1],
                    w: sx[2],
                    kh: sw[2],
                    kw: sw[3],
                    ho: so[1],
                    wo: so[2],
                    stride: spec.stride,
                    pad: spec.pad,
                };
                let (o, ckk, hw) = (sw[0], sx[0] * sw[2] * sw[3], so[1] * so[2]);
                if needs(w) {
                    let d = accumulate(&mut grads[w.0], o * ckk);
                    gemm(o, hw, ckk, g, false, cols, true, d, true);
                }
                if let Some(b) = b.filter(|b| needs(b)) {
                    let d = accumulate(&mut grads[b.0], o);
                    for (dd, plane) in d.iter_mut().zip(g.chunks(hw)) {
                        *dd += plane.iter().sum::<f64>();
                    }
                }
                if needs(x) {
                    let mut dcols = vec![0.0; ckk * hw];
                    gemm(ckk, o, hw, self.data(*w), true, g, false, &mut dcols, false);
                    let d = accumulate(&mut grads[x.0], numel(x));
                    col2im(&dcols, &geom, d);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if needs(x) {
                    let d = accumulate(&mut grads[x.0], numel(x));
                    for (&src, gv) in argmax.iter().zip(g) {
                        d[src] += gv;
                    }
                }
            }
            Op::Relu(x) => {
                if needs(x) {
                    let input = self.data(*x);
                    let d = accumulate(&mut grads[x.0], g.len());
                    for i in 0..g.len() {
                        if input[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if needs(x) {
                    let y = node.value.data();
                    let d = accumulate(&mut grads[x.0], g.len());
                    for i in 0..g.len() {
                        d[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Log(x) => {
                if needs(x) {
                    let input = self.data(*x);
                    let d = accumulate(&mut grads[x.0], g.len());
                    for i in 0..g.len() {
                        d[i] += g[i] / input[i];
                    }
                }
            }
            Op::Exp(x) => {
                if needs(x) {
                    let y = node.value.data();
                    let d = accumulate(&mut grads[x.0], g.len());
                    for i in 0..g.len() {
                        d[i] += g[i] * y[i];
                    }
                }
            }
            Op::SmoothL1(x) => {
                if needs(x) {
                    let input = self.data(*x);
                    let d = accumulate(&mut grads[x.0], g.len());
                    for i in 0..g.len() {
                        let v = input[i];
                        d[i] += g[i] * if v.abs() < 1.0 { v } else { v.signum() };
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                if needs(x) {
                    let input = self.data(*x);
                    let d = accumulate(&mut grads[x.0], g.len());
                    for i in 0..g.len() {
                        if input[i] >= *lo && input[i] <= *hi {
                            d[i] += g[i];
                        }
                    }
                }
            }
            Op::UpsampleNearest { x, factor } => {
                if needs(x) {
                    let s = self.shape(*x);
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (oh, ow) = (h * factor, w * factor);
                    let d = accumulate(&mut grads[x.0], c * h * w);
                    for ch in 0..c {
                        for i in 0..oh {
                            for j in 0..ow {
                                d[ch * h * w + (i / factor) * w + j / factor] += g[ch * oh * ow + i * ow + j];
                            }
                        }
                    }
                }
            }
            Op::BilinearSample { x, taps } => {
                if needs(x) {
                    let s = self.shape(*x);
                    let plane = s[1] * s[2];
                    let n = taps.len();
                    let d = accumulate(&mut grads[x.0], s[0] * plane);
                    for ch in 0..s[0] {
                        for (p, t) in taps.iter().enumerate() {
                            let gv = g[ch * n + p];
                            for &(idx, wt) in t {
                                d[ch * plane + idx] += wt * gv;
                            }
                        }
                    }
                }
            }
            Op::MeanGroups { x, group } => {
                if needs(x) {
                    let d = accumulate(&mut grads[x.0], g.len() * group);
                    for (i, gv) in g.iter().enumerate() {
                        for k in 0..*group {
                            d[i * group + k] += gv / *group as f64;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = numel(p);
                    if needs(p) {
                        accumulate(&mut grads[p.0], n).iter_mut().zip(&g[offset..offset + n]).for_each(|(d, s)| *d += s);
                    }
                    offset += n;
                }
            }
            Op::Gather { x, indices } => {
                if needs(x) {
                    let d = accumulate(&mut grads[x.0], numel(x));
                    for (&i, gv) in indices.iter().zip(g) {
                        d[i] += gv;
                    }
                }
            }
            Op::L2Normalize(x) => {
                if needs(x) {
                    let dim = *self.shape(*x).last().expect("non-scalar");
                    let input = self.data(*x);
                    let y = node.value.data();
                    let d = accumulate(&mut grads[x.0], g.len());
                    for r in 0..g.len() / dim {
                        let row = r * dim..(r + 1) * dim;
                        let norm = input[row.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm > NORM_EPS {
                            let dot: f64 = y[row.clone()].iter().zip(&g[row.clone()]).map(|(a, b)| a * b).sum();
                            for i in row {
                                d[i] += (g[i] - y[i] * dot) / norm;
                            }
                        } else {
                            for i in row {
                                d[i] += g[i] / NORM_EPS;
                            }
                        }
                    }
                }
            }
            Op::SumLast(x) => {
                if needs(x) {
                    let dim = *self.shape(*x).last().expect("non-scalar");
                    let d = accumulate(&mut grads[x.0], numel(x));
                    for (i, gv) in g.iter().enumerate() {
                        d[i * dim..(i + 1) * dim].iter_mut().for_each(|v| *v += gv);
                    }
                }
            }
            Op::Sum(x) => {
                if needs(x) {
                    let gv = g[0];
                    accumulate(&mut grads[x.0], numel(x)).iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::Mean(x) => {
                if needs(x) {
                    let n = numel(x);
                    let gv = g[0] / n.max(1) as f64;
                    accumulate(&mut grads[x.0], n).iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::Softmax(x) => {
                if needs(x) {
                    let dim = *self.shape(*x).last().expect("non-scalar");
                    let y = node.value.data();
                    let d = accumulate(&mut grads[x.0], g.len());
                    for r in 0..g.len() / dim {
                        let row = r * dim..(r + 1) * dim;
                        let dot: f64 = y[row.clone()].iter().zip(&g[row.clone()]).map(|(a, b)| a * b).sum();
                        for i in row {
                            d[i] += y[i] * (g[i] - dot);
                        }
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Four `(flat index, weight)` taps of a clamped bilinear lookup.
fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    [
        (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
        (y0 * w + x1, (1.0 - fy) * fx),
        (y1 * w + x0, fy * (1.0 - fx)),
        (y1 * w + x1, fy * fx),
    ]
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

/// Unfolds `(C, H, W)` into `(C*kh*kw, Ho*Wo)` patches.
fn im2col(src: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.ho * g.wo;
    let mut cols = vec![0.0; g.c * g.kh * g.kw * hw];
    for ch in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for i in 0..g.ho {
                    let y = (i * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let src_row = &src[ch * g.h * g.w + y as usize * g.w..][..g.w];
                    for j in 0..g.wo {
                        let x = (j * g.stride + kj) as isize - g.pad as isize;
                        if x >= 0 && x < g.w as isize {
                            dst[i * g.wo + j] = src_row[x as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
fn col2im(cols: &[f64], g: &ConvGeom, dst: &mut [f64]) {
    let hw = g.ho * g.wo;
    for ch in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for i in 0..g.ho {
                    let y = (i * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let base = ch * g.h * g.w + y as usize * g.w;
                    for j in 0..g.wo {
                        let x = (j * g.stride + kj) as isize - g.pad as isize;
                        if x >= 0 && x < g.w as isize {
                            dst[base + x as usize] += src[i * g.wo + j];
                        }
                    }
                }
            }
        }
    }
}
