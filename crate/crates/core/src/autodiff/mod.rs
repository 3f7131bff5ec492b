//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Nodes are
//! appended in execution order, which is already a topological order, so
//! [`Graph::backward`] just walks the tape from the loss node down to zero.

mod kernels;

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::ssm::{scan_backward, scan_forward, ScanInputs, ScanMode};
use crate::tensor::Tensor;

pub(crate) use kernels::{gelu, sigmoid, softplus};
use kernels::*;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    /// Records values only; no op metadata or saved activations are kept and
    /// `backward` is refused.
    Inference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlipAxis {
    /// Reverse row order.
    Vertical,
    /// Reverse column order.
    Horizontal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Silu,
    Gelu,
    Softplus,
    Exp,
    Sqrt,
    Tanh,
    Square,
}

/// Operation kinds, used to target fault injection in gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    MulBroadcast,
    Scale,
    AddScalar,
    Unary(Unary),
    SumAll,
    MeanAll,
    Conv2d,
    ConvTranspose2d,
    Flip,
    LayerNorm,
    Transpose12,
    Reshape,
    Concat,
    Slice,
    ReduceMean,
    ReduceMax,
    MatMul,
    Linear,
    DepthwiseConv1d,
    SelectiveScan,
    Downsample2,
    UpsampleNearest2,
    UnitNormalize,
}

enum Op {
    Leaf,
    Detached,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x: B×C×…` times `w: B×1×…`.
    MulBroadcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    SumAll(Var),
    MeanAll(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: Conv2dGeom },
    ConvT2d { x: Var, w: Var, b: Option<Var>, geom: ConvT2dGeom },
    Flip(Var, FlipAxis),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, rstd: Vec<f64> },
    Transpose12(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    ReduceMean { x: Var, axis: usize },
    ReduceMax { x: Var, axis: usize, argmax: Vec<usize> },
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    DwConv1d { x: Var, w: Var, b: Option<Var> },
    Scan { inputs: [Var; 6], states: Vec<f64> },
    Downsample2(Var),
    Upsample2(Var),
    UnitNormalize { x: Var, norms: Vec<f64> },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf | Op::Detached => return None,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::MulBroadcast(..) => OpKind::MulBroadcast,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Unary(_, u) => OpKind::Unary(*u),
            Op::SumAll(..) => OpKind::SumAll,
            Op::MeanAll(..) => OpKind::MeanAll,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvT2d { .. } => OpKind::ConvTranspose2d,
            Op::Flip(..) => OpKind::Flip,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Transpose12(..) => OpKind::Transpose12,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::ReduceMean { .. } => OpKind::ReduceMean,
            Op::ReduceMax { .. } => OpKind::ReduceMax,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::DwConv1d { .. } => OpKind::DepthwiseConv1d,
            Op::Scan { .. } => OpKind::SelectiveScan,
            Op::Downsample2(..) => OpKind::Downsample2,
            Op::Upsample2(..) => OpKind::UpsampleNearest2,
            Op::UnitNormalize { .. } => OpKind::UnitNormalize,
        })
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    /// Leaf gradients after `backward`, indexed by node id.
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    /// Parameter id → bound leaf.
    bound: Vec<Option<Var>>,
    scan_mode: ScanMode,
    fault: Option<OpKind>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new(Mode::Train)
    }
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            grads: Vec::new(),
            backward_done: false,
            bound: Vec::new(),
            scan_mode: ScanMode::Sequential,
            fault: None,
        }
    }

    pub fn train() -> Self {
        Self::new(Mode::Train)
    }

    pub fn inference() -> Self {
        Self::new(Mode::Inference)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward algorithm used by [`Graph::selective_scan`].
    pub fn set_scan_mode(&mut self, mode: ScanMode) {
        self.scan_mode = mode;
    }

    /// Deliberately corrupts the backward pass of every op of `kind` (input
    /// gradients scaled by 1.5). Negative control for gradient checks only.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = self.mode == Mode::Train;
        self.push_raw(t, Op::Leaf, rg)
    }

    /// Binds parameter `id` of `store` as a leaf, reusing the binding on
    /// repeated calls.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.bound.len() <= id.index() {
            self.bound.resize(id.index() + 1, None);
        }
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let mut t = store.get(id).clone();
        t.clear_grad();
        let v = self.leaf(t);
        self.bound[id.index()] = Some(v);
        v
    }

    /// `(parameter, gradient)` pairs for every bound parameter that received
    /// a gradient in the last `backward`.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.bound.iter().enumerate().filter_map(|(i, v)| {
            let v = (*v)?;
            let g = self.grads.get(v.0)?.as_deref()?;
            Some((ParamId::from_index(i), g))
        })
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }

    /// Drops leaf gradients and re-arms `backward`.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = self.mode == Mode::Train && inputs.iter().any(|&v| self.rg(v));
        let op = if rg { op } else { Op::Detached };
        self.push_raw(value, op, rg)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), f)?;
        Ok(self.push(out, op, &[a, b]))
    }

    // ---------------------------------------------------------------------
    // element-wise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x: B×C×…` scaled per position by `w: B×1×…`.
    pub fn mul_broadcast(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        if xs.len() < 2 || ws.len() != xs.len() || ws[0] != xs[0] || ws[1] != 1 || ws[2..] != xs[2..] {
            return Err(shape_err!("mul_broadcast: {xs:?} vs {ws:?}"));
        }
        let (b, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        let (xd, wd) = (self.data(x), self.data(w));
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            let wrow = &wd[bi * inner..][..inner];
            for ci in 0..c {
                let off = (bi * c + ci) * inner;
                for i in 0..inner {
                    out[off + i] = xd[off + i] * wrow[i];
                }
            }
        }
        Ok(self.push(Tensor::from_parts(xs, out), Op::MulBroadcast(x, w), &[x, w]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v + s);
        self.push(out, Op::AddScalar(x), &[x])
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Sigmoid => sigmoid,
            Unary::Silu => |v| v * sigmoid(v),
            Unary::Gelu => gelu,
            Unary::Softplus => softplus,
            Unary::Exp => f64::exp,
            Unary::Sqrt => f64::sqrt,
            Unary::Tanh => f64::tanh,
            Unary::Square => |v| v * v,
        };
        let out = self.value(x).map(f);
        self.push(out, Op::Unary(x, kind), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    // ---------------------------------------------------------------------
    // reductions

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// Mean over `axis`, keeping it with extent 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.axis_check(x, axis)?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &xd[(o * n + k) * inner..][..inner];
                for (d, s) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let mut oshape = shape;
        oshape[axis] = 1;
        Ok(self.push(Tensor::from_parts(oshape, out), Op::ReduceMean { x, axis }, &[x]))
    }

    /// Max over `axis`, keeping it with extent 1. Ties resolve to the lowest
    /// index, which also receives the whole subgradient.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.axis_check(x, axis)?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &xd[(o * n + k) * inner..][..inner];
                for i in 0..inner {
                    if src[i] > out[o * inner + i] {
                        out[o * inner + i] = src[i];
                        argmax[o * inner + i] = k;
                    }
                }
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        let op = if self.mode == Mode::Train {
            Op::ReduceMax { x, axis, argmax }
        } else {
            Op::Detached
        };
        Ok(self.push(Tensor::from_parts(oshape, out), op, &[x]))
    }

    fn axis_check(&self, x: Var, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("axis {axis} out of range for {shape:?}"));
        }
        Ok(shape)
    }

    // ---------------------------------------------------------------------
    // layout

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Swaps axes 1 and 2 of a 3-D tensor.
    pub fn transpose12(&mut self, x: Var) -> Result<Var> {
        let (b, m, n) = match self.shape(x) {
            &[b, m, n] => (b, m, n),
            s => return Err(shape_err!("transpose12 needs 3-D input, got {s:?}")),
        };
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        transpose_block(xd, &mut out, b, m, n);
        Ok(self.push(Tensor::from_parts(vec![b, n, m], out), Op::Transpose12(x), &[x]))
    }

    /// `B×C×H×W` → `B×N×C` with row-major pixel order (`N = H·W`).
    pub fn to_seq(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let r = self.reshape(x, &[b, c, h * w])?;
        self.transpose12(r)
    }

    /// Inverse of [`Graph::to_seq`].
    pub fn from_seq(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (b, n, c) = match self.shape(x) {
            &[b, n, c] => (b, n, c),
            s => return Err(shape_err!("from_seq needs B×N×C, got {s:?}")),
        };
        if n != h * w {
            return Err(shape_err!("from_seq: N={n} but H×W={}", h * w));
        }
        let t = self.transpose12(x)?;
        self.reshape(t, &[b, c, h, w])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| shape_err!("empty concat"))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err!("concat axis {axis} out of range for {first:?}"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &e)| i != axis && e != first[i]) {
                return Err(shape_err!("concat along {axis}: {first:?} vs {s:?}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.data(v)[o * n * inner..][..n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.axis_check(x, axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(shape_err!(
                "slice [{start}, {}) out of range for axis {axis} of {shape:?}",
                start + len
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xd[(o * n + start) * inner..][..len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        Ok(self.push(Tensor::from_parts(oshape, out), Op::Slice { x, axis, start }, &[x]))
    }

    pub fn flip(&mut self, x: Var, axis: FlipAxis) -> Result<Var> {
        let (b, c, h, w) = self
            .value(x)
            .dims4()
            .map_err(|_| shape_err!("flip needs a 4-D input, got {:?}", self.shape(x)))?;
        let out = flip_data(self.data(x), b * c, h, w, axis);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Flip(x, axis), &[x]))
    }

    /// Keeps every second row and column (`[2i, 2j]`) of a 4-D tensor.
    pub fn downsample2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let xd = self.data(x);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for p in 0..b * c {
            for i in 0..oh {
                for j in 0..ow {
                    out.push(xd[p * h * w + 2 * i * w + 2 * j]);
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![b, c, oh, ow], out), Op::Downsample2(x), &[x]))
    }

    /// Nearest-neighbour 2× upsampling of a 4-D tensor.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let (oh, ow) = (2 * h, 2 * w);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for p in 0..b * c {
            for i in 0..oh {
                for j in 0..ow {
                    out.push(xd[p * h * w + (i / 2) * w + j / 2]);
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![b, c, oh, ow], out), Op::Upsample2(x), &[x]))
    }

    // ---------------------------------------------------------------------
    // layers

    /// Cross-correlation with zero padding. `x: B×Cin×H×W`,
    /// `w: Cout×Cin×k×k`, `b: Cout`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (bs, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, k, k2) = self.value(w).dims4()?;
        if wcin != cin || k != k2 {
            return Err(shape_err!(
                "conv2d: input has {cin} channels but weight is {:?}",
                self.shape(w)
            ));
        }
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err!(
                "conv2d: kernel {k} stride {stride} pad {pad} does not fit input {h}×{wd}"
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err!("conv2d: bias {:?} for {cout} outputs", self.shape(b)));
            }
        }
        let geom = Conv2dGeom {
            b: bs,
            cin,
            h,
            w: wd,
            cout,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (wd + 2 * pad - k) / stride + 1,
        };
        let out = conv2d_forward(&geom, self.data(x), self.data(w), b.map(|b| self.data(b)));
        let t = Tensor::from_parts(vec![bs, cout, geom.oh, geom.ow], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Transposed convolution without padding; `w: Cin×Cout×k×k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (bs, cin, h, wd) = self.value(x).dims4()?;
        let (wcin, cout, k, k2) = self.value(w).dims4()?;
        if wcin != cin || k != k2 || stride == 0 {
            return Err(shape_err!(
                "conv_transpose2d: input has {cin} channels but weight is {:?}",
                self.shape(w)
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err!("conv_transpose2d: bias {:?}", self.shape(b)));
            }
        }
        let geom = ConvT2dGeom {
            b: bs,
            cin,
            h,
            w: wd,
            cout,
            k,
            stride,
            oh: (h - 1) * stride + k,
            ow: (wd - 1) * stride + k,
        };
        let out = conv_t2d_forward(&geom, self.data(x), self.data(w), b.map(|b| self.data(b)));
        let t = Tensor::from_parts(vec![bs, cout, geom.oh, geom.ow], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(t, Op::ConvT2d { x, w, b, geom }, &inputs))
    }

    /// Normalises over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err!(
                "layer_norm over {c} channels with gamma {:?} beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let (y, mean, rstd) = layer_norm_forward(self.data(x), self.data(gamma), self.data(beta), c, eps);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        };
        Ok(self.push(Tensor::from_parts(shape, y), op, &[x, gamma, beta]))
    }

    /// `(M×K)·(K×N)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = match (self.shape(a), self.shape(b)) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => return Err(shape_err!("matmul: {sa:?} · {sb:?}")),
        };
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ad[i * k + p];
                for j in 0..n {
                    out[i * n + j] += av * bd[p * n + j];
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// Affine map over the last axis; `w: Cout×Cin`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let cin = *xs.last().unwrap();
        let (cout, wcin) = match self.shape(w) {
            &[o, i] => (o, i),
            s => return Err(shape_err!("linear weight must be 2-D, got {s:?}")),
        };
        if wcin != cin {
            return Err(shape_err!("linear: input width {cin} but weight is {cout}×{wcin}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err!("linear bias {:?} for {cout} outputs", self.shape(b)));
            }
        }
        let y = linear_forward(self.data(x), self.data(w), b.map(|b| self.data(b)), cin, cout);
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor::from_parts(shape, y), Op::Linear { x, w, b }, &inputs))
    }

    /// Depthwise convolution along the sequence axis of `B×L×C`, kernel
    /// `C×k` with odd `k`, same padding.
    pub fn dwconv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (bs, l, c) = match self.shape(x) {
            &[b, l, c] => (b, l, c),
            s => return Err(shape_err!("dwconv1d needs B×L×C, got {s:?}")),
        };
        let k = match self.shape(w) {
            &[wc, k] if wc == c && k % 2 == 1 => k,
            s => return Err(shape_err!("dwconv1d kernel {s:?} for {c} channels (odd width required)")),
        };
        let y = dwconv1d_forward(self.data(x), self.data(w), b.map(|b| self.data(b)), bs, l, c, k);
        let shape = self.shape(x).to_vec();
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor::from_parts(shape, y), Op::DwConv1d { x, w, b }, &inputs))
    }

    /// Selective scan kernel. `u, delta: B×L×D`, `a: D×N` (already negative),
    /// `bm, cm: B×L×N`, `d: D`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, bm: Var, cm: Var, d: Var) -> Result<Var> {
        let (bs, l, dd) = match self.shape(u) {
            &[b, l, d] => (b, l, d),
            s => return Err(shape_err!("selective_scan input must be B×L×D, got {s:?}")),
        };
        let n = match self.shape(a) {
            &[ad, n] if ad == dd => n,
            s => return Err(shape_err!("selective_scan: A is {s:?}, expected {dd}×N")),
        };
        self.same_shape(u, delta, "selective_scan delta")?;
        if self.shape(bm) != [bs, l, n] || self.shape(cm) != [bs, l, n] || self.shape(d) != [dd] {
            return Err(shape_err!(
                "selective_scan: B {:?} C {:?} D {:?} for batch {bs} length {l} state {n}",
                self.shape(bm),
                self.shape(cm),
                self.shape(d)
            ));
        }
        let inp = ScanInputs {
            batch: bs,
            len: l,
            channels: dd,
            state: n,
            u: self.data(u),
            delta: self.data(delta),
            a: self.data(a),
            b: self.data(bm),
            c: self.data(cm),
            d: self.data(d),
        };
        let (y, states) = scan_forward(&inp, self.scan_mode)?;
        let inputs = [u, delta, a, bm, cm, d];
        let op = Op::Scan {
            inputs,
            states: if self.mode == Mode::Train { states } else { Vec::new() },
        };
        Ok(self.push(Tensor::from_parts(vec![bs, l, dd], y), op, &inputs))
    }

    /// Scales each channel vector of `x: B×C×…` to unit length:
    /// `x / sqrt(Σ_c x² + eps)`.
    pub fn unit_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err!("unit_normalize needs B×C×…, got {shape:?}"));
        }
        let (outer, c, inner) = split_axis(&shape, 1);
        let xd = self.data(x);
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..c {
                for i in 0..inner {
                    let v = xd[(o * c + k) * inner + i];
                    norms[o * inner + i] += v * v;
                }
            }
        }
        norms.iter_mut().for_each(|n| *n = (*n + eps).sqrt());
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for k in 0..c {
                for i in 0..inner {
                    let idx = (o * c + k) * inner + i;
                    out[idx] = xd[idx] / norms[o * inner + i];
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::UnitNormalize { x, norms }, &[x]))
    }

    // ---------------------------------------------------------------------
    // backward

    /// Reverse accumulation from scalar `loss` into every differentiable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.mode == Mode::Inference {
            return Err(Error::Contract("backward on an inference-mode graph".into()));
        }
        if self.backward_done {
            return Err(Error::Contract(
                "backward called twice without zero_grad".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.rg(loss) {
            return Err(Error::Contract(
                "loss does not depend on any differentiable leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let faulty = self.fault.is_some() && self.nodes[i].op.kind() == self.fault;
            let mut sink = Sink {
                grads: &mut grads,
                nodes: &self.nodes,
                factor: if faulty { 1.5 } else { 1.0 },
            };
            self.node_backward(i, &g, &mut sink);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[f64], sink: &mut Sink<'_>) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Detached => {}
            Op::Add(a, b) => {
                sink.add(*a, || g.to_vec());
                sink.add(*b, || g.to_vec());
            }
            Op::Sub(a, b) => {
                sink.add(*a, || g.to_vec());
                sink.add(*b, || g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                sink.add(*a, || g.iter().zip(bd).map(|(g, b)| g * b).collect());
                sink.add(*b, || g.iter().zip(ad).map(|(g, a)| g * a).collect());
            }
            Op::MulBroadcast(x, w) => {
                let xs = self.shape(*x);
                let (bs, c) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let (xd, wd) = (self.data(*x), self.data(*w));
                sink.add(*x, || {
                    let mut dx = vec![0.0; xd.len()];
                    for bi in 0..bs {
                        for ci in 0..c {
                            let off = (bi * c + ci) * inner;
                            for k in 0..inner {
                                dx[off + k] = g[off + k] * wd[bi * inner + k];
                            }
                        }
                    }
                    dx
                });
                sink.add(*w, || {
                    let mut dw = vec![0.0; wd.len()];
                    for bi in 0..bs {
                        for ci in 0..c {
                            let off = (bi * c + ci) * inner;
                            for k in 0..inner {
                                dw[bi * inner + k] += g[off + k] * xd[off + k];
                            }
                        }
                    }
                    dw
                });
            }
            Op::Scale(x, s) => sink.add(*x, || g.iter().map(|v| v * s).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => sink.add(*x, || g.to_vec()),
            Op::Unary(x, kind) => {
                let xd = self.data(*x);
                sink.add(*x, || {
                    g.iter()
                        .zip(xd.iter().zip(out))
                        .map(|(&g, (&x, &y))| {
                            g * match kind {
                                Unary::Sigmoid => y * (1.0 - y),
                                Unary::Silu => {
                                    let s = sigmoid(x);
                                    s * (1.0 + x * (1.0 - s))
                                }
                                Unary::Gelu => gelu_grad(x),
                                Unary::Softplus => sigmoid(x),
                                Unary::Exp => y,
                                Unary::Sqrt => 0.5 / y,
                                Unary::Tanh => 1.0 - y * y,
                                Unary::Square => 2.0 * x,
                            }
                        })
                        .collect()
                });
            }
            Op::SumAll(x) => sink.add(*x, || vec![g[0]; self.value(*x).len()]),
            Op::MeanAll(x) => {
                let n = self.value(*x).len();
                sink.add(*x, || vec![g[0] / n as f64; n]);
            }
            Op::ReduceMean { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                sink.add(*x, || {
                    let mut dx = vec![0.0; outer * n * inner];
                    for o in 0..outer {
                        for k in 0..n {
                            for i in 0..inner {
                                dx[(o * n + k) * inner + i] = g[o * inner + i] / n as f64;
                            }
                        }
                    }
                    dx
                });
            }
            Op::ReduceMax { x, axis, argmax } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                sink.add(*x, || {
                    let mut dx = vec![0.0; outer * n * inner];
                    for o in 0..outer {
                        for i in 0..inner {
                            let k = argmax[o * inner + i];
                            dx[(o * n + k) * inner + i] = g[o * inner + i];
                        }
                    }
                    dx
                });
            }
            Op::Transpose12(x) => {
                let s = self.shape(*x);
                let (b, m, n) = (s[0], s[1], s[2]);
                sink.add(*x, || {
                    let mut dx = vec![0.0; g.len()];
                    transpose_block(g, &mut dx, b, n, m);
                    dx
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = self.shape(v)[*axis];
                    sink.add(v, || {
                        let mut dx = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            dx.extend_from_slice(&g[(o * total + offset) * inner..][..n * inner]);
                        }
                        dx
                    });
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                sink.add(*x, || {
                    let mut dx = vec![0.0; outer * n * inner];
                    for o in 0..outer {
                        dx[(o * n + start) * inner..][..len * inner]
                            .copy_from_slice(&g[o * len * inner..][..len * inner]);
                    }
                    dx
                });
            }
            Op::Flip(x, axis) => {
                let (b, c, h, w) = self.value(*x).dims4().unwrap();
                sink.add(*x, || flip_data(g, b * c, h, w, *axis));
            }
            Op::Downsample2(x) => {
                let (b, c, h, w) = self.value(*x).dims4().unwrap();
                let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
                sink.add(*x, || {
                    let mut dx = vec![0.0; b * c * h * w];
                    for p in 0..b * c {
                        for i in 0..oh {
                            for j in 0..ow {
                                dx[p * h * w + 2 * i * w + 2 * j] = g[(p * oh + i) * ow + j];
                            }
                        }
                    }
                    dx
                });
            }
            Op::Upsample2(x) => {
                let (b, c, h, w) = self.value(*x).dims4().unwrap();
                let (oh, ow) = (2 * h, 2 * w);
                sink.add(*x, || {
                    let mut dx = vec![0.0; b * c * h * w];
                    for p in 0..b * c {
                        for i in 0..oh {
                            for j in 0..ow {
                                dx[p * h * w + (i / 2) * w + j / 2] += g[(p * oh + i) * ow + j];
                            }
                        }
                    }
                    dx
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let want = [self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b))];
                let (dx, dw, db) = conv2d_backward(geom, self.data(*x), self.data(*w), g, want);
                sink.put(*x, dx);
                sink.put(*w, dw);
                if let Some(b) = b {
                    sink.put(*b, db);
                }
            }
            Op::ConvT2d { x, w, b, geom } => {
                let want = [self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b))];
                let (dx, dw, db) = conv_t2d_backward(geom, self.data(*x), self.data(*w), g, want);
                sink.put(*x, dx);
                sink.put(*w, dw);
                if let Some(b) = b {
                    sink.put(*b, db);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let c = *self.shape(*x).last().unwrap();
                let (dx, dg, db) = layer_norm_backward(self.data(*x), self.data(*gamma), mean, rstd, g, c);
                sink.put(*x, Some(dx));
                sink.put(*gamma, Some(dg));
                sink.put(*beta, Some(db));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                sink.add(*a, || {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            da[i * k + p] = (0..n).map(|j| g[i * n + j] * bd[p * n + j]).sum();
                        }
                    }
                    da
                });
                sink.add(*b, || {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    db
                });
            }
            Op::Linear { x, w, b } => {
                let cin = *self.shape(*x).last().unwrap();
                let cout = self.shape(*w)[0];
                let want = [self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b))];
                let (dx, dw, db) = linear_backward(self.data(*x), self.data(*w), g, cin, cout, want);
                sink.put(*x, dx);
                sink.put(*w, dw);
                if let Some(b) = b {
                    sink.put(*b, db);
                }
            }
            Op::DwConv1d { x, w, b } => {
                let s = self.shape(*x);
                let dims = (s[0], s[1], s[2], self.shape(*w)[1]);
                let want = [self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b))];
                let (dx, dw, db) = dwconv1d_backward(self.data(*x), self.data(*w), g, dims, want);
                sink.put(*x, dx);
                sink.put(*w, dw);
                if let Some(b) = b {
                    sink.put(*b, db);
                }
            }
            Op::Scan { inputs, states } => {
                let [u, delta, a, bm, cm, d] = *inputs;
                let s = self.shape(u);
                let inp = ScanInputs {
                    batch: s[0],
                    len: s[1],
                    channels: s[2],
                    state: self.shape(a)[1],
                    u: self.data(u),
                    delta: self.data(delta),
                    a: self.data(a),
                    b: self.data(bm),
                    c: self.data(cm),
                    d: self.data(d),
                };
                let gr = scan_backward(&inp, states, g);
                sink.put(u, Some(gr.u));
                sink.put(delta, Some(gr.delta));
                sink.put(a, Some(gr.a));
                sink.put(bm, Some(gr.b));
                sink.put(cm, Some(gr.c));
                sink.put(d, Some(gr.d));
            }
            Op::UnitNormalize { x, norms } => {
                let (outer, c, inner) = split_axis(self.shape(*x), 1);
                sink.add(*x, || {
                    // dx = (g − y·Σ_c g·y) / n
                    let mut dot = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for k in 0..c {
                            for i in 0..inner {
                                let idx = (o * c + k) * inner + i;
                                dot[o * inner + i] += g[idx] * out[idx];
                            }
                        }
                    }
                    let mut dx = vec![0.0; g.len()];
                    for o in 0..outer {
                        for k in 0..c {
                            for i in 0..inner {
                                let idx = (o * c + k) * inner + i;
                                let p = o * inner + i;
                                dx[idx] = (g[idx] - out[idx] * dot[p]) / norms[p];
                            }
                        }
                    }
                    dx
                });
            }
        }
    }
}

/// Gradient accumulator handed to per-node backward rules.
struct Sink<'a> {
    grads: &'a mut Vec<Option<Vec<f64>>>,
    nodes: &'a [Node],
    factor: f64,
}

impl Sink<'_> {
    fn add(&mut self, v: Var, make: impl FnOnce() -> Vec<f64>) {
        if self.nodes[v.0].requires_grad {
            self.put(v, Some(make()));
        }
    }

    fn put(&mut self, v: Var, g: Option<Vec<f64>>) {
        let Some(mut g) = g else { return };
        if !self.nodes[v.0].requires_grad {
            return;
        }
        if self.factor != 1.0 {
            g.iter_mut().for_each(|x| *x *= self.factor);
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }
}

fn transpose_block(src: &[f64], dst: &mut [f64], b: usize, m: usize, n: usize) {
    for bi in 0..b {
        let s = &src[bi * m * n..][..m * n];
        let d = &mut dst[bi * m * n..][..m * n];
        for i in 0..m {
            for j in 0..n {
                d[j * m + i] = s[i * n + j];
            }
        }
    }
}

fn flip_data(src: &[f64], planes: usize, h: usize, w: usize, axis: FlipAxis) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for p in 0..planes {
        let s = &src[p * h * w..][..h * w];
        let d = &mut out[p * h * w..][..h * w];
        for i in 0..h {
            for j in 0..w {
                let (si, sj) = match axis {
                    FlipAxis::Vertical => (h - 1 - i, j),
                    FlipAxis::Horizontal => (i, w - 1 - j),
                };
                d[i * w + j] = s[si * w + sj];
            }
        }
    }
    out
}

/// Plain-tensor spatial flip, outside any graph.
pub fn flip_tensor(x: &Tensor, axis: FlipAxis) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(Tensor::from_parts(x.shape().to_vec(), flip_data(x.data(), b * c, h, w, axis)))
}

#[cfg(test)]
mod tests;
