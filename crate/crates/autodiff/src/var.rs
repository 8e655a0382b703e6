use std::cell::Cell;
use std::fmt;
use std::rc::Rc;

use ndarray::{ArrayD, Axis, Ix2, Ix4, IxDyn, Slice, Zip};

use crate::kernels::{self, ConvGeom};

pub type Tensor = ArrayD<f64>;

thread_local! {
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
    static NO_GRAD_DEPTH: Cell<usize> = const { Cell::new(0) };
}

fn next_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

fn grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get() == 0)
}

/// While alive, every op produces constants and no graph is recorded.
pub struct NoGradGuard(());

impl NoGradGuard {
    pub fn new() -> Self {
        NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
        NoGradGuard(())
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

/// Runs `f` with graph recording disabled.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _guard = NoGradGuard::new();
    f()
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    Shift,
    Exp,
    Ln,
    Sigmoid,
    /// Multiplies the incoming gradient by a fixed mask (leaky-relu, abs, clamp).
    Masked(Rc<Tensor>),
    /// Identity gradient regardless of the forward value.
    StraightThrough,
    Reshape(Vec<usize>),
    Broadcast(Vec<usize>),
    SumTo(Vec<usize>),
    Slice {
        axis: usize,
        start: usize,
        full: usize,
    },
    Pad {
        axis: usize,
        start: usize,
        len: usize,
    },
    Concat {
        axis: usize,
        sizes: Vec<usize>,
    },
    MatMul,
    Transpose,
    Im2Col(ConvGeom),
    Col2Im(ConvGeom),
    Upsample2,
    SumPool2 {
        out_h: usize,
        out_w: usize,
    },
    PoolTrunc {
        h: usize,
        w: usize,
    },
    SpreadTrunc,
    Blur(Rc<[f64]>),
    BlurAdjoint(Rc<[f64]>),
}

struct Node {
    id: usize,
    value: Tensor,
    op: Option<Op>,
    parents: Vec<Var>,
    requires_grad: bool,
}

/// A tensor value plus (optionally) the operation that produced it.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    fn make(value: Tensor, op: Option<Op>, parents: Vec<Var>, requires_grad: bool) -> Var {
        Var(Rc::new(Node { id: next_id(), value, op, parents, requires_grad }))
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn param(value: Tensor) -> Var {
        Var::make(value, None, Vec::new(), true)
    }

    pub fn constant(value: Tensor) -> Var {
        Var::make(value, None, Vec::new(), false)
    }

    pub fn scalar(v: f64) -> Var {
        Var::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(shape: &[usize]) -> Var {
        Var::constant(ArrayD::zeros(IxDyn(shape)))
    }

    fn from_op(value: Tensor, op: Op, parents: Vec<Var>) -> Var {
        let rg = grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        if rg {
            Var::make(value, Some(op), parents, true)
        } else {
            Var::constant(value)
        }
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on a tensor of shape {:?}", self.shape());
        *self.0.value.iter().next().expect("one element")
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&self, other: &Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (a, b) = broadcast_pair(self, other);
        let value = Zip::from(a.value()).and(b.value()).map_collect(|&x, &y| f(x, y));
        Var::from_op(value, op, vec![a, b])
    }

    pub fn add(&self, other: &Var) -> Var {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Var) -> Var {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Var) -> Var {
        self.binary(other, Op::Div, |a, b| a / b)
    }

    pub fn neg(&self) -> Var {
        Var::from_op(self.value().mapv(|v| -v), Op::Neg, vec![self.clone()])
    }

    pub fn scale(&self, c: f64) -> Var {
        Var::from_op(self.value().mapv(|v| v * c), Op::Scale(c), vec![self.clone()])
    }

    pub fn shift(&self, c: f64) -> Var {
        Var::from_op(self.value().mapv(|v| v + c), Op::Shift, vec![self.clone()])
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn exp(&self) -> Var {
        Var::from_op(self.value().mapv(f64::exp), Op::Exp, vec![self.clone()])
    }

    pub fn ln(&self) -> Var {
        Var::from_op(self.value().mapv(f64::ln), Op::Ln, vec![self.clone()])
    }

    pub fn sigmoid(&self) -> Var {
        Var::from_op(self.value().mapv(sigmoid), Op::Sigmoid, vec![self.clone()])
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let mask = self.value().mapv(|v| if v > 0.0 { 1.0 } else { slope });
        let value = Zip::from(self.value()).and(&mask).map_collect(|&v, &m| v * m);
        Var::from_op(value, Op::Masked(Rc::new(mask)), vec![self.clone()])
    }

    pub fn abs(&self) -> Var {
        let mask = self.value().mapv(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        Var::from_op(self.value().mapv(f64::abs), Op::Masked(Rc::new(mask)), vec![self.clone()])
    }

    /// Clamp with gradient passing only where `lo <= x <= hi`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let mask = self.value().mapv(|v| if (lo..=hi).contains(&v) { 1.0 } else { 0.0 });
        Var::from_op(self.value().mapv(|v| v.clamp(lo, hi)), Op::Masked(Rc::new(mask)), vec![self.clone()])
    }

    /// `x^p` for positive `x`, built from `exp(p ln x)`.
    pub fn powf(&self, p: f64) -> Var {
        self.ln().scale(p).exp()
    }

    /// Forward value `value`, backward identity to `self` (straight-through estimator).
    pub fn straight_through(&self, value: Tensor) -> Var {
        assert_eq!(value.shape(), self.shape(), "straight-through shape mismatch");
        Var::from_op(value, Op::StraightThrough, vec![self.clone()])
    }

    /// Elementwise map whose gradient is treated as identity.
    pub fn straight_through_map(&self, f: impl Fn(f64) -> f64) -> Var {
        self.straight_through(self.value().mapv(f))
    }

    // ---- shape ----------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let value = self
            .value()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape {:?} -> {:?}: {e}", self.shape(), shape));
        Var::from_op(value, Op::Reshape(self.shape().to_vec()), vec![self.clone()])
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let value = self
            .value()
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", self.shape(), shape))
            .to_owned();
        Var::from_op(value, Op::Broadcast(self.shape().to_vec()), vec![self.clone()])
    }

    /// Sums down to `shape`, the inverse direction of [`Var::broadcast_to`].
    pub fn sum_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let value = sum_to_shape(self.value(), shape);
        Var::from_op(value, Op::SumTo(self.shape().to_vec()), vec![self.clone()])
    }

    pub fn sum(&self) -> Var {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Var {
        let n = self.len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_axis_keep(&self, axis: usize) -> Var {
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        self.sum_to(&shape)
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Var {
        let full = self.shape()[axis];
        assert!(start + len <= full, "slice out of range");
        let value = self.value().slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned();
        Var::from_op(value, Op::Slice { axis, start, full }, vec![self.clone()])
    }

    /// Zero-pads `axis` to length `full`, placing `self` at `start`.
    pub fn pad_axis(&self, axis: usize, start: usize, full: usize) -> Var {
        let len = self.shape()[axis];
        assert!(start + len <= full, "pad out of range");
        let mut shape = self.shape().to_vec();
        shape[axis] = full;
        let mut value = ArrayD::zeros(IxDyn(&shape));
        value.slice_axis_mut(Axis(axis), Slice::from(start..start + len)).assign(self.value());
        Var::from_op(value, Op::Pad { axis, start, len }, vec![self.clone()])
    }

    pub fn concat(parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let sizes = parts.iter().map(|p| p.shape()[axis]).collect();
        Var::from_op(value, Op::Concat { axis, sizes }, parts.to_vec())
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&self, other: &Var) -> Var {
        let a = self.value().view().into_dimensionality::<Ix2>().expect("matmul lhs must be 2-D");
        let b = other.value().view().into_dimensionality::<Ix2>().expect("matmul rhs must be 2-D");
        let value = kernels::gemm(a, b).into_dyn();
        Var::from_op(value, Op::MatMul, vec![self.clone(), other.clone()])
    }

    /// Transpose of a 2-D tensor.
    pub fn t(&self) -> Var {
        let a = self.value().view().into_dimensionality::<Ix2>().expect("transpose needs 2-D");
        let value = a.t().as_standard_layout().into_owned().into_dyn();
        Var::from_op(value, Op::Transpose, vec![self.clone()])
    }

    pub fn im2col(&self, geom: ConvGeom) -> Var {
        let x = self.value().view().into_dimensionality::<Ix4>().expect("im2col needs NHWC");
        assert_eq!(x.dim(), (geom.n, geom.h, geom.w, geom.c), "im2col geometry mismatch");
        let value = kernels::im2col(x, &geom).into_dyn();
        Var::from_op(value, Op::Im2Col(geom), vec![self.clone()])
    }

    pub fn col2im(&self, geom: ConvGeom) -> Var {
        let x = self.value().view().into_dimensionality::<Ix2>().expect("col2im needs 2-D");
        let value = kernels::col2im(x, &geom).into_dyn();
        Var::from_op(value, Op::Col2Im(geom), vec![self.clone()])
    }

    /// 2-D convolution of an NHWC input with weights `[k, k, c_in, c_out]`
    /// and zero padding.
    pub fn conv2d(&self, weight: &Var, bias: Option<&Var>, stride: usize, pad: usize) -> Var {
        let s = self.shape();
        assert_eq!(s.len(), 4, "conv2d input must be NHWC");
        let ws = weight.shape();
        assert_eq!(ws.len(), 4, "conv2d weight must be [k, k, c_in, c_out]");
        assert_eq!(ws[2], s[3], "conv2d channel mismatch: weight {:?} input {:?}", ws, s);
        let geom = ConvGeom { n: s[0], h: s[1], w: s[2], c: s[3], k: ws[0], stride, pad };
        let cols = self.im2col(geom);
        let w2 = weight.reshape(&[geom.cols(), ws[3]]);
        let out = cols.matmul(&w2).reshape(&[geom.n, geom.out_h(), geom.out_w(), ws[3]]);
        match bias {
            Some(b) => out.add(b),
            None => out,
        }
    }

    /// Nearest-neighbour 2x upsampling of NHWC to `(out_h, out_w)`.
    pub fn upsample2(&self, out_h: usize, out_w: usize) -> Var {
        let x = self.value().view().into_dimensionality::<Ix4>().expect("upsample2 needs NHWC");
        let value = kernels::upsample2(x, out_h, out_w).into_dyn();
        Var::from_op(value, Op::Upsample2, vec![self.clone()])
    }

    /// Adjoint of [`Var::upsample2`]; sums 2x2 blocks with ceil output size.
    pub fn sum_pool2(&self) -> Var {
        let x = self.value().view().into_dimensionality::<Ix4>().expect("sum_pool2 needs NHWC");
        let (out_h, out_w) = (x.dim().1, x.dim().2);
        let value = kernels::sum_pool2(x).into_dyn();
        Var::from_op(value, Op::SumPool2 { out_h, out_w }, vec![self.clone()])
    }

    /// 2x2 average pooling with stride 2; odd trailing rows/cols are dropped.
    pub fn avg_pool2(&self) -> Var {
        let x = self.value().view().into_dimensionality::<Ix4>().expect("avg_pool2 needs NHWC");
        let (h, w) = (x.dim().1, x.dim().2);
        let value = kernels::sum_pool2_trunc(x).into_dyn();
        Var::from_op(value, Op::PoolTrunc { h, w }, vec![self.clone()]).scale(0.25)
    }

    fn spread_trunc(&self, h: usize, w: usize) -> Var {
        let x = self.value().view().into_dimensionality::<Ix4>().expect("NHWC");
        let value = kernels::spread2_trunc(x, h, w).into_dyn();
        Var::from_op(value, Op::SpreadTrunc, vec![self.clone()])
    }

    /// Separable "valid" filtering along H and W with symmetric taps.
    pub fn blur_valid(&self, taps: &Rc<[f64]>) -> Var {
        let x = self.value().view().into_dimensionality::<Ix4>().expect("blur needs NHWC");
        let value = kernels::blur_valid(x, taps).into_dyn();
        Var::from_op(value, Op::Blur(taps.clone()), vec![self.clone()])
    }

    fn blur_adjoint(&self, taps: &Rc<[f64]>) -> Var {
        let x = self.value().view().into_dimensionality::<Ix4>().expect("NHWC");
        let value = kernels::blur_valid_adjoint(x, taps).into_dyn();
        Var::from_op(value, Op::BlurAdjoint(taps.clone()), vec![self.clone()])
    }

    // ---- backward -------------------------------------------------------

    /// Gradients of this node's inputs given the gradient `g` of its output.
    fn backward(&self, g: &Var) -> Vec<Var> {
        let p = &self.0.parents;
        let op = self.0.op.as_ref().expect("backward on a leaf");
        match op {
            Op::Add => vec![g.clone(), g.clone()],
            Op::Sub => vec![g.clone(), g.neg()],
            Op::Mul => vec![g.mul(&p[1]), g.mul(&p[0])],
            Op::Div => vec![g.div(&p[1]), g.mul(self).div(&p[1]).neg()],
            Op::Neg => vec![g.neg()],
            Op::Scale(c) => vec![g.scale(*c)],
            Op::Shift => vec![g.clone()],
            Op::Exp => vec![g.mul(self)],
            Op::Ln => vec![g.div(&p[0])],
            Op::Sigmoid => {
                let one_minus = self.neg().shift(1.0);
                vec![g.mul(&self.mul(&one_minus))]
            }
            Op::Masked(mask) => vec![g.mul(&Var::constant((**mask).clone()))],
            Op::StraightThrough => vec![g.clone()],
            Op::Reshape(orig) => vec![g.reshape(orig)],
            Op::Broadcast(orig) => vec![g.sum_to(orig)],
            Op::SumTo(orig) => vec![g.broadcast_to(orig)],
            Op::Slice { axis, start, full } => vec![g.pad_axis(*axis, *start, *full)],
            Op::Pad { axis, start, len } => vec![g.slice_axis(*axis, *start, *len)],
            Op::Concat { axis, sizes } => {
                let mut off = 0;
                sizes
                    .iter()
                    .map(|&n| {
                        let part = g.slice_axis(*axis, off, n);
                        off += n;
                        part
                    })
                    .collect()
            }
            Op::MatMul => vec![g.matmul(&p[1].t()), p[0].t().matmul(g)],
            Op::Transpose => vec![g.t()],
            Op::Im2Col(geom) => vec![g.col2im(*geom)],
            Op::Col2Im(geom) => vec![g.im2col(*geom)],
            Op::Upsample2 => vec![g.sum_pool2()],
            Op::SumPool2 { out_h, out_w } => vec![g.upsample2(*out_h, *out_w)],
            Op::PoolTrunc { h, w } => vec![g.spread_trunc(*h, *w)],
            Op::SpreadTrunc => {
                let x = g.value().view().into_dimensionality::<Ix4>().expect("NHWC");
                let (h, w) = (x.dim().1, x.dim().2);
                vec![Var::from_op(kernels::sum_pool2_trunc(x).into_dyn(), Op::PoolTrunc { h, w }, vec![g.clone()])]
            }
            Op::Blur(taps) => vec![g.blur_adjoint(taps)],
            Op::BlurAdjoint(taps) => vec![g.blur_valid(taps)],
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
            let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
            match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => panic!("incompatible shapes {a:?} and {b:?}"),
            }
        })
        .collect()
}

fn broadcast_pair(a: &Var, b: &Var) -> (Var, Var) {
    if a.shape() == b.shape() {
        return (a.clone(), b.clone());
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    (a.broadcast_to(&shape), b.broadcast_to(&shape))
}

fn sum_to_shape(x: &Tensor, target: &[usize]) -> Tensor {
    let mut out = x.clone();
    let extra = out.ndim() - target.len();
    for _ in 0..extra {
        out = out.sum_axis(Axis(0));
    }
    for (axis, &t) in target.iter().enumerate() {
        if t == 1 && out.shape()[axis] != 1 {
            out = out.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    assert_eq!(out.shape(), target, "sum_to: cannot reduce {:?} to {:?}", x.shape(), target);
    out
}

/// Gradient of the scalar `output` with respect to each of `wrt`.
///
/// Inputs that `output` does not depend on get a zero gradient. With
/// `create_graph` the returned gradients are themselves differentiable,
/// which is what second-order meta-gradients need.
pub fn grad(output: &Var, wrt: &[&Var], create_graph: bool) -> Vec<Var> {
    assert_eq!(output.len(), 1, "grad() needs a scalar output, got {:?}", output.shape());
    let seed = Var::constant(ArrayD::ones(IxDyn(output.shape())));
    grad_with_seed(output, seed, wrt, create_graph)
}

/// Vector-Jacobian product: backpropagates `seed` from `output`.
pub fn grad_with_seed(output: &Var, seed: Var, wrt: &[&Var], create_graph: bool) -> Vec<Var> {
    let _guard = (!create_graph).then(NoGradGuard::new);
    let order = topo_order(output);
    let mut grads: std::collections::HashMap<usize, Var> = std::collections::HashMap::new();
    if output.requires_grad() {
        grads.insert(output.id(), seed);
    }
    for node in order.iter().rev() {
        let Some(g) = grads.get(&node.id()).cloned() else {
            continue;
        };
        if node.0.op.is_none() {
            continue;
        }
        let parent_grads = node.backward(&g);
        for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
            if !parent.requires_grad() {
                continue;
            }
            let acc = match grads.remove(&parent.id()) {
                Some(prev) => prev.add(&pg),
                None => pg,
            };
            grads.insert(parent.id(), acc);
        }
    }
    wrt.iter()
        .map(|v| match grads.get(&v.id()) {
            Some(g) => g.clone(),
            None => Var::zeros(v.shape()),
        })
        .collect()
}

fn topo_order(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    if !root.requires_grad() {
        return order;
    }
    let mut visited = std::collections::HashSet::new();
    let mut stack: Vec<(Var, bool)> = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !visited.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        for p in &v.0.parents {
            if p.requires_grad() && !visited.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}
