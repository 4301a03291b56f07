//! Tape-based reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Every operation appends a node to a [`Tape`] and returns a [`Var`] handle.
//! Node inputs always carry smaller ids than the node itself, so the tape is
//! topologically ordered by construction and [`Tape::backward`] is a single
//! reverse sweep.
//!
//! ```
//! use hierdet::autodiff::{Shape, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.variable(vec![1.0, -2.0], Shape::new(&[2]).unwrap()).unwrap();
//! let sq = tape.square(x);
//! let y = tape.sum(sq);
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0]);
//! ```

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};

/// Ordered list of positive extents.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Shape("shape must have at least one dimension".into()));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "extent {pos} of {dims:?} is zero; every extent must be >= 1"
            )));
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn scalar() -> Self {
        Shape(vec![1])
    }

    pub fn vector(n: usize) -> Result<Self> {
        Self::new(&[n])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Neg,
    Sigmoid,
    Exp,
    Log,
    Relu,
    Square,
    /// Gradient passes on the closed interval `[lo, hi]`.
    Clamp { lo: f64, hi: f64 },
    Atan,
    Softplus,
}

impl Unary {
    pub fn name(&self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Sigmoid => "sigmoid",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Relu => "relu",
            Unary::Square => "square",
            Unary::Clamp { .. } => "clamp",
            Unary::Atan => "atan",
            Unary::Softplus => "softplus",
        }
    }

    fn apply(&self, x: f64) -> f64 {
        match *self {
            Unary::Neg => -x,
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Relu => x.max(0.0),
            Unary::Square => x * x,
            Unary::Clamp { lo, hi } => x.clamp(lo, hi),
            Unary::Atan => x.atan(),
            Unary::Softplus => softplus(x),
        }
    }

    /// Local derivative given the input `x` and output `y`.
    fn derivative(&self, x: f64, y: f64) -> f64 {
        match *self {
            Unary::Neg => -1.0,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Clamp { lo, hi } => {
                if (lo..=hi).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Atan => 1.0 / (1.0 + x * x),
            Unary::Softplus => sigmoid(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    /// Ties route the gradient to the left operand.
    Min,
    /// Ties route the gradient to the left operand.
    Max,
}

impl Binary {
    pub fn name(&self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
            Binary::Min => "min",
            Binary::Max => "max",
        }
    }

    fn apply(&self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
            Binary::Min => {
                if a <= b {
                    a
                } else {
                    b
                }
            }
            Binary::Max => {
                if a >= b {
                    a
                } else {
                    b
                }
            }
        }
    }

    /// Partial derivatives `(d/da, d/db)`.
    fn partials(&self, a: f64, b: f64) -> (f64, f64) {
        match self {
            Binary::Add => (1.0, 1.0),
            Binary::Sub => (1.0, -1.0),
            Binary::Mul => (b, a),
            Binary::Div => (1.0 / b, -a / (b * b)),
            Binary::Min => {
                if a <= b {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
            Binary::Max => {
                if a >= b {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    BiasAdd {
        input: Var,
        bias: Var,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Reduce {
        input: Var,
        kind: ReduceKind,
        map: Vec<usize>,
        count: usize,
    },
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
    Reshape(Var),
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Shape,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Arena of nodes in topological order plus their adjoints.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    adjoints: Vec<Option<Vec<f64>>>,
    sign_flip: Option<&'static str>,
    /// Values of every [`Tape::stop_gradient`] leaf, in creation order.
    stopped: Vec<Vec<f64>>,
    /// Values to substitute for the next stop-gradient leaves.
    replay: Option<std::vec::IntoIter<Vec<f64>>>,
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

    /// Test fixture: negate the backward rule of the named op.
    #[doc(hidden)]
    pub fn inject_sign_flip(&mut self, op_name: &'static str) {
        self.sign_flip = Some(op_name);
    }

    fn flip(&self, name: &str) -> f64 {
        if self.sign_flip == Some(name) {
            -1.0
        } else {
            1.0
        }
    }

    fn push(&mut self, shape: Shape, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.numel(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.adjoints.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn leaf(&mut self, data: Vec<f64>, shape: Shape, requires_grad: bool) -> Result<Var> {
        if data.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        Ok(self.push(shape, data, Op::Leaf, requires_grad))
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, data: Vec<f64>, shape: Shape) -> Result<Var> {
        self.leaf(data, shape, false)
    }

    /// A differentiable leaf.
    pub fn variable(&mut self, data: Vec<f64>, shape: Shape) -> Result<Var> {
        self.leaf(data, shape, true)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push(Shape::scalar(), vec![x], Op::Leaf, false)
    }

    /// Constant computed from values on the tape but excluded from backward
    /// (a stop-gradient). Its value is recorded; a tape primed with
    /// [`Tape::replay_stop_gradients`] uses the recorded values instead, so
    /// finite differences can evaluate the function backward describes.
    pub fn stop_gradient(&mut self, data: Vec<f64>, shape: Shape) -> Result<Var> {
        let data = match self.replay.as_mut().and_then(Iterator::next) {
            Some(frozen) if frozen.len() == data.len() => frozen,
            Some(frozen) => {
                return Err(Error::Shape(format!(
                    "replayed stop-gradient has {} values, expected {}",
                    frozen.len(),
                    data.len()
                )))
            }
            None => data,
        };
        self.stopped.push(data.clone());
        self.leaf(data, shape, false)
    }

    pub fn stop_gradient_values(&self) -> &[Vec<f64>] {
        &self.stopped
    }

    pub fn replay_stop_gradients(&mut self, values: Vec<Vec<f64>>) {
        self.replay = Some(values.into_iter());
    }

    /// Copy of `x` cut off from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let node = self.node(x);
        let (shape, value) = (node.shape.clone(), node.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &Shape {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// First element of the node's value.
    pub fn item(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.adjoints[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.adjoints.iter_mut().for_each(|a| *a = None);
    }

    // ---- elementwise -------------------------------------------------------

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let node = self.node(x);
        if kind == Unary::Log {
            if let Some((index, &value)) = node.value.iter().enumerate().find(|(_, &v)| v <= 0.0) {
                return Err(Error::LogDomain { index, value });
            }
        }
        if let Unary::Clamp { lo, hi } = kind {
            if !(lo <= hi) {
                return Err(Error::Shape(format!("clamp bounds [{lo}, {hi}] are empty")));
            }
        }
        let value = node.value.iter().map(|&v| kind.apply(v)).collect();
        let (shape, rg) = (node.shape.clone(), node.requires_grad);
        Ok(self.push(shape, value, Op::Unary(kind, x), rg))
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        let (la, lb) = (na.value.len(), nb.value.len());
        let shape = if na.shape == nb.shape || lb == 1 {
            na.shape.clone()
        } else if la == 1 {
            nb.shape.clone()
        } else {
            return Err(Error::Shape(format!(
                "{}: operand shapes {} and {} are not broadcast-compatible",
                kind.name(),
                na.shape,
                nb.shape
            )));
        };
        let n = shape.numel();
        let value = (0..n)
            .map(|i| kind.apply(na.value[i % la], nb.value[i % lb]))
            .collect();
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(shape, value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Min, a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Max, a, b)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x).expect("neg is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x).expect("sigmoid is total")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x).expect("exp is total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x).expect("relu is total")
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x).expect("square is total")
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(Unary::Clamp { lo, hi }, x)
    }

    pub fn atan(&mut self, x: Var) -> Var {
        self.unary(Unary::Atan, x).expect("atan is total")
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x).expect("softplus is total")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = self.scalar(c);
        self.mul(x, c).expect("scalar broadcast")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = self.scalar(c);
        self.add(x, c).expect("scalar broadcast")
    }

    /// Elementwise `-[t ln σ(x) + (1 - t) ln(1 - σ(x))]`, evaluated as
    /// `softplus(x) - t x` so saturated logits stay finite.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let node = self.node(logits);
        if targets.len() != node.value.len() {
            return Err(Error::Shape(format!(
                "bce: {} targets for logits of shape {}",
                targets.len(),
                node.shape
            )));
        }
        let value = node
            .value
            .iter()
            .zip(targets)
            .map(|(&x, &t)| softplus(x) - t * x)
            .collect();
        let (shape, rg) = (node.shape.clone(), node.requires_grad);
        let op = Op::BceWithLogits {
            logits,
            targets: targets.to_vec(),
        };
        Ok(self.push(shape, value, op, rg))
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        let (&[m, k], &[k2, n]) = (na.shape.dims(), nb.shape.dims()) else {
            return Err(Error::Shape(format!(
                "matmul expects rank-2 operands, got {} and {}",
                na.shape, nb.shape
            )));
        };
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {} vs {}",
                na.shape, nb.shape
            )));
        }
        let mut value = vec![0.0; m * n];
        gemm(m, k, n, &na.value, false, &nb.value, false, &mut value, false);
        let rg = na.requires_grad || nb.requires_grad;
        let shape = Shape::new(&[m, n])?;
        Ok(self.push(shape, value, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Cross-correlation of `input [C_in,H,W]` with `kernels [C_out,C_in,kh,kw]`.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ni, nk) = (self.node(input), self.node(kernels));
        let (&[c_in, h, w], &[c_out, c_k, kh, kw]) = (ni.shape.dims(), nk.shape.dims()) else {
            return Err(Error::Shape(format!(
                "conv2d expects [C,H,W] input and [O,C,kh,kw] kernels, got {} and {}",
                ni.shape, nk.shape
            )));
        };
        if c_in != c_k {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input {c_in}, kernels {c_k}"
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d stride must be positive".into()));
        }
        let out_extent = |len: usize, k: usize| -> Result<usize> {
            let padded = len + 2 * pad;
            if padded < k || (padded - k) % stride != 0 {
                return Err(Error::Shape(format!(
                    "conv2d output size ({len} + 2*{pad} - {k})/{stride} + 1 is not integral"
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out: out_extent(h, kh)?,
            w_out: out_extent(w, kw)?,
        };
        let cols = im2col(&ni.value, &geom);
        let mut value = vec![0.0; c_out * geom.out_len()];
        gemm(
            c_out,
            geom.patch_len(),
            geom.out_len(),
            &nk.value,
            false,
            &cols,
            false,
            &mut value,
            false,
        );
        let rg = ni.requires_grad || nk.requires_grad;
        let shape = Shape::new(&[c_out, geom.h_out, geom.w_out])?;
        let op = Op::Conv2d {
            input,
            kernel: kernels,
            geom,
            cols,
        };
        Ok(self.push(shape, value, op, rg))
    }

    /// Adds `bias[c]` to every element of channel `c` of `input [C, ...]`.
    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (ni, nb) = (self.node(input), self.node(bias));
        let c = ni.shape.dims()[0];
        if nb.value.len() != c {
            return Err(Error::Shape(format!(
                "bias of shape {} does not match {c} channels",
                nb.shape
            )));
        }
        let inner = ni.value.len() / c;
        let value = ni
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| x + nb.value[i / inner])
            .collect();
        let rg = ni.requires_grad || nb.requires_grad;
        let shape = ni.shape.clone();
        Ok(self.push(shape, value, Op::BiasAdd { input, bias }, rg))
    }

    /// 2×2 max pooling with stride 2 over `[C,H,W]`; ties pick the first
    /// element in row-major window order.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let ni = self.node(input);
        let &[c, h, w] = ni.shape.dims() else {
            return Err(Error::Shape(format!("max_pool2 expects [C,H,W], got {}", ni.shape)));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("max_pool2 needs even extents, got {}", ni.shape)));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut value = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = ch * h * w + 2 * oy * w + 2 * ox;
                    let mut best = base;
                    for cand in [base + 1, base + w, base + w + 1] {
                        if ni.value[cand] > ni.value[best] {
                            best = cand;
                        }
                    }
                    value.push(ni.value[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = ni.requires_grad;
        let shape = Shape::new(&[c, ho, wo])?;
        Ok(self.push(shape, value, Op::MaxPool2 { input, argmax }, rg))
    }

    // ---- reductions and indexing -------------------------------------------

    /// Reduces over `axes`; the reduced axes are removed from the shape
    /// (a full reduction yields shape `[1]`).
    pub fn reduce(&mut self, kind: ReduceKind, input: Var, axes: &[usize]) -> Result<Var> {
        let ni = self.node(input);
        let dims = ni.shape.dims();
        let mut set = BTreeSet::new();
        for &axis in axes {
            if axis >= dims.len() || !set.insert(axis) {
                return Err(Error::InvalidAxis {
                    axis,
                    rank: dims.len(),
                });
            }
        }
        let kept: Vec<usize> = (0..dims.len()).filter(|a| !set.contains(a)).collect();
        let out_dims: Vec<usize> = kept.iter().map(|&a| dims[a]).collect();
        let out_shape = if out_dims.is_empty() {
            Shape::scalar()
        } else {
            Shape::new(&out_dims)?
        };
        let count: usize = set.iter().map(|&a| dims[a]).product();

        // Row-major strides of the input and of the kept axes in the output.
        let mut in_strides = vec![1; dims.len()];
        for a in (0..dims.len().saturating_sub(1)).rev() {
            in_strides[a] = in_strides[a + 1] * dims[a + 1];
        }
        let mut out_strides = vec![0; dims.len()];
        let mut acc = 1;
        for &a in kept.iter().rev() {
            out_strides[a] = acc;
            acc *= dims[a];
        }
        let map: Vec<usize> = (0..ni.value.len())
            .map(|i| {
                (0..dims.len())
                    .map(|a| (i / in_strides[a]) % dims[a] * out_strides[a])
                    .sum()
            })
            .collect();

        let mut value = vec![0.0; out_shape.numel()];
        for (x, &o) in ni.value.iter().zip(&map) {
            value[o] += x;
        }
        if kind == ReduceKind::Mean {
            let inv = 1.0 / count as f64;
            value.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = ni.requires_grad;
        let op = Op::Reduce {
            input,
            kind,
            map,
            count,
        };
        Ok(self.push(out_shape, value, op, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(input).rank()).collect();
        self.reduce(ReduceKind::Sum, input, &axes)
            .expect("full reduction axes are valid")
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(input).rank()).collect();
        self.reduce(ReduceKind::Mean, input, &axes)
            .expect("full reduction axes are valid")
    }

    /// Selects flat elements of `input` into a new array of `shape`.
    pub fn gather(&mut self, input: Var, indices: Vec<usize>, shape: Shape) -> Result<Var> {
        let ni = self.node(input);
        if indices.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "gather: {} indices for shape {shape}",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= ni.value.len()) {
            return Err(Error::Shape(format!(
                "gather index {bad} out of bounds for {} elements",
                ni.value.len()
            )));
        }
        let value = indices.iter().map(|&i| ni.value[i]).collect();
        let rg = ni.requires_grad;
        Ok(self.push(shape, value, Op::Gather { input, indices }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: Shape) -> Result<Var> {
        let ni = self.node(input);
        if ni.value.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {} into {shape}",
                ni.shape
            )));
        }
        let (value, rg) = (ni.value.clone(), ni.requires_grad);
        Ok(self.push(shape, value, Op::Reshape(input), rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a single-element `root`. Adjoints accumulate into
    /// any existing values; call [`Tape::zero_grad`] between sweeps.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let n = self.node(root).value.len();
        if n != 1 {
            return Err(Error::RootNotScalar(n));
        }
        match &mut self.adjoints[root.0] {
            Some(g) => g[0] += 1.0,
            slot @ None => *slot = Some(vec![1.0]),
        }
        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.adjoints[id].take() else {
                continue;
            };
            self.propagate(id, &g);
            self.adjoints[id] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        // Split borrows: node data is read-only while adjoints of inputs grow.
        let nodes = std::mem::take(&mut self.nodes);
        let node = &nodes[id];
        let s = match &node.op {
            Op::Unary(kind, _) => self.flip(kind.name()),
            Op::Binary(kind, _, _) => self.flip(kind.name()),
            _ => 1.0,
        };
        let mut out = Accum {
            nodes: &nodes,
            adjoints: &mut self.adjoints,
        };
        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, x) => {
                let xs = &nodes[x.0].value;
                if let Some(gx) = out.get(*x) {
                    for i in 0..g.len() {
                        gx[i] += s * g[i] * kind.derivative(xs[i], node.value[i]);
                    }
                }
            }
            Op::Binary(kind, a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (la, lb) = (va.len(), vb.len());
                let partials: Vec<(f64, f64)> = (0..g.len())
                    .map(|i| kind.partials(va[i % la], vb[i % lb]))
                    .collect();
                if let Some(ga) = out.get(*a) {
                    for i in 0..g.len() {
                        ga[i % la] += s * g[i] * partials[i].0;
                    }
                }
                if let Some(gb) = out.get(*b) {
                    for i in 0..g.len() {
                        gb[i % lb] += s * g[i] * partials[i].1;
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = out.get(*a) {
                    // dA = dC · Bᵀ
                    gemm(*m, *n, *k, g, false, vb, true, ga, true);
                }
                if let Some(gb) = out.get(*b) {
                    // dB = Aᵀ · dC
                    gemm(*k, *m, *n, va, true, g, false, gb, true);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let (p, q) = (geom.patch_len(), geom.out_len());
                if let Some(gk) = out.get(*kernel) {
                    gemm(geom.c_out, q, p, g, false, cols, true, gk, true);
                }
                let kv = &nodes[kernel.0].value;
                if let Some(gi) = out.get(*input) {
                    let mut dcols = vec![0.0; p * q];
                    gemm(p, geom.c_out, q, kv, true, g, false, &mut dcols, false);
                    col2im_add(&dcols, geom, gi);
                }
            }
            Op::BiasAdd { input, bias } => {
                if let Some(gi) = out.get(*input) {
                    gi.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(gb) = out.get(*bias) {
                    let inner = g.len() / gb.len();
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i / inner] += gv;
                    }
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if let Some(gi) = out.get(*input) {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        gi[src] += gv;
                    }
                }
            }
            Op::Reduce {
                input,
                kind,
                map,
                count,
            } => {
                let scale = match kind {
                    ReduceKind::Sum => 1.0,
                    ReduceKind::Mean => 1.0 / *count as f64,
                };
                if let Some(gi) = out.get(*input) {
                    for (gv, &o) in gi.iter_mut().zip(map) {
                        *gv += g[o] * scale;
                    }
                }
            }
            Op::Gather { input, indices } => {
                if let Some(gi) = out.get(*input) {
                    for (&src, &gv) in indices.iter().zip(g) {
                        gi[src] += gv;
                    }
                }
            }
            Op::Reshape(input) => {
                if let Some(gi) = out.get(*input) {
                    gi.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let xs = &nodes[logits.0].value;
                if let Some(gx) = out.get(*logits) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * (sigmoid(xs[i]) - targets[i]);
                    }
                }
            }
        }
        self.nodes = nodes;
    }
}

struct Accum<'a> {
    nodes: &'a [Node],
    adjoints: &'a mut [Option<Vec<f64>>],
}

impl Accum<'_> {
    fn get(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.adjoints[v.0].get_or_insert_with(|| vec![0.0; len]))
    }
}

/// `c (+)= op(a) · op(b)` for row-major operands, where `op(a)` is `m×k` and
/// `op(b)` is `k×n`. A transposed operand is stored in its untransposed
/// row-major layout.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches given
    // these row/column strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let q = g.out_len();
    let mut cols = vec![0.0; g.patch_len() * q];
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * q..(row + 1) * q];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = c * g.h * g.w + iy as usize * g.w;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.w_out + ox] = input[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let q = g.out_len();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * q..(row + 1) * q];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = c * g.h * g.w + iy as usize * g.w;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            out[dst_row + ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}
