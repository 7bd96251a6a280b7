//! Eager reverse-mode differentiation.
//!
//! Every operation computes its value immediately and appends a node to the
//! tape. Node ids are creation indices, so creation order is a topological
//! order and [`Tape::backward`] simply walks the nodes in reverse.

use std::fmt;

use crate::array::{axis_split, broadcast_shape, broadcast_to, reduce_to, Array};
use crate::error::{invalid, Result, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// An operation with a hand-written adjoint.
///
/// The caller computes the forward value and hands it to [`Tape::custom`];
/// the op only has to map the output gradient back onto its inputs.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradient with respect to each input, `None` meaning zero.
    fn backward(&self, inputs: &[&Array], output: &Array, grad: &Array) -> Vec<Option<Array>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Sqrt,
    Sin,
    Cos,
    Abs,
    MaxConst(f64),
    MinConst(f64),
    Clamp(f64, f64),
    LeakyRelu(f64),
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Unary::Sqrt => x.sqrt(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Abs => x.abs(),
            Unary::MaxConst(c) => x.max(c),
            Unary::MinConst(c) => x.min(c),
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
        }
    }

    /// Derivative given input `x` and output `y`. At kinks the derivative of
    /// the branch left of the kink is used.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Sqrt => 0.5 / y,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
            Unary::MaxConst(c) => {
                if x > c {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::MinConst(c) => {
                if x <= c {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Clamp(lo, hi) => {
                if x > lo && x <= hi {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
        }
    }
}

enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine { x: Var, scale: f64 },
    Unary { x: Var, f: Unary },
    Pow { x: Var, exponent: f64 },
    Atan2 { y: Var, x: Var },
    Matmul(Var, Var),
    Transpose(Var),
    SumAll(Var),
    SumAxis { x: Var, axis: usize },
    Broadcast(Var),
    Reshape(Var),
    Gather { x: Var, indices: Vec<usize> },
    ScatterAdd { x: Var, indices: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Affine { .. } => "affine",
            Op::Unary { .. } => "unary",
            Op::Pow { .. } => "pow",
            Op::Atan2 { .. } => "atan2",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::SumAll(..) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Broadcast(..) => "broadcast",
            Op::Reshape(..) => "reshape",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward pass. Owned by a single training step and dropped
/// afterwards; calling [`Tape::backward`] a second time is an error.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    differentiated: bool,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("differentiated", &self.differentiated)
            .finish()
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Array>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`; exactly zero when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Array {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Array> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Array {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Array::zeros(self.shapes[v.0].clone()),
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
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

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Matmul(a, b) => {
                vec![*a, *b]
            }
            Op::Atan2 { y, x } => vec![*y, *x],
            Op::Affine { x, .. }
            | Op::Unary { x, .. }
            | Op::Pow { x, .. }
            | Op::Transpose(x)
            | Op::SumAll(x)
            | Op::SumAxis { x, .. }
            | Op::Broadcast(x)
            | Op::Reshape(x)
            | Op::Gather { x, .. }
            | Op::ScatterAdd { x, .. }
            | Op::Slice { x, .. } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array::scalar(value))
    }

    // ---- elementwise binary ----

    fn broadcast_pair(&mut self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa == sb {
            return Ok((a, b));
        }
        let target = broadcast_shape(&sa, &sb).ok_or(TensorError::ShapeMismatch {
            op,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let a = if sa == target { a } else { self.broadcast(a, &target)? };
        let b = if sb == target { b } else { self.broadcast(b, &target)? };
        Ok((a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair("div", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var> {
        let (y, x) = self.broadcast_pair("atan2", y, x)?;
        let v = self.value(y).zip_map(self.value(x), f64::atan2);
        Ok(self.push(v, Op::Atan2 { y, x }))
    }

    // ---- elementwise unary ----

    /// `scale * x + offset`.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        let v = self.value(x).map(|a| scale * a + offset);
        self.push(v, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, 1.0, c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    fn unary(&mut self, x: Var, f: Unary) -> Var {
        let v = self.value(x).map(|a| f.apply(a));
        self.push(v, Op::Unary { x, f })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }
    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sin)
    }
    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Cos)
    }
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }
    pub fn max_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::MaxConst(c))
    }
    pub fn min_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::MinConst(c))
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.max_scalar(x, 0.0)
    }
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(slope))
    }
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(invalid("clamp", format!("lo {lo} > hi {hi}")));
        }
        Ok(self.unary(x, Unary::Clamp(lo, hi)))
    }

    pub fn pow(&mut self, x: Var, exponent: f64) -> Var {
        let v = self.value(x).map(|a| a.powf(exponent));
        self.push(v, Op::Pow { x, exponent })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.pow(x, 2.0)
    }

    // ---- linear algebra ----

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let v = Array::new([m, n], data)?;
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(invalid("transpose", format!("needs a matrix, got {:?}", s)));
        }
        let (r, c) = (s[0], s[1]);
        let v = Array::new([c, r], transpose_raw(self.value(x).data(), r, c))?;
        Ok(self.push(v, Op::Transpose(x)))
    }

    // ---- reductions and shape ----

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Array::scalar(self.value(x).sum());
        self.push(v, Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(invalid("sum_axis", format!("axis {axis} out of range for {:?}", shape)));
        }
        let (outer, extent, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let v = Array::new(out_shape, out)?;
        Ok(self.push(v, Op::SumAxis { x, axis }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let extent = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| invalid("mean_axis", format!("axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / extent as f64))
    }

    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x).to_vec();
        match broadcast_shape(&src, shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast",
                    lhs: src,
                    rhs: shape.to_vec(),
                })
            }
        }
        let v = broadcast_to(self.value(x), shape);
        Ok(self.push(v, Op::Broadcast(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Rows `indices` of `x` along axis 0.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(invalid("gather", "cannot gather from a scalar"));
        }
        let rows = shape[0];
        let inner: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= rows {
                return Err(invalid("gather", format!("index {i} out of range for {rows} rows")));
            }
            out.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        let v = Array::new(out_shape, out)?;
        Ok(self.push(
            v,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Adds row `k` of `x` into row `indices[k]` of a zero array with `rows` rows.
    pub fn scatter_add(&mut self, x: Var, indices: &[usize], rows: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || shape[0] != indices.len() {
            return Err(invalid(
                "scatter_add",
                format!("{} indices for source of shape {:?}", indices.len(), shape),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * inner];
        for (k, &i) in indices.iter().enumerate() {
            if i >= rows {
                return Err(invalid("scatter_add", format!("index {i} out of range for {rows} rows")));
            }
            for j in 0..inner {
                out[i * inner + j] += src[k * inner + j];
            }
        }
        let mut out_shape = shape;
        out_shape[0] = rows;
        let v = Array::new(out_shape, out)?;
        Ok(self.push(
            v,
            Op::ScatterAdd {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| invalid("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {:?}", first)));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let ext = self.shape(x)[axis];
                let d = self.value(x).data();
                out.extend_from_slice(&d[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let v = Array::new(shape, out)?;
        Ok(self.push(
            v,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    /// Entries `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {:?}", start + len, shape),
            ));
        }
        let (outer, ext, inner) = axis_split(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let v = Array::new(out_shape, out)?;
        Ok(self.push(v, Op::Slice { x, axis, start }))
    }

    /// Element `i` of a 1-D array as a scalar node.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let s = self.slice(x, 0, i, 1)?;
        self.reshape(s, &[])
    }

    /// Packs scalar nodes into a 1-D array.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let parts = xs
            .iter()
            .map(|&x| self.reshape(x, &[1]))
            .collect::<Result<Vec<_>>>()?;
        self.concat(&parts, 0)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let last = *shape.last().ok_or_else(|| invalid("softmax", "scalar input"))?;
        let rows = self.value(x).len() / last;
        // Shifting by a constant row max leaves softmax and its gradient unchanged.
        let mut shift = Vec::with_capacity(rows * last);
        for r in self.value(x).data().chunks(last) {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            shift.extend(std::iter::repeat_n(m, last));
        }
        let shift = self.constant(Array::new(shape.clone(), shift)?);
        let centered = self.sub(x, shift)?;
        let e = self.exp(centered);
        let s = self.sum_axis(e, shape.len() - 1)?;
        let mut keep = shape.clone();
        *keep.last_mut().unwrap() = 1;
        let s = self.reshape(s, &keep)?;
        self.div(e, s)
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Array, op: Box<dyn CustomOp>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    // ---- backward ----

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.differentiated {
            return Err(TensorError::BackwardTwice);
        }
        let ls = self.shape(loss).to_vec();
        if ls.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(ls));
        }
        self.differentiated = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Array>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Array::ones(ls));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Array>], v: Var, g: Array) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, id: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    self.accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(val(*b), |g, y| g * y));
                }
                if needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(val(*a), |g, x| g * x));
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |g, y| g / y));
                }
                if needs(*b) {
                    // d(a/b)/db = -out / b
                    let t = g.zip_map(out, |g, o| g * o);
                    self.accumulate(grads, *b, t.zip_map(bv, |t, y| -t / y));
                }
            }
            Op::Atan2 { y, x } => {
                let (yv, xv) = (val(*y), val(*x));
                let r2 = yv.zip_map(xv, |a, b| a * a + b * b);
                if needs(*y) {
                    let t = g.zip_map(xv, |g, b| g * b);
                    self.accumulate(grads, *y, t.zip_map(&r2, |t, r| t / r));
                }
                if needs(*x) {
                    let t = g.zip_map(yv, |g, a| -g * a);
                    self.accumulate(grads, *x, t.zip_map(&r2, |t, r| t / r));
                }
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                self.accumulate(grads, *x, g.map(|g| g * s));
            }
            Op::Unary { x, f } => {
                let xv = val(*x);
                let mut d = g.clone();
                for ((dg, &xi), &yi) in d.data_mut().iter_mut().zip(xv.data()).zip(out.data()) {
                    *dg *= f.derivative(xi, yi);
                }
                self.accumulate(grads, *x, d);
            }
            Op::Pow { x, exponent } => {
                let p = *exponent;
                let d = val(*x).zip_map(g, |x, g| g * p * x.powf(p - 1.0));
                self.accumulate(grads, *x, d);
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if needs(*a) {
                    let bt = transpose_raw(bv.data(), k, n);
                    let ga = matmul_raw(g.data(), &bt, m, n, k);
                    self.accumulate(grads, *a, Array::new([m, k], ga).unwrap());
                }
                if needs(*b) {
                    let at = transpose_raw(av.data(), m, k);
                    let gb = matmul_raw(&at, g.data(), k, m, n);
                    self.accumulate(grads, *b, Array::new([k, n], gb).unwrap());
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let d = Array::new([c, r], transpose_raw(g.data(), r, c)).unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::SumAll(x) => {
                let gv = g.item();
                self.accumulate(grads, *x, Array::full(val(*x).shape().to_vec(), gv));
            }
            Op::SumAxis { x, axis } => {
                let shape = val(*x).shape().to_vec();
                let (outer, extent, inner) = axis_split(&shape, *axis);
                let mut d = vec![0.0; outer * extent * inner];
                for o in 0..outer {
                    for e in 0..extent {
                        let base = (o * extent + e) * inner;
                        d[base..base + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *x, Array::new(shape, d).unwrap());
            }
            Op::Broadcast(x) => {
                self.accumulate(grads, *x, reduce_to(g, val(*x).shape()));
            }
            Op::Reshape(x) => {
                let d = g.clone().reshape(val(*x).shape().to_vec()).unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Gather { x, indices } => {
                let shape = val(*x).shape().to_vec();
                let inner: usize = shape[1..].iter().product();
                let mut d = Array::zeros(shape);
                let dd = d.data_mut();
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..inner {
                        dd[i * inner + j] += g.data()[k * inner + j];
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::ScatterAdd { x, indices } => {
                let shape = val(*x).shape().to_vec();
                let inner: usize = shape[1..].iter().product();
                let mut d = Vec::with_capacity(indices.len() * inner);
                for &i in indices {
                    d.extend_from_slice(&g.data()[i * inner..(i + 1) * inner]);
                }
                self.accumulate(grads, *x, Array::new(shape, d).unwrap());
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let shape = val(x).shape().to_vec();
                    let ext = shape[*axis];
                    if needs(x) {
                        let mut d = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[base..base + ext * inner]);
                        }
                        self.accumulate(grads, x, Array::new(shape, d).unwrap());
                    }
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = val(*x).shape().to_vec();
                let (outer, ext, inner) = axis_split(&shape, *axis);
                let len = out.shape()[*axis];
                let mut d = vec![0.0; outer * ext * inner];
                for o in 0..outer {
                    let base = (o * ext + start) * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, Array::new(shape, d).unwrap());
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Array> = inputs.iter().map(|&v| val(v)).collect();
                let gs = op.backward(&ins, out, g);
                debug_assert_eq!(gs.len(), inputs.len(), "{} returned wrong arity", op.name());
                for (&v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        debug_assert_eq!(gi.shape(), val(v).shape(), "{} grad shape", op.name());
                        self.accumulate(grads, v, gi);
                    }
                }
            }
        }
    }

    /// Name of the op that produced `v`; used in diagnostics.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let mut t = Tape::new();
        let x = t.leaf(Array::scalar(2.0));
        let y = t.leaf(Array::scalar(3.0));
        let z = t.mul(x, y).unwrap();
        assert_eq!(t.value(z).item(), 6.0);
        let g = t.backward(z).unwrap();
        assert_eq!(g.get(x).item(), 3.0);
        assert_eq!(g.get(y).item(), 2.0);
    }

    #[test]
    fn tanh_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Array::scalar(0.0));
        let y = t.tanh(x);
        assert_eq!(t.value(y).item(), 0.0);
        assert_eq!(t.backward(y).unwrap().get(x).item(), 1.0);
    }

    #[test]
    fn sum_exp_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Array::from_vec(vec![0.0, 1.0]));
        let e = t.exp(x);
        let s = t.sum(e);
        let g = t.backward(s).unwrap().get(x);
        assert!((g.data()[0] - 1.0).abs() < 1e-15);
        assert!((g.data()[1] - std::f64::consts::E).abs() < 1e-12);
    }

    #[test]
    fn identity_and_sum_rule() {
        let mut t = Tape::new();
        let x = t.leaf(Array::scalar(1.5));
        assert_eq!(t.backward(x).unwrap().get(x).item(), 1.0);

        let mut t = Tape::new();
        let x = t.leaf(Array::scalar(1.5));
        let y = t.leaf(Array::scalar(-4.0));
        let xy = t.mul(x, y).unwrap();
        let l = t.add(xy, x).unwrap();
        assert_eq!(t.backward(l).unwrap().get(x).item(), -3.0);
    }

    #[test]
    fn unreachable_leaf_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Array::from_vec(vec![1.0, 2.0]));
        let unused = t.leaf(Array::from_vec(vec![5.0, 6.0, 7.0]));
        let l = t.sum(x);
        let g = t.backward(l).unwrap();
        assert!(g.get_ref(unused).is_none());
        assert_eq!(g.get(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn reused_input_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Array::scalar(3.0));
        let a = t.square(x);
        let b = t.scale(x, 4.0);
        let l = t.add(a, b).unwrap();
        assert_eq!(t.backward(l).unwrap().get(x).item(), 10.0);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut t = Tape::new();
        let x = t.leaf(Array::scalar(1.0));
        let y = t.exp(x);
        t.backward(y).unwrap();
        assert!(matches!(t.backward(y), Err(TensorError::BackwardTwice)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Array::zeros([3]));
        assert!(matches!(t.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut t = Tape::new();
        let a = t.leaf(Array::zeros([2, 3]));
        let b = t.leaf(Array::zeros([4]));
        let err = t.add(a, b).unwrap_err();
        match err {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4]);
            }
            e => panic!("unexpected {e:?}"),
        }
        let c = t.leaf(Array::zeros([3, 2]));
        assert!(t.matmul(a, a).is_err());
        assert!(t.matmul(a, c).is_ok());
    }

    #[test]
    fn kinks_use_left_branch() {
        let mut t = Tape::new();
        let x = t.leaf(Array::from_vec(vec![0.0, 1.0, -1.0]));
        let m = t.max_scalar(x, 0.0);
        let a = t.abs(x);
        let c = t.clamp(x, -1.0, 1.0).unwrap();
        let s1 = t.sum(m);
        let s2 = t.sum(a);
        let s3 = t.sum(c);
        let s12 = t.add(s1, s2).unwrap();
        let l = t.add(s12, s3).unwrap();
        let g = t.backward(l).unwrap().get(x);
        // max: [0,1,0], abs: [-1,1,-1], clamp: [1,1,0]
        assert_eq!(g.data(), &[0.0, 3.0, -1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.leaf(Array::new([2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap());
        let s = t.softmax(x).unwrap();
        let v = t.value(s);
        assert!((v.data()[..3].iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((v.data()[3] - 1.0 / 3.0).abs() < 1e-15);
    }
}
