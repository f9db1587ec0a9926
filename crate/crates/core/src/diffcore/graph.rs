use std::collections::BTreeMap;

use super::tensor::{Shape, Tensor};
use super::DiffError;

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MatVec(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Dot(NodeId, NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Powf(NodeId, f64),
    SmoothL1(NodeId),
    Sum(NodeId),
    Scale(NodeId, f64),
    Norm2(NodeId),
    Concat(Vec<NodeId>),
    Gather(NodeId, Vec<usize>),
    Scatter(NodeId, Vec<usize>),
    Index(NodeId, usize),
    Slice(NodeId, usize),
    Reshape(NodeId),
    Row(NodeId, usize),
    LogSumExp(NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    BatchNorm { input: NodeId, inv_std: Vec<f64> },
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
            Op::MatVec(..) => "matvec",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Dot(..) => "dot",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Powf(..) => "powf",
            Op::SmoothL1(..) => "smooth_l1",
            Op::Sum(..) => "sum",
            Op::Scale(..) => "scale",
            Op::Norm2(..) => "norm2",
            Op::Concat(..) => "concat",
            Op::Gather(..) => "gather",
            Op::Scatter(..) => "scatter",
            Op::Index(..) => "index",
            Op::Slice(..) => "slice",
            Op::Reshape(..) => "reshape",
            Op::Row(..) => "row",
            Op::LogSumExp(..) => "logsumexp",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::BatchNorm { .. } => "batch_norm",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Eagerly evaluated computation graph with a retained tape for
/// reverse-mode differentiation.
///
/// Nodes are appended in creation order, so the arena is already a
/// topological order and `backward` is a single reverse sweep.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every trainable leaf.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    by_leaf: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_leaf.get(&id)
    }

    /// Gradient for `id`; constants and non-leaf nodes have none.
    pub fn wrt(&self, id: NodeId) -> Result<&Tensor, DiffError> {
        self.by_leaf.get(&id).ok_or(DiffError::NoGradient(id.0))
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.by_leaf.iter().map(|(k, v)| (*k, v))
    }
}

fn mismatch(op: &'static str, lhs: Shape, rhs: Shape) -> DiffError {
    DiffError::ShapeMismatch { op, lhs, rhs }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Result shape of an elementwise binary op; a scalar operand broadcasts.
fn broadcast(op: &'static str, a: Shape, b: Shape) -> Result<Shape, DiffError> {
    if a == b {
        Ok(a)
    } else if a.is_scalar() {
        Ok(b)
    } else if b.is_scalar() {
        Ok(a)
    } else {
        Err(mismatch(op, a, b))
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, shape: Shape, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n = shape.len();
    let (ad, bd) = (a.data(), b.data());
    let data = (0..n)
        .map(|i| {
            let x = if ad.len() == 1 { ad[0] } else { ad[i] };
            let y = if bd.len() == 1 { bd[0] } else { bd[i] };
            f(x, y)
        })
        .collect();
    Tensor::with_shape(shape, data)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, parents: &[NodeId]) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never accumulates gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    /// Copies the value of `id` into a new constant, severing the gradient path.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let value = self.nodes[id.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    pub fn scalar_value(&self, id: NodeId) -> Option<f64> {
        self.nodes[id.0].value.as_scalar()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Tag of the operation that produced `id`.
    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, DiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = broadcast(name, va.shape(), vb.shape())?;
        let value = zip_broadcast(va, vb, shape, f);
        Ok(self.derived(value, op, &[a, b]))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let va = self.value(a);
        let value = Tensor::with_shape(va.shape(), va.data().iter().map(|&x| f(x)).collect());
        self.derived(value, op, &[a])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise quotient. A zero divisor is an error.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        if let Some(pos) = self.value(b).data().iter().position(|&y| y == 0.0) {
            return Err(DiffError::DivisionByZero { op: "div", index: pos });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId, DiffError> {
        let (vm, vv) = (self.value(m), self.value(v));
        let (rows, cols) = match (vm.shape(), vv.shape()) {
            (Shape::Matrix(r, c), Shape::Vector(n)) if c == n => (r, c),
            (a, b) => return Err(mismatch("matvec", a, b)),
        };
        let (md, x) = (vm.data(), vv.data());
        let out = (0..rows)
            .map(|i| md[i * cols..(i + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        Ok(self.derived(Tensor::vector(out), Op::MatVec(m, v), &[m, v]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (r, k, c) = match (va.shape(), vb.shape()) {
            (Shape::Matrix(r, k), Shape::Matrix(k2, c)) if k == k2 => (r, k, c),
            (x, y) => return Err(mismatch("matmul", x, y)),
        };
        let (ad, bd) = (va.data(), vb.data());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bd[p * c..(p + 1) * c];
                let orow = &mut out[i * c..(i + 1) * c];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let value = Tensor::with_shape(Shape::Matrix(r, c), out);
        Ok(self.derived(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        let Shape::Matrix(r, c) = va.shape() else {
            return Err(mismatch("transpose", va.shape(), va.shape()));
        };
        let d = va.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let value = Tensor::with_shape(Shape::Matrix(c, r), out);
        Ok(self.derived(value, Op::Transpose(a), &[a]))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        match (va.shape(), vb.shape()) {
            (Shape::Vector(n), Shape::Vector(m)) if n == m => {}
            (x, y) => return Err(mismatch("dot", x, y)),
        }
        let s = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).sum();
        Ok(self.derived(Tensor::scalar(s), Op::Dot(a, b), &[a, b]))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural logarithm. Non-positive inputs are an error.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        if let Some((index, &value)) = self.value(a).data().iter().enumerate().find(|(_, &x)| x <= 0.0) {
            return Err(DiffError::LogDomain { index, value });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, stable_sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Elementwise power with a fixed real exponent; negative bases are rejected.
    pub fn powf(&mut self, a: NodeId, exponent: f64) -> Result<NodeId, DiffError> {
        if let Some((index, &value)) = self.value(a).data().iter().enumerate().find(|(_, &x)| x < 0.0) {
            return Err(DiffError::PowDomain { index, value });
        }
        Ok(self.unary(a, |x| x.powf(exponent), Op::Powf(a, exponent)))
    }

    /// Elementwise Smooth-L1 (Huber with unit transition point).
    pub fn smooth_l1(&mut self, a: NodeId) -> NodeId {
        self.unary(a, smooth_l1, Op::SmoothL1(a))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.derived(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.unary(a, |x| x * factor, Op::Scale(a, factor))
    }

    /// Euclidean norm of all entries.
    pub fn norm2(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).data().iter().map(|x| x * x).sum::<f64>().sqrt();
        self.derived(Tensor::scalar(n), Op::Norm2(a), &[a])
    }

    /// Concatenates scalars and vectors into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        let mut out = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if let Shape::Matrix(..) = v.shape() {
                return Err(mismatch("concat", v.shape(), Shape::Vector(out.len())));
            }
            out.extend_from_slice(v.data());
        }
        Ok(self.derived(Tensor::vector(out), Op::Concat(parts.to_vec()), parts))
    }

    /// Selects entries of a vector by index, in the given order.
    pub fn gather(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        let Shape::Vector(n) = va.shape() else {
            return Err(mismatch("gather", va.shape(), Shape::Vector(indices.len())));
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(DiffError::IndexOutOfRange {
                op: "gather",
                index: bad,
                len: n,
            });
        }
        let out = indices.iter().map(|&i| va.data()[i]).collect();
        Ok(self.derived(Tensor::vector(out), Op::Gather(a, indices.to_vec()), &[a]))
    }

    /// Places the entries of `a` at `indices` of a zero vector of length `len`.
    /// Positions not named in `indices` are disconnected from the graph.
    pub fn scatter(&mut self, a: NodeId, indices: &[usize], len: usize) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        if va.shape() != Shape::Vector(indices.len()) {
            return Err(mismatch("scatter", va.shape(), Shape::Vector(indices.len())));
        }
        let mut out = vec![0.0; len];
        for (k, &i) in indices.iter().enumerate() {
            if i >= len {
                return Err(DiffError::IndexOutOfRange {
                    op: "scatter",
                    index: i,
                    len,
                });
            }
            out[i] = va.data()[k];
        }
        Ok(self.derived(Tensor::vector(out), Op::Scatter(a, indices.to_vec()), &[a]))
    }

    /// Entry `i` of a vector, as a scalar.
    pub fn index(&mut self, a: NodeId, i: usize) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        let Shape::Vector(n) = va.shape() else {
            return Err(mismatch("index", va.shape(), Shape::Scalar));
        };
        if i >= n {
            return Err(DiffError::IndexOutOfRange {
                op: "index",
                index: i,
                len: n,
            });
        }
        let v = va.data()[i];
        Ok(self.derived(Tensor::scalar(v), Op::Index(a, i), &[a]))
    }

    /// Contiguous run of `len` entries starting at `start`, taken from the
    /// flat storage of any tensor.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        if start + len > va.len() {
            return Err(DiffError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                len: va.len(),
            });
        }
        let out = va.data()[start..start + len].to_vec();
        Ok(self.derived(Tensor::vector(out), Op::Slice(a, start), &[a]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Shape) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        if va.len() != shape.len() {
            return Err(mismatch("reshape", va.shape(), shape));
        }
        let value = Tensor::with_shape(shape, va.data().to_vec());
        Ok(self.derived(value, Op::Reshape(a), &[a]))
    }

    /// Row `i` of a matrix, as a vector.
    pub fn row(&mut self, m: NodeId, i: usize) -> Result<NodeId, DiffError> {
        let vm = self.value(m);
        let Shape::Matrix(r, _) = vm.shape() else {
            return Err(mismatch("row", vm.shape(), Shape::Scalar));
        };
        let Some(row) = vm.row(i) else {
            return Err(DiffError::IndexOutOfRange {
                op: "row",
                index: i,
                len: r,
            });
        };
        let value = Tensor::vector(row.to_vec());
        Ok(self.derived(value, Op::Row(m, i), &[m]))
    }

    /// `log(sum(exp(v)))`, evaluated with max-subtraction.
    pub fn log_sum_exp(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(DiffError::EmptyInput { op: "logsumexp" });
        }
        let v = log_sum_exp(va.data());
        Ok(self.derived(Tensor::scalar(v), Op::LogSumExp(a), &[a]))
    }

    /// Adds a row vector to every row of a matrix.
    pub fn add_row(&mut self, m: NodeId, v: NodeId) -> Result<NodeId, DiffError> {
        self.row_broadcast("add_row", m, v, |x, y| x + y, Op::AddRow(m, v))
    }

    /// Multiplies every row of a matrix elementwise by a row vector.
    pub fn mul_row(&mut self, m: NodeId, v: NodeId) -> Result<NodeId, DiffError> {
        self.row_broadcast("mul_row", m, v, |x, y| x * y, Op::MulRow(m, v))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        m: NodeId,
        v: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, DiffError> {
        let (vm, vv) = (self.value(m), self.value(v));
        let (r, c) = match (vm.shape(), vv.shape()) {
            (Shape::Matrix(r, c), Shape::Vector(n)) if c == n => (r, c),
            (a, b) => return Err(mismatch(name, a, b)),
        };
        let (md, vd) = (vm.data(), vv.data());
        let out = (0..r * c).map(|i| f(md[i], vd[i % c])).collect();
        let value = Tensor::with_shape(Shape::Matrix(r, c), out);
        Ok(self.derived(value, op, &[m, v]))
    }

    /// Standardizes each column of a matrix with its own batch mean and
    /// biased variance: `(x - mean) / sqrt(var + eps)`.
    pub fn batch_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        let Shape::Matrix(r, c) = va.shape() else {
            return Err(mismatch("batch_norm", va.shape(), va.shape()));
        };
        if r == 0 {
            return Err(DiffError::EmptyInput { op: "batch_norm" });
        }
        let d = va.data();
        let (mean, var) = column_moments(d, r, c);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = (0..r * c)
            .map(|i| {
                let j = i % c;
                (d[i] - mean[j]) * inv_std[j]
            })
            .collect();
        let value = Tensor::with_shape(Shape::Matrix(r, c), out);
        Ok(self.derived(value, Op::BatchNorm { input: a, inv_std }, &[a]))
    }

    /// Reverse sweep from a scalar root. Returns the gradient of every
    /// trainable leaf (zero for leaves the root does not depend on).
    pub fn backward(&self, root: NodeId) -> Result<Gradients, DiffError> {
        let root_shape = self.shape(root);
        if !root_shape.is_scalar() {
            return Err(DiffError::NonScalarRoot(root_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }

        let by_leaf = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf))
            .map(|(i, n)| {
                let data = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; n.value.len()]);
                (NodeId(i), Tensor::with_shape(n.value.shape(), data))
            })
            .collect();
        Ok(Gradients { by_leaf })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<(), DiffError> {
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.acc_broadcast(*a, grads, g, |_, gi| gi);
                self.acc_broadcast(*b, grads, g, |_, gi| gi);
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(*a, grads, g, |_, gi| gi);
                self.acc_broadcast(*b, grads, g, |_, gi| -gi);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc_broadcast(*a, grads, g, |i, gi| gi * at(vb, i));
                self.acc_broadcast(*b, grads, g, |i, gi| gi * at(va, i));
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc_broadcast(*a, grads, g, |i, gi| gi / at(vb, i));
                self.acc_broadcast(*b, grads, g, |i, gi| {
                    let y = at(vb, i);
                    -gi * at(va, i) / (y * y)
                });
            }
            Op::MatVec(m, v) => {
                let vm = self.value(*m);
                let (rows, cols) = (vm.rows(), vm.cols());
                let (md, vd) = (vm.data(), self.value(*v).data());
                if self.requires_grad(*m) {
                    let gm = self.slot(*m, grads);
                    for i in 0..rows {
                        for j in 0..cols {
                            gm[i * cols + j] += g[i] * vd[j];
                        }
                    }
                }
                if self.requires_grad(*v) {
                    let gv = self.slot(*v, grads);
                    for i in 0..rows {
                        for j in 0..cols {
                            gv[j] += g[i] * md[i * cols + j];
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (r, k, c) = (va.rows(), va.cols(), vb.cols());
                let (ad, bd) = (va.data(), vb.data());
                if self.requires_grad(*a) {
                    let ga = self.slot(*a, grads);
                    for i in 0..r {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..c {
                                s += g[i * c + j] * bd[p * c + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                }
                if self.requires_grad(*b) {
                    let gb = self.slot(*b, grads);
                    for i in 0..r {
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..c {
                                gb[p * c + j] += aip * g[i * c + j];
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let va = self.value(*a);
                let (r, c) = (va.rows(), va.cols());
                let ga = self.slot(*a, grads);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Dot(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    for (x, y) in self.slot(*a, grads).iter_mut().zip(vb) {
                        *x += g[0] * y;
                    }
                }
                if self.requires_grad(*b) {
                    for (x, y) in self.slot(*b, grads).iter_mut().zip(va) {
                        *x += g[0] * y;
                    }
                }
            }
            Op::Exp(a) => self.acc_each(*a, grads, |i, _| g[i] * out[i]),
            Op::Log(a) => self.acc_each(*a, grads, |i, x| g[i] / x),
            Op::Sigmoid(a) => self.acc_each(*a, grads, |i, _| g[i] * out[i] * (1.0 - out[i])),
            Op::Relu(a) => self.acc_each(*a, grads, |i, x| if x > 0.0 { g[i] } else { 0.0 }),
            Op::Powf(a, p) => {
                let p = *p;
                if p != 0.0 {
                    if p < 1.0 {
                        if let Some(index) = self.value(*a).data().iter().position(|&x| x == 0.0) {
                            return Err(DiffError::DivisionByZero { op: "powf", index });
                        }
                    }
                    self.acc_each(*a, grads, |i, x| g[i] * p * x.powf(p - 1.0));
                }
            }
            Op::SmoothL1(a) => self.acc_each(*a, grads, |i, x| {
                let d = if x.abs() < 1.0 { x } else { x.signum() };
                g[i] * d
            }),
            Op::Sum(a) => self.acc_each(*a, grads, |_, _| g[0]),
            Op::Scale(a, f) => self.acc_each(*a, grads, |i, _| g[i] * f),
            Op::Norm2(a) => {
                let n = out[0];
                if n == 0.0 {
                    return Err(DiffError::DivisionByZero { op: "norm2", index: 0 });
                }
                self.acc_each(*a, grads, |_, x| g[0] * x / n);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.requires_grad(*p) {
                        for (x, y) in self.slot(*p, grads).iter_mut().zip(&g[offset..offset + len]) {
                            *x += y;
                        }
                    }
                    offset += len;
                }
            }
            Op::Gather(a, idx) => {
                let ga = self.slot(*a, grads);
                for (k, &i) in idx.iter().enumerate() {
                    ga[i] += g[k];
                }
            }
            Op::Scatter(a, idx) => {
                let ga = self.slot(*a, grads);
                for (k, &i) in idx.iter().enumerate() {
                    ga[k] += g[i];
                }
            }
            Op::Index(a, i) => {
                self.slot(*a, grads)[*i] += g[0];
            }
            Op::Slice(a, start) => {
                let ga = self.slot(*a, grads);
                for (k, gk) in g.iter().enumerate() {
                    ga[start + k] += gk;
                }
            }
            Op::Reshape(a) => self.acc_each(*a, grads, |i, _| g[i]),
            Op::Row(m, i) => {
                let c = self.value(*m).cols();
                let gm = self.slot(*m, grads);
                for (j, gj) in g.iter().enumerate() {
                    gm[i * c + j] += gj;
                }
            }
            Op::LogSumExp(a) => {
                let lse = out[0];
                self.acc_each(*a, grads, |_, x| g[0] * (x - lse).exp());
            }
            Op::AddRow(m, v) => {
                let c = self.value(*m).cols();
                if self.requires_grad(*m) {
                    for (x, y) in self.slot(*m, grads).iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if self.requires_grad(*v) {
                    let gv = self.slot(*v, grads);
                    for (i, gi) in g.iter().enumerate() {
                        gv[i % c] += gi;
                    }
                }
            }
            Op::MulRow(m, v) => {
                let c = self.value(*m).cols();
                let (md, vd) = (self.value(*m).data(), self.value(*v).data());
                if self.requires_grad(*m) {
                    for (i, x) in self.slot(*m, grads).iter_mut().enumerate() {
                        *x += g[i] * vd[i % c];
                    }
                }
                if self.requires_grad(*v) {
                    let gv = self.slot(*v, grads);
                    for (i, gi) in g.iter().enumerate() {
                        gv[i % c] += gi * md[i];
                    }
                }
            }
            Op::BatchNorm { input, inv_std } => {
                let va = self.value(*input);
                let (r, c) = (va.rows(), va.cols());
                let xhat = out;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for i in 0..r * c {
                    sum_g[i % c] += g[i];
                    sum_gx[i % c] += g[i] * xhat[i];
                }
                let n = r as f64;
                let ga = self.slot(*input, grads);
                for i in 0..r * c {
                    let j = i % c;
                    ga[i] += inv_std[j] / n * (n * g[i] - sum_g[j] - xhat[i] * sum_gx[j]);
                }
            }
        }
        Ok(())
    }

    fn slot<'g>(&self, id: NodeId, grads: &'g mut [Option<Vec<f64>>]) -> &'g mut Vec<f64> {
        let len = self.nodes[id.0].value.len();
        grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    /// Accumulates `f(i, x_i)` into the gradient of a same-shaped parent.
    fn acc_each(&self, a: NodeId, grads: &mut [Option<Vec<f64>>], f: impl Fn(usize, f64) -> f64) {
        if !self.requires_grad(a) {
            return;
        }
        let xs = self.nodes[a.0].value.data();
        let ga = self.slot(a, grads);
        for (i, (slot, &x)) in ga.iter_mut().zip(xs).enumerate() {
            *slot += f(i, x);
        }
    }

    /// Accumulates into an operand of a broadcasting binary op; a scalar
    /// operand receives the sum over all output positions.
    fn acc_broadcast(&self, a: NodeId, grads: &mut [Option<Vec<f64>>], g: &[f64], f: impl Fn(usize, f64) -> f64) {
        if !self.requires_grad(a) {
            return;
        }
        let scalar = self.nodes[a.0].value.len() == 1 && g.len() != 1;
        let ga = self.slot(a, grads);
        if scalar {
            ga[0] += g.iter().enumerate().map(|(i, &gi)| f(i, gi)).sum::<f64>();
        } else {
            for (i, (slot, &gi)) in ga.iter_mut().zip(g).enumerate() {
                *slot += f(i, gi);
            }
        }
    }
}

#[inline]
fn at(data: &[f64], i: usize) -> f64 {
    if data.len() == 1 {
        data[0]
    } else {
        data[i]
    }
}

/// Per-column mean and biased variance of a row-major matrix.
pub(crate) fn column_moments(d: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows as f64;
    let mut mean = vec![0.0; cols];
    for (i, x) in d.iter().enumerate() {
        mean[i % cols] += x;
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; cols];
    for (i, x) in d.iter().enumerate() {
        let dx = x - mean[i % cols];
        var[i % cols] += dx * dx;
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}
