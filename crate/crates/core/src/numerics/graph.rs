//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation is evaluated when it is recorded, so building the graph
//! is also its first forward pass. Leaves can later be overwritten with
//! [`Graph::set_values`] and the whole tape replayed with [`Graph::forward`].
//! Nodes are appended in evaluation order, which makes the node sequence a
//! topological order by construction.

use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[r, c] + [c]`, the vector added to every row.
    AddRow(Var, Var),
    /// Tensor times a scalar node.
    MulScalar(Var, Var),
    /// Tensor plus a scalar node.
    AddScalar(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Sum(Var),
    Mean(Var),
    MeanAxis(Var, usize),
    RowNorm(Var),
    Cosine(Var, Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    WeightedLogSumExpRows(Var, Rc<Vec<f64>>),
    SelectPerRow(Var, Rc<Vec<usize>>),
    Reshape(Var),
    ConcatRows(Rc<Vec<Var>>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulScalar(..) => "mul_scalar",
            Op::AddScalar(..) => "add_scalar",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanAxis(..) => "mean_axis",
            Op::RowNorm(..) => "row_norm",
            Op::Cosine(..) => "cosine",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSumExpRows(..) => "logsumexp_rows",
            Op::WeightedLogSumExpRows(..) => "weighted_logsumexp_rows",
            Op::SelectPerRow(..) => "select_per_row",
            Op::Reshape(..) => "reshape",
            Op::ConcatRows(..) => "concat_rows",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulScalar(a, b)
            | Op::AddScalar(a, b)
            | Op::MatMul(a, b)
            | Op::Cosine(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanAxis(a, _)
            | Op::RowNorm(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::SoftmaxRows(a)
            | Op::LogSumExpRows(a)
            | Op::WeightedLogSumExpRows(a, _)
            | Op::SelectPerRow(a, _)
            | Op::Reshape(a) => vec![*a],
            Op::ConcatRows(parts) => parts.as_ref().clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Ordered tape of operations and their cached outputs.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Adds a leaf; it participates in differentiation iff the tensor
    /// was marked with [`Tensor::with_grad`].
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: tensor,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, values)?.with_grad()))
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, values)?))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn values(&self, var: Var) -> &[f64] {
        self.nodes[var.0].value.values()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.values()[0]
    }

    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.nodes[var.0].value.grad()
    }

    /// Overwrites the values of a leaf. Call [`Graph::forward`] afterwards
    /// to refresh dependent nodes.
    pub fn set_values(&mut self, var: Var, values: &[f64]) -> Result<()> {
        let node = &mut self.nodes[var.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::contract(format!(
                "node {} is a {} node, only leaves can be assigned",
                var.0,
                node.op.name()
            )));
        }
        if values.len() != node.value.len() {
            return Err(Error::Shape {
                node: var.0,
                op: "leaf",
                detail: format!("expected {} values, got {}", node.value.len(), values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                node: var.0,
                op: "leaf",
            });
        }
        node.value.replace_values(values.to_vec());
        Ok(())
    }

    /// Re-evaluates every non-leaf node in tape order and returns the value
    /// of the terminal (last) node.
    pub fn forward(&mut self) -> Result<&Tensor> {
        if self.nodes.is_empty() {
            return Err(Error::contract("forward on an empty graph"));
        }
        for index in 0..self.nodes.len() {
            if matches!(self.nodes[index].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[index].op.clone();
            let (shape, values) = self.eval(index, &op)?;
            let requires_grad = self.nodes[index].value.requires_grad();
            let mut tensor = Tensor::from_parts(shape, values);
            tensor.set_requires_grad(requires_grad);
            self.nodes[index].value = tensor;
        }
        Ok(&self.nodes[self.nodes.len() - 1].value)
    }

    /// Accumulates d(terminal)/d(leaf) into every leaf that requires a
    /// gradient. Previous leaf gradients are cleared first.
    pub fn backward(&mut self, terminal: Var) -> Result<()> {
        if !self.nodes[terminal.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar terminal, node {} has shape {:?}",
                terminal.0,
                self.nodes[terminal.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; terminal.0 + 1];
        grads[terminal.0] = Some(vec![1.0]);
        for index in (0..=terminal.0).rev() {
            let Some(upstream) = grads[index].take() else {
                continue;
            };
            let node = &self.nodes[index];
            if matches!(node.op, Op::Leaf) {
                if node.value.requires_grad() {
                    grads[index] = Some(upstream);
                }
                continue;
            }
            self.propagate(index, &upstream, &mut grads)?;
        }
        for (index, node) in self.nodes.iter_mut().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.value.requires_grad() {
                continue;
            }
            let grad = grads
                .get_mut(index)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![0.0; node.value.len()]);
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    node: index,
                    op: "leaf gradient",
                });
            }
            node.value.set_grad(Some(grad));
        }
        Ok(())
    }

    // ---- op constructors -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    /// Adds vector `bias` of length `c` to every row of `[r, c]` matrix `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddRow(a, bias))
    }

    pub fn mul_scalar(&mut self, a: Var, scalar: Var) -> Result<Var> {
        self.push(Op::MulScalar(a, scalar))
    }

    pub fn add_scalar(&mut self, a: Var, scalar: Var) -> Result<Var> {
        self.push(Op::AddScalar(a, scalar))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.push(Op::Scale(a, factor))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }

    /// Mean over one axis; the axis is removed from the output shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.push(Op::MeanAxis(a, axis))
    }

    /// L2 norm of every row of a matrix.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        self.push(Op::RowNorm(a))
    }

    /// Pairwise cosine similarity between the rows of `[n, d]` and `[k, d]`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Cosine(a, b))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SoftmaxRows(a))
    }

    /// `log Σ_k exp(a[i][k])` per row, max-shifted.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LogSumExpRows(a))
    }

    /// `log Σ_k w[i][k] exp(a[i][k])` per row with constant non-negative
    /// weights. The shift uses the maximum over positively weighted entries.
    pub fn weighted_logsumexp_rows(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        self.push(Op::WeightedLogSumExpRows(a, Rc::new(weights)))
    }

    /// Picks `a[i][index[i]]` from each row.
    pub fn select_per_row(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        self.push(Op::SelectPerRow(a, Rc::new(index)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let index = self.nodes.len();
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].value.len() || shape.contains(&0) {
            return Err(Error::Shape {
                node: index,
                op: "reshape",
                detail: format!(
                    "cannot reshape {:?} into {:?}",
                    self.nodes[a.0].value.shape(),
                    shape
                ),
            });
        }
        let values = self.nodes[a.0].value.values().to_vec();
        let requires_grad = self.nodes[a.0].value.requires_grad();
        let mut tensor = Tensor::from_parts(shape, values);
        tensor.set_requires_grad(requires_grad);
        self.nodes.push(Node {
            op: Op::Reshape(a),
            value: tensor,
        });
        Ok(Var(index))
    }

    /// Stacks matrices (or vectors, read as single rows) with equal column
    /// counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatRows(Rc::new(parts.to_vec())))
    }

    // ---- internals -------------------------------------------------------

    fn push(&mut self, op: Op) -> Result<Var> {
        let index = self.nodes.len();
        for input in op.inputs() {
            if input.0 >= index {
                return Err(Error::Shape {
                    node: index,
                    op: op.name(),
                    detail: format!("input {} is not an earlier node", input.0),
                });
            }
        }
        let (shape, values) = self.eval(index, &op)?;
        let requires_grad = op
            .inputs()
            .iter()
            .any(|v| self.nodes[v.0].value.requires_grad());
        let mut tensor = Tensor::from_parts(shape, values);
        tensor.set_requires_grad(requires_grad);
        self.nodes.push(Node { op, value: tensor });
        Ok(Var(index))
    }

    fn eval(&self, node: usize, op: &Op) -> Result<(Vec<usize>, Vec<f64>)> {
        let name = op.name();
        let shape_err = |detail: String| Error::Shape {
            node,
            op: name,
            detail,
        };
        let t = |v: &Var| &self.nodes[v.0].value;
        let matrix = |v: &Var| {
            t(v).as_matrix()
                .ok_or_else(|| shape_err(format!("expected a matrix, got {:?}", t(v).shape())))
        };

        let (shape, values) = match op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (t(a), t(b));
                if a.shape() != b.shape() {
                    return Err(shape_err(format!("{:?} vs {:?}", a.shape(), b.shape())));
                }
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let out = a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y));
                (a.shape().to_vec(), out.collect())
            }
            Op::AddRow(a, bias) => {
                let (rows, cols) = matrix(a)?;
                if t(bias).len() != cols {
                    return Err(shape_err(format!(
                        "bias of length {} for {cols} columns",
                        t(bias).len()
                    )));
                }
                let bias = t(bias).values();
                let mut out = t(a).values().to_vec();
                for r in 0..rows {
                    for (x, b) in out[r * cols..(r + 1) * cols].iter_mut().zip(bias) {
                        *x += b;
                    }
                }
                (t(a).shape().to_vec(), out)
            }
            Op::MulScalar(a, s) | Op::AddScalar(a, s) => {
                if !t(s).is_scalar() {
                    return Err(shape_err(format!("expected scalar, got {:?}", t(s).shape())));
                }
                let s = t(s).values()[0];
                let out = if matches!(op, Op::MulScalar(..)) {
                    t(a).values().iter().map(|x| x * s).collect()
                } else {
                    t(a).values().iter().map(|x| x + s).collect()
                };
                (t(a).shape().to_vec(), out)
            }
            Op::Scale(a, factor) => (
                t(a).shape().to_vec(),
                t(a).values().iter().map(|x| x * factor).collect(),
            ),
            Op::MatMul(a, b) => {
                let (m, k) = matrix(a)?;
                let (k2, n) = matrix(b)?;
                if k != k2 || t(b).shape().len() != 2 {
                    return Err(shape_err(format!(
                        "cannot multiply {:?} by {:?}",
                        t(a).shape(),
                        t(b).shape()
                    )));
                }
                (vec![m, n], matmul(t(a).values(), t(b).values(), m, k, n))
            }
            Op::Sum(a) => (Vec::new(), vec![t(a).values().iter().sum()]),
            Op::Mean(a) => {
                let a = t(a);
                (Vec::new(), vec![a.values().iter().sum::<f64>() / a.len() as f64])
            }
            Op::MeanAxis(a, axis) => {
                let a = t(a);
                if *axis >= a.shape().len() {
                    return Err(shape_err(format!("axis {axis} out of range for {:?}", a.shape())));
                }
                let (outer, n, inner) = split_axis(a.shape(), *axis);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for i in 0..n {
                        let src = &a.values()[(o * n + i) * inner..(o * n + i + 1) * inner];
                        for (dst, x) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *dst += x;
                        }
                    }
                }
                out.iter_mut().for_each(|x| *x /= n as f64);
                let mut shape = a.shape().to_vec();
                shape.remove(*axis);
                (shape, out)
            }
            Op::RowNorm(a) => {
                let (rows, cols) = matrix(a)?;
                let out = t(a)
                    .values()
                    .chunks(cols)
                    .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
                    .collect();
                (vec![rows], out)
            }
            Op::Cosine(a, b) => {
                let (n, d) = matrix(a)?;
                let (k, d2) = matrix(b)?;
                if d != d2 {
                    return Err(shape_err(format!("row widths {d} and {d2} differ")));
                }
                let na = row_norms(t(a).values(), d);
                let nb = row_norms(t(b).values(), d);
                if let Some(i) = na.iter().position(|&x| x == 0.0) {
                    return Err(Error::numeric(format!(
                        "cosine at node {node}: row {i} of the left operand has zero norm"
                    )));
                }
                if let Some(j) = nb.iter().position(|&x| x == 0.0) {
                    return Err(Error::numeric(format!(
                        "cosine at node {node}: row {j} of the right operand has zero norm"
                    )));
                }
                let (av, bv) = (t(a).values(), t(b).values());
                let mut out = Vec::with_capacity(n * k);
                for i in 0..n {
                    let ai = &av[i * d..(i + 1) * d];
                    for j in 0..k {
                        let bj = &bv[j * d..(j + 1) * d];
                        out.push(dot(ai, bj) / (na[i] * nb[j]));
                    }
                }
                (vec![n, k], out)
            }
            Op::Exp(a) => (t(a).shape().to_vec(), t(a).values().iter().map(|x| x.exp()).collect()),
            Op::Log(a) => (t(a).shape().to_vec(), t(a).values().iter().map(|x| x.ln()).collect()),
            Op::Tanh(a) => (t(a).shape().to_vec(), t(a).values().iter().map(|x| x.tanh()).collect()),
            Op::Relu(a) => (t(a).shape().to_vec(), t(a).values().iter().map(|x| x.max(0.0)).collect()),
            Op::SoftmaxRows(a) => {
                let (_, cols) = matrix(a)?;
                let mut out = Vec::with_capacity(t(a).len());
                for row in t(a).values().chunks(cols) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
                    let total: f64 = exps.iter().sum();
                    out.extend(exps.into_iter().map(|e| e / total));
                }
                (t(a).shape().to_vec(), out)
            }
            Op::LogSumExpRows(a) => {
                let (rows, cols) = matrix(a)?;
                let out = t(a).values().chunks(cols).map(logsumexp).collect();
                (vec![rows], out)
            }
            Op::WeightedLogSumExpRows(a, weights) => {
                let (rows, cols) = matrix(a)?;
                if weights.len() != rows * cols {
                    return Err(shape_err(format!(
                        "{} weights for a {rows}x{cols} matrix",
                        weights.len()
                    )));
                }
                if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
                    return Err(Error::contract("row weights must be finite and non-negative"));
                }
                let mut out = Vec::with_capacity(rows);
                for (r, (row, w)) in t(a).values().chunks(cols).zip(weights.chunks(cols)).enumerate() {
                    match weighted_logsumexp(row, w) {
                        Some(v) => out.push(v),
                        None => {
                            return Err(Error::contract(format!(
                                "row {r} of the weights is all zero (log of zero)"
                            )))
                        }
                    }
                }
                (vec![rows], out)
            }
            Op::SelectPerRow(a, index) => {
                let (rows, cols) = matrix(a)?;
                if index.len() != rows {
                    return Err(shape_err(format!("{} indices for {rows} rows", index.len())));
                }
                if let Some(&bad) = index.iter().find(|&&c| c >= cols) {
                    return Err(shape_err(format!("column {bad} out of range for {cols} columns")));
                }
                let out = index
                    .iter()
                    .enumerate()
                    .map(|(r, &c)| t(a).values()[r * cols + c])
                    .collect();
                (vec![rows], out)
            }
            Op::Reshape(a) => {
                let shape = self.nodes[node].value.shape().to_vec();
                (shape, t(a).values().to_vec())
            }
            Op::ConcatRows(parts) => {
                if parts.is_empty() {
                    return Err(shape_err("nothing to concatenate".into()));
                }
                let (_, cols) = matrix(&parts[0])?;
                let mut rows = 0;
                let mut out = Vec::new();
                for part in parts.iter() {
                    let (r, c) = matrix(part)?;
                    if c != cols {
                        return Err(shape_err(format!("column counts {cols} and {c} differ")));
                    }
                    rows += r;
                    out.extend_from_slice(t(part).values());
                }
                (vec![rows, cols], out)
            }
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { node, op: name });
        }
        Ok((shape, values))
    }

    fn propagate(
        &self,
        index: usize,
        upstream: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let node = &self.nodes[index];
        let out = node.value.values();
        let t = |v: &Var| &self.nodes[v.0].value;
        let want = |v: &Var| t(v).requires_grad().then(|| t(v).len());

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, want(a), |g| add_into(g, upstream));
                accumulate(grads, *b, want(b), |g| add_into(g, upstream));
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, want(a), |g| add_into(g, upstream));
                accumulate(grads, *b, want(b), |g| {
                    g.iter_mut().zip(upstream).for_each(|(g, u)| *g -= u)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (t(a).values(), t(b).values());
                accumulate(grads, *a, want(a), |g| {
                    for ((g, u), y) in g.iter_mut().zip(upstream).zip(bv) {
                        *g += u * y;
                    }
                });
                accumulate(grads, *b, want(b), |g| {
                    for ((g, u), x) in g.iter_mut().zip(upstream).zip(av) {
                        *g += u * x;
                    }
                });
            }
            Op::AddRow(a, bias) => {
                let cols = t(bias).len();
                accumulate(grads, *a, want(a), |g| add_into(g, upstream));
                accumulate(grads, *bias, want(bias), |g| {
                    for row in upstream.chunks(cols) {
                        add_into(g, row);
                    }
                });
            }
            Op::MulScalar(a, s) => {
                let sv = t(s).values()[0];
                let av = t(a).values();
                accumulate(grads, *a, want(a), |g| {
                    g.iter_mut().zip(upstream).for_each(|(g, u)| *g += u * sv)
                });
                accumulate(grads, *s, want(s), |g| {
                    g[0] += upstream.iter().zip(av).map(|(u, x)| u * x).sum::<f64>()
                });
            }
            Op::AddScalar(a, s) => {
                accumulate(grads, *a, want(a), |g| add_into(g, upstream));
                accumulate(grads, *s, want(s), |g| g[0] += upstream.iter().sum::<f64>());
            }
            Op::Scale(a, factor) => {
                accumulate(grads, *a, want(a), |g| {
                    g.iter_mut().zip(upstream).for_each(|(g, u)| *g += u * factor)
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = t(a).as_matrix().expect("checked in forward");
                let n = t(b).shape()[1];
                let (av, bv) = (t(a).values(), t(b).values());
                accumulate(grads, *a, want(a), |g| {
                    for i in 0..m {
                        let up = &upstream[i * n..(i + 1) * n];
                        for p in 0..k {
                            g[i * k + p] += dot(up, &bv[p * n..(p + 1) * n]);
                        }
                    }
                });
                accumulate(grads, *b, want(b), |g| {
                    for i in 0..m {
                        let up = &upstream[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (g, u) in g[p * n..(p + 1) * n].iter_mut().zip(up) {
                                *g += x * u;
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => {
                accumulate(grads, *a, want(a), |g| g.iter_mut().for_each(|g| *g += upstream[0]));
            }
            Op::Mean(a) => {
                let share = upstream[0] / t(a).len() as f64;
                accumulate(grads, *a, want(a), |g| g.iter_mut().for_each(|g| *g += share));
            }
            Op::MeanAxis(a, axis) => {
                let (outer, n, inner) = split_axis(t(a).shape(), *axis);
                accumulate(grads, *a, want(a), |g| {
                    for o in 0..outer {
                        let up = &upstream[o * inner..(o + 1) * inner];
                        for i in 0..n {
                            let dst = &mut g[(o * n + i) * inner..(o * n + i + 1) * inner];
                            for (g, u) in dst.iter_mut().zip(up) {
                                *g += u / n as f64;
                            }
                        }
                    }
                });
            }
            Op::RowNorm(a) => {
                let (_, cols) = t(a).as_matrix().expect("checked in forward");
                if want(a).is_some() && out.iter().zip(upstream).any(|(&nrm, &u)| nrm == 0.0 && u != 0.0) {
                    return Err(Error::numeric(format!(
                        "row_norm at node {index}: gradient of a zero-norm row is undefined"
                    )));
                }
                let av = t(a).values();
                accumulate(grads, *a, want(a), |g| {
                    for (r, (&nrm, &u)) in out.iter().zip(upstream).enumerate() {
                        if u == 0.0 {
                            continue;
                        }
                        for c in 0..cols {
                            g[r * cols + c] += u * av[r * cols + c] / nrm;
                        }
                    }
                });
            }
            Op::Cosine(a, b) => {
                let (n, d) = t(a).as_matrix().expect("checked in forward");
                let (k, _) = t(b).as_matrix().expect("checked in forward");
                let (av, bv) = (t(a).values(), t(b).values());
                let na = row_norms(av, d);
                let nb = row_norms(bv, d);
                accumulate(grads, *a, want(a), |g| {
                    for i in 0..n {
                        let ai = &av[i * d..(i + 1) * d];
                        let gi = &mut g[i * d..(i + 1) * d];
                        for j in 0..k {
                            let u = upstream[i * k + j];
                            let cos = out[i * k + j];
                            let bj = &bv[j * d..(j + 1) * d];
                            for ((g, x), y) in gi.iter_mut().zip(ai).zip(bj) {
                                *g += u * (y / (na[i] * nb[j]) - cos * x / (na[i] * na[i]));
                            }
                        }
                    }
                });
                accumulate(grads, *b, want(b), |g| {
                    for j in 0..k {
                        let bj = &bv[j * d..(j + 1) * d];
                        let gj = &mut g[j * d..(j + 1) * d];
                        for i in 0..n {
                            let u = upstream[i * k + j];
                            let cos = out[i * k + j];
                            let ai = &av[i * d..(i + 1) * d];
                            for ((g, y), x) in gj.iter_mut().zip(bj).zip(ai) {
                                *g += u * (x / (na[i] * nb[j]) - cos * y / (nb[j] * nb[j]));
                            }
                        }
                    }
                });
            }
            Op::Exp(a) => accumulate(grads, *a, want(a), |g| {
                for ((g, u), y) in g.iter_mut().zip(upstream).zip(out) {
                    *g += u * y;
                }
            }),
            Op::Log(a) => {
                let av = t(a).values();
                accumulate(grads, *a, want(a), |g| {
                    for ((g, u), x) in g.iter_mut().zip(upstream).zip(av) {
                        *g += u / x;
                    }
                });
            }
            Op::Tanh(a) => accumulate(grads, *a, want(a), |g| {
                for ((g, u), y) in g.iter_mut().zip(upstream).zip(out) {
                    *g += u * (1.0 - y * y);
                }
            }),
            Op::Relu(a) => {
                let av = t(a).values();
                accumulate(grads, *a, want(a), |g| {
                    for ((g, u), x) in g.iter_mut().zip(upstream).zip(av) {
                        if *x > 0.0 {
                            *g += u;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let (_, cols) = t(a).as_matrix().expect("checked in forward");
                accumulate(grads, *a, want(a), |g| {
                    for ((g, u), y) in g.chunks_mut(cols).zip(upstream.chunks(cols)).zip(out.chunks(cols)) {
                        let inner = dot(u, y);
                        for c in 0..cols {
                            g[c] += y[c] * (u[c] - inner);
                        }
                    }
                });
            }
            Op::LogSumExpRows(a) => {
                let (_, cols) = t(a).as_matrix().expect("checked in forward");
                let av = t(a).values();
                accumulate(grads, *a, want(a), |g| {
                    for (r, (g, x)) in g.chunks_mut(cols).zip(av.chunks(cols)).enumerate() {
                        for c in 0..cols {
                            g[c] += upstream[r] * (x[c] - out[r]).exp();
                        }
                    }
                });
            }
            Op::WeightedLogSumExpRows(a, weights) => {
                let (_, cols) = t(a).as_matrix().expect("checked in forward");
                let av = t(a).values();
                accumulate(grads, *a, want(a), |g| {
                    for (r, ((g, x), w)) in g
                        .chunks_mut(cols)
                        .zip(av.chunks(cols))
                        .zip(weights.chunks(cols))
                        .enumerate()
                    {
                        for c in 0..cols {
                            if w[c] > 0.0 {
                                g[c] += upstream[r] * w[c] * (x[c] - out[r]).exp();
                            }
                        }
                    }
                });
            }
            Op::SelectPerRow(a, columns) => {
                let (_, cols) = t(a).as_matrix().expect("checked in forward");
                accumulate(grads, *a, want(a), |g| {
                    for (r, &c) in columns.iter().enumerate() {
                        g[r * cols + c] += upstream[r];
                    }
                });
            }
            Op::Reshape(a) => accumulate(grads, *a, want(a), |g| add_into(g, upstream)),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for part in parts.iter() {
                    let len = t(part).len();
                    let slice = &upstream[offset..offset + len];
                    accumulate(grads, *part, want(part), |g| add_into(g, slice));
                    offset += len;
                }
            }
        }
        Ok(())
    }

}

fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    var: Var,
    len: Option<usize>,
    f: impl FnOnce(&mut [f64]),
) {
    let Some(len) = len else {
        return;
    };
    f(grads[var.0].get_or_insert_with(|| vec![0.0; len]));
}

fn add_into(g: &mut [f64], upstream: &[f64]) {
    for (g, u) in g.iter_mut().zip(upstream) {
        *g += u;
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn row_norms(values: &[f64], cols: usize) -> Vec<f64> {
    values.chunks(cols).map(|r| dot(r, r).sqrt()).collect()
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, y) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += x * y;
            }
        }
    }
    out
}

/// Max-shifted `log Σ exp(x)`.
pub fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `log Σ w exp(x)` shifted by the max over entries with positive weight;
/// `None` when every weight is zero.
pub fn weighted_logsumexp(row: &[f64], weights: &[f64]) -> Option<f64> {
    let max = row
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let total: f64 = row
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(x, w)| w * (x - max).exp())
        .sum();
    Some(max + total.ln())
}
