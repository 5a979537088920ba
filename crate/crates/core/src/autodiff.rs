//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records one forward pass. Tensors produced from tracked inputs
//! carry a handle to their node; tensors built only from untracked inputs are
//! plain values and cost nothing to record, so the same model code serves
//! training and inference. [`Tape::backward`] walks the nodes once in reverse
//! order and returns gradients for every node registered with [`Tape::param`].
//!
//! [`Tape::grad_reverse`] is the identity forward and multiplies the incoming
//! gradient by `-lambda` on the way back.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Index of a node within its tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct NodeRef {
    tape: u64,
    id: NodeId,
}

/// Row-major `f64` array, optionally tracked on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    node: Option<NodeRef>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        if shape.contains(&0) {
            return Err(Error::contract(format!("zero-sized dimension in {shape:?}")));
        }
        Ok(Tensor {
            shape,
            data,
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            node: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            node: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Stack equal-length rows into a `rows × cols` matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged rows"));
        }
        Tensor::matrix(rows.len(), cols, rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node.map(|n| n.id)
    }

    /// Untracked copy with the same values.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[self.shape.len() - 1]
        } else {
            1
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    fn require_matrix(&self, op: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::contract(format!(
                "{op} expects a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// Elementwise kinds accepted by [`Tape::apply`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Relu,
    Scale(f64),
    BroadcastAddRow,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul { a: Vec<f64>, b: Vec<f64> },
    Div { a: Vec<f64>, b: Vec<f64> },
    Neg,
    Exp { out: Vec<f64> },
    Log { input: Vec<f64> },
    Relu { input: Vec<f64> },
    Scale(f64),
    BroadcastAddRow { cols: usize },
    Matmul { a: Vec<f64>, b: Vec<f64>, m: usize, k: usize, n: usize },
    Transpose { rows: usize, cols: usize },
    SoftmaxRows { out: Vec<f64>, cols: usize },
    LogSoftmaxRows { softmax: Vec<f64>, cols: usize },
    GradReverse(f64),
    Sum { count: usize },
    Mean { count: usize },
    SumRows { cols: usize },
    RowL2Normalize { out: Vec<f64>, norms: Vec<f64>, cols: usize },
    Pick { indices: Vec<usize>, cols: usize },
    AngularMargin { input: Vec<f64>, labels: Vec<usize>, cols: usize, margin: f64 },
    ClampMin { input: Vec<f64>, floor: f64 },
}

#[derive(Debug)]
struct Node {
    op: Op,
    parents: [Option<usize>; 2],
    numel: usize,
}

/// Append-only record of one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: Vec<NodeId>,
    param_shapes: Vec<Vec<usize>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every registered parameter.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_node: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(&id)
    }

    /// Gradient for a tensor returned by [`Tape::param`].
    pub fn wrt(&self, param: &Tensor) -> Result<&Tensor> {
        param
            .node()
            .and_then(|id| self.by_node.get(&id))
            .ok_or_else(|| Error::contract("tensor is not a registered parameter"))
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
            param_shapes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register `value` as a differentiable leaf and return its tracked copy.
    pub fn param(&mut self, value: &Tensor) -> Tensor {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            parents: [None, None],
            numel: value.numel(),
        });
        self.params.push(id);
        self.param_shapes.push(value.shape.clone());
        Tensor {
            shape: value.shape.clone(),
            data: value.data.clone(),
            node: Some(NodeRef { tape: self.id, id }),
        }
    }

    fn parent_of(&self, t: &Tensor) -> Result<Option<usize>> {
        match t.node {
            None => Ok(None),
            Some(r) if r.tape == self.id => Ok(Some(r.id.0)),
            Some(_) => Err(Error::contract("tensor belongs to a different tape")),
        }
    }

    fn record(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: [Option<&Tensor>; 2],
        op: impl FnOnce() -> Op,
    ) -> Result<Tensor> {
        let parents = [
            inputs[0].map(|t| self.parent_of(t)).transpose()?.flatten(),
            inputs[1].map(|t| self.parent_of(t)).transpose()?.flatten(),
        ];
        let node = if parents.iter().any(Option::is_some) {
            let id = NodeId(self.nodes.len());
            self.nodes.push(Node {
                op: op(),
                parents,
                numel: data.len(),
            });
            Some(NodeRef { tape: self.id, id })
        } else {
            None
        };
        Ok(Tensor { shape, data, node })
    }

    /// Apply one of the elementwise primitives.
    pub fn apply(&mut self, kind: Primitive, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        let need_b = matches!(
            kind,
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div | Primitive::BroadcastAddRow
        );
        match (need_b, b) {
            (true, None) => return Err(Error::contract(format!("{kind:?} needs two operands"))),
            (false, Some(_)) => return Err(Error::contract(format!("{kind:?} takes one operand"))),
            _ => {}
        }
        match kind {
            Primitive::Add => self.add(a, b.unwrap()),
            Primitive::Sub => self.sub(a, b.unwrap()),
            Primitive::Mul => self.mul(a, b.unwrap()),
            Primitive::Div => self.div(a, b.unwrap()),
            Primitive::BroadcastAddRow => self.broadcast_add_row(a, b.unwrap()),
            Primitive::Neg => self.neg(a),
            Primitive::Exp => self.exp(a),
            Primitive::Log => self.log(a),
            Primitive::Relu => self.relu(a),
            Primitive::Scale(c) => self.scale(a, c),
        }
    }

    fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
        if a.shape != b.shape {
            return Err(Error::contract(format!(
                "{op}: shape mismatch {:?} vs {:?}",
                a.shape, b.shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Self::same_shape("add", a, b)?;
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
        self.record(a.shape.clone(), data, [Some(a), Some(b)], || Op::Add)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Self::same_shape("sub", a, b)?;
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
        self.record(a.shape.clone(), data, [Some(a), Some(b)], || Op::Sub)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Self::same_shape("mul", a, b)?;
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
        self.record(a.shape.clone(), data, [Some(a), Some(b)], || Op::Mul {
            a: a.data.clone(),
            b: b.data.clone(),
        })
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Self::same_shape("div", a, b)?;
        if let Some(index) = b.data.iter().position(|&y| y == 0.0) {
            return Err(Error::Domain {
                op: "div",
                index,
                detail: "division by zero".into(),
            });
        }
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x / y).collect();
        self.record(a.shape.clone(), data, [Some(a), Some(b)], || Op::Div {
            a: a.data.clone(),
            b: b.data.clone(),
        })
    }

    pub fn neg(&mut self, a: &Tensor) -> Result<Tensor> {
        let data = a.data.iter().map(|x| -x).collect();
        self.record(a.shape.clone(), data, [Some(a), None], || Op::Neg)
    }

    pub fn exp(&mut self, a: &Tensor) -> Result<Tensor> {
        let data: Vec<f64> = a.data.iter().map(|x| x.exp()).collect();
        let out = data.clone();
        self.record(a.shape.clone(), data, [Some(a), None], || Op::Exp { out })
    }

    pub fn log(&mut self, a: &Tensor) -> Result<Tensor> {
        if let Some(index) = a.data.iter().position(|&x| x.is_nan() || x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                index,
                detail: format!("non-positive input {}", a.data[index]),
            });
        }
        let data = a.data.iter().map(|x| x.ln()).collect();
        self.record(a.shape.clone(), data, [Some(a), None], || Op::Log {
            input: a.data.clone(),
        })
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        let data = a.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        self.record(a.shape.clone(), data, [Some(a), None], || Op::Relu {
            input: a.data.clone(),
        })
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let data = a.data.iter().map(|x| c * x).collect();
        self.record(a.shape.clone(), data, [Some(a), None], || Op::Scale(c))
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, a: &Tensor, floor: f64) -> Result<Tensor> {
        let data = a.data.iter().map(|&x| if x > floor { x } else { floor }).collect();
        self.record(a.shape.clone(), data, [Some(a), None], || Op::ClampMin {
            input: a.data.clone(),
            floor,
        })
    }

    /// Add the row vector `b` to every row of `a`.
    pub fn broadcast_add_row(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (_, cols) = a.require_matrix("broadcast_add_row")?;
        let b_ok = match b.shape.as_slice() {
            [n] => *n == cols,
            [1, n] => *n == cols,
            _ => false,
        };
        if !b_ok {
            return Err(Error::contract(format!(
                "broadcast_add_row: bias shape {:?} does not match row width {cols}",
                b.shape
            )));
        }
        let data = a
            .data
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(&b.data).map(|(x, y)| x + y))
            .collect();
        self.record(a.shape.clone(), data, [Some(a), Some(b)], || Op::BroadcastAddRow { cols })
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = a.require_matrix("matmul")?;
        let (k2, n) = b.require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::contract(format!(
                "matmul: inner dimensions differ ({m}×{k} · {k2}×{n})"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &a.data, false, &b.data, false, &mut out);
        self.record(vec![m, n], out, [Some(a), Some(b)], || Op::Matmul {
            a: a.data.clone(),
            b: b.data.clone(),
            m,
            k,
            n,
        })
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        let (rows, cols) = a.require_matrix("transpose")?;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = a.data[r * cols + c];
            }
        }
        self.record(vec![cols, rows], out, [Some(a), None], || Op::Transpose { rows, cols })
    }

    fn check_finite(op: &'static str, a: &Tensor) -> Result<()> {
        if let Some(index) = a.data.iter().position(|x| x.is_nan()) {
            return Err(Error::Domain {
                op,
                index,
                detail: "NaN input".into(),
            });
        }
        Ok(())
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        let (_, cols) = a.require_matrix("softmax_rows")?;
        Self::check_finite("softmax_rows", a)?;
        let data = softmax_rows_values(&a.data, cols);
        let out = data.clone();
        self.record(a.shape.clone(), data, [Some(a), None], || Op::SoftmaxRows { out, cols })
    }

    /// Row-wise `log softmax`, computed as `x - max - ln Σ exp(x - max)`.
    pub fn log_softmax_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        let (_, cols) = a.require_matrix("log_softmax_rows")?;
        Self::check_finite("log_softmax_rows", a)?;
        let mut data = Vec::with_capacity(a.data.len());
        for row in a.data.chunks_exact(cols) {
            let arg = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &x)| if x > row[best] { j } else { best });
            let max = row[arg];
            // the max term contributes exactly 1; ln_1p keeps tiny tails accurate
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != arg)
                .map(|(_, x)| (x - max).exp())
                .sum();
            let lse = rest.ln_1p();
            data.extend(row.iter().map(|x| x - max - lse));
        }
        let softmax: Vec<f64> = data.iter().map(|x| x.exp()).collect();
        self.record(a.shape.clone(), data, [Some(a), None], || Op::LogSoftmaxRows { softmax, cols })
    }

    /// Identity forward; backward multiplies the gradient by `-lambda`.
    pub fn grad_reverse(&mut self, a: &Tensor, lambda: f64) -> Result<Tensor> {
        if !(lambda >= 0.0) {
            return Err(Error::contract(format!(
                "grad_reverse: lambda must be nonnegative, got {lambda}"
            )));
        }
        if !a.is_tracked() {
            return Err(Error::contract("grad_reverse: input is not tracked on a tape"));
        }
        self.record(a.shape.clone(), a.data.clone(), [Some(a), None], || Op::GradReverse(lambda))
    }

    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        let count = a.data.len();
        let s = a.data.iter().sum();
        self.record(vec![1], vec![s], [Some(a), None], || Op::Sum { count })
    }

    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        let count = a.data.len();
        let s = a.data.iter().sum::<f64>() / count as f64;
        self.record(vec![1], vec![s], [Some(a), None], || Op::Mean { count })
    }

    /// Sum each row of a matrix into a vector of length `rows`.
    pub fn sum_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        let (rows, cols) = a.require_matrix("sum_rows")?;
        let data = a.data.chunks_exact(cols).map(|r| r.iter().sum()).collect();
        self.record(vec![rows], data, [Some(a), None], || Op::SumRows { cols })
    }

    /// Scale each row to unit Euclidean norm (rows with norm below 1e-12 are
    /// divided by 1e-12 instead).
    pub fn row_l2_normalize(&mut self, a: &Tensor) -> Result<Tensor> {
        let (_, cols) = a.require_matrix("row_l2_normalize")?;
        let mut data = Vec::with_capacity(a.data.len());
        let mut norms = Vec::with_capacity(a.rows());
        for row in a.data.chunks_exact(cols) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
            norms.push(norm);
            data.extend(row.iter().map(|x| x / norm));
        }
        let out = data.clone();
        self.record(a.shape.clone(), data, [Some(a), None], || Op::RowL2Normalize {
            out,
            norms,
            cols,
        })
    }

    /// Select `a[r, indices[r]]` for every row, giving a vector.
    pub fn pick(&mut self, a: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let (rows, cols) = a.require_matrix("pick")?;
        if indices.len() != rows {
            return Err(Error::contract(format!(
                "pick: {} indices for {rows} rows",
                indices.len()
            )));
        }
        if let Some(bad) = indices.iter().position(|&i| i >= cols) {
            return Err(Error::contract(format!(
                "pick: index {} out of range [0, {cols}) at row {bad}",
                indices[bad]
            )));
        }
        let data = indices.iter().enumerate().map(|(r, &c)| a.data[r * cols + c]).collect();
        self.record(vec![rows], data, [Some(a), None], || Op::Pick {
            indices: indices.to_vec(),
            cols,
        })
    }

    /// Replace the labelled entry of each row of a cosine matrix by
    /// `cos(acos(c) + margin)`; other entries pass through.
    pub fn angular_margin(&mut self, cosines: &Tensor, labels: &[usize], margin: f64) -> Result<Tensor> {
        let (rows, cols) = cosines.require_matrix("angular_margin")?;
        if labels.len() != rows || labels.iter().any(|&l| l >= cols) {
            return Err(Error::contract("angular_margin: labels do not match the cosine matrix"));
        }
        let mut data = cosines.data.clone();
        for (r, &y) in labels.iter().enumerate() {
            let c = data[r * cols + y].clamp(-1.0, 1.0);
            data[r * cols + y] = (c.acos() + margin).cos();
        }
        self.record(cosines.shape.clone(), data, [Some(cosines), None], || Op::AngularMargin {
            input: cosines.data.clone(),
            labels: labels.to_vec(),
            cols,
            margin,
        })
    }

    /// Gradients of the scalar `loss` with respect to every registered
    /// parameter. Parameters the loss does not reach get zero gradients.
    /// The tape is left untouched, so repeated calls agree exactly.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape
            )));
        }
        let root = self
            .parent_of(loss)?
            .ok_or_else(|| Error::contract("backward: loss is not tracked"))?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            let Some(upstream) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let contributions = node_backward(node, &upstream);
            for (slot, contribution) in node.parents.iter().zip(contributions) {
                if let (Some(p), Some(g)) = (slot, contribution) {
                    accumulate(&mut grads[*p], g);
                }
            }
            grads[i] = Some(upstream);
        }
        let mut by_node = HashMap::with_capacity(self.params.len());
        for (id, shape) in self.params.iter().zip(&self.param_shapes) {
            let data = grads
                .get(id.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| vec![0.0; self.nodes[id.0].numel]);
            by_node.insert(
                *id,
                Tensor {
                    shape: shape.clone(),
                    data,
                    node: None,
                },
            );
        }
        Ok(Gradients { by_node })
    }
}

const NORM_FLOOR: f64 = 1e-12;

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
        None => *slot = Some(g),
    }
}

type Contribution = [Option<Vec<f64>>; 2];

fn node_backward(node: &Node, g: &[f64]) -> Contribution {
    let want = |k: usize| node.parents[k].is_some();
    match &node.op {
        Op::Leaf => [None, None],
        Op::Add => [want(0).then(|| g.to_vec()), want(1).then(|| g.to_vec())],
        Op::Sub => [
            want(0).then(|| g.to_vec()),
            want(1).then(|| g.iter().map(|x| -x).collect()),
        ],
        Op::Mul { a, b } => [
            want(0).then(|| g.iter().zip(b).map(|(g, b)| g * b).collect()),
            want(1).then(|| g.iter().zip(a).map(|(g, a)| g * a).collect()),
        ],
        Op::Div { a, b } => [
            want(0).then(|| g.iter().zip(b).map(|(g, b)| g / b).collect()),
            want(1).then(|| {
                g.iter()
                    .zip(a.iter().zip(b))
                    .map(|(g, (a, b))| -g * a / (b * b))
                    .collect()
            }),
        ],
        Op::Neg => [Some(g.iter().map(|x| -x).collect()), None],
        Op::Exp { out } => [Some(g.iter().zip(out).map(|(g, y)| g * y).collect()), None],
        Op::Log { input } => [Some(g.iter().zip(input).map(|(g, x)| g / x).collect()), None],
        Op::Relu { input } => [
            Some(
                g.iter()
                    .zip(input)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            None,
        ],
        Op::ClampMin { input, floor } => [
            Some(
                g.iter()
                    .zip(input)
                    .map(|(g, &x)| if x > *floor { *g } else { 0.0 })
                    .collect(),
            ),
            None,
        ],
        Op::Scale(c) => [Some(g.iter().map(|x| c * x).collect()), None],
        Op::GradReverse(lambda) => [Some(g.iter().map(|x| -lambda * x).collect()), None],
        Op::BroadcastAddRow { cols } => [
            want(0).then(|| g.to_vec()),
            want(1).then(|| {
                let mut bias = vec![0.0; *cols];
                for row in g.chunks_exact(*cols) {
                    bias.iter_mut().zip(row).for_each(|(b, x)| *b += x);
                }
                bias
            }),
        ],
        Op::Matmul { a, b, m, k, n } => [
            want(0).then(|| {
                let mut da = vec![0.0; m * k];
                gemm(*m, *n, *k, g, false, b, true, &mut da);
                da
            }),
            want(1).then(|| {
                let mut db = vec![0.0; k * n];
                gemm(*k, *m, *n, a, true, g, false, &mut db);
                db
            }),
        ],
        Op::Transpose { rows, cols } => {
            // g is cols × rows
            let mut da = vec![0.0; rows * cols];
            for r in 0..*rows {
                for c in 0..*cols {
                    da[r * cols + c] = g[c * rows + r];
                }
            }
            [Some(da), None]
        }
        Op::SoftmaxRows { out, cols } => {
            let mut da = Vec::with_capacity(g.len());
            for (gr, yr) in g.chunks_exact(*cols).zip(out.chunks_exact(*cols)) {
                let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                da.extend(gr.iter().zip(yr).map(|(g, y)| y * (g - dot)));
            }
            [Some(da), None]
        }
        Op::LogSoftmaxRows { softmax, cols } => {
            let mut da = Vec::with_capacity(g.len());
            for (gr, pr) in g.chunks_exact(*cols).zip(softmax.chunks_exact(*cols)) {
                let total: f64 = gr.iter().sum();
                da.extend(gr.iter().zip(pr).map(|(g, p)| g - p * total));
            }
            [Some(da), None]
        }
        Op::Sum { count } => [Some(vec![g[0]; *count]), None],
        Op::Mean { count } => [Some(vec![g[0] / *count as f64; *count]), None],
        Op::SumRows { cols } => [
            Some(g.iter().flat_map(|&x| std::iter::repeat_n(x, *cols)).collect()),
            None,
        ],
        Op::RowL2Normalize { out, norms, cols } => {
            let mut da = Vec::with_capacity(out.len());
            for ((gr, yr), &norm) in g.chunks_exact(*cols).zip(out.chunks_exact(*cols)).zip(norms) {
                if norm > NORM_FLOOR {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    da.extend(gr.iter().zip(yr).map(|(g, y)| (g - y * dot) / norm));
                } else {
                    da.extend(gr.iter().map(|g| g / norm));
                }
            }
            [Some(da), None]
        }
        Op::Pick { indices, cols } => {
            let mut da = vec![0.0; indices.len() * cols];
            for (r, (&c, &gv)) in indices.iter().zip(g).enumerate() {
                da[r * cols + c] = gv;
            }
            [Some(da), None]
        }
        Op::AngularMargin { input, labels, cols, margin } => {
            let mut da = g.to_vec();
            let (sin_m, cos_m) = margin.sin_cos();
            for (r, &y) in labels.iter().enumerate() {
                let c = input[r * cols + y].clamp(-1.0, 1.0);
                let sin_t = (1.0 - c * c).max(1e-12).sqrt();
                da[r * cols + y] *= cos_m + sin_m * c / sin_t;
            }
            [Some(da), None]
        }
    }
}

pub(crate) fn softmax_rows_values(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|x| (x - max).exp()));
        let total: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|y| *y /= total);
    }
    out
}

/// `out += op(a) · op(b)` for row-major operands, where `op(a)` is `m × k`
/// and `op(b)` is `k × n`. `a_t`/`b_t` select the transposed storage.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the m×k, k×n and m×n
    // row-major buffers whose lengths are asserted above.
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
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Compare [`Tape::backward`] against central differences of `f` at `x`.
///
/// Returns the largest per-coordinate relative error, using
/// `max(|analytic|, |numeric|, 1e-12)` as the denominator.
#[allow(clippy::needless_range_loop)]
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor>,
{
    let mut tape = Tape::new();
    let xp = tape.param(x);
    let loss = f(&mut tape, &xp)?;
    let analytic = if loss.is_tracked() {
        tape.backward(&loss)?.wrt(&xp)?.data.clone()
    } else {
        vec![0.0; x.numel()]
    };
    let eval = |probe: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        Ok(f(&mut t, probe)?.item())
    };
    let mut worst: f64 = 0.0;
    let mut probe = x.detach();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}
