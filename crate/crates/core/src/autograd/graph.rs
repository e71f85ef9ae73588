use std::collections::HashMap;
use std::ops::Range;

use super::params::ParameterStore;
use super::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};
use crate::error::{Error, Result};

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
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        input: NodeId,
        rows: Range<usize>,
        cols: Range<usize>,
    },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    BroadcastRows(NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    /// Scalar whose local gradient w.r.t. `input` was computed outside the graph.
    Injected {
        input: NodeId,
        local_grad: Tensor,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
}

/// Define-by-run computation graph.
///
/// Values are computed eagerly as nodes are added, so the forward pass is the
/// construction itself. Node ids are issued in topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
    param_index: HashMap<String, NodeId>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let v = &self.nodes[id.0].value;
        (v.rows(), v.cols())
    }

    /// Accumulated gradient of a leaf; zeros if nothing flowed into it.
    pub fn grad(&self, id: NodeId) -> Tensor {
        let node = &self.nodes[id.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols()))
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::ShapeMismatch {
            op,
            left: a.0,
            left_shape: self.nodes[a.0].value.shape().to_vec(),
            right: b.0,
            right_shape: self.nodes[b.0].value.shape().to_vec(),
        }
    }

    /// Adds a leaf holding `value`.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let (r, c) = (value.rows(), value.cols());
        let value = value.reshaped(vec![r, c]).expect("rows*cols == len");
        self.push(Op::Leaf, value)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> NodeId {
        self.leaf(Tensor::zeros(rows, cols))
    }

    /// Leaf bound to a named parameter. Repeated requests return the same node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_index.get(name) {
            return Ok(id);
        }
        let value = store.value(name)?.clone();
        let id = self.leaf(value);
        self.params.push((name.to_string(), id));
        self.param_index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Parameter leaves bound so far, in binding order.
    pub fn bound_params(&self) -> &[(String, NodeId)] {
        &self.params
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
            &mut out,
        );
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(name, a, b));
        }
        let (r, c) = self.shape(a);
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::matrix(r, c, data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.map(a, |x| x * factor);
        self.push(Op::Scale(a, factor), v)
    }

    fn map(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| f(x)).collect();
        Tensor::matrix(src.rows(), src.cols(), data).expect("same shape")
    }

    /// Concatenates along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::EmptyInput("concat of zero nodes".into()))?;
        let (r0, c0) = self.shape(first);
        let value = match axis {
            0 => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if c != c0 {
                        return Err(self.mismatch("concat(axis 0)", first, p));
                    }
                    rows += r;
                    data.extend_from_slice(self.nodes[p.0].value.data());
                }
                Tensor::matrix(rows, c0, data)?
            }
            1 => {
                let mut cols = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if r != r0 {
                        return Err(self.mismatch("concat(axis 1)", first, p));
                    }
                    cols += c;
                }
                let mut data = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for &p in parts {
                        data.extend_from_slice(self.nodes[p.0].value.row_slice(i));
                    }
                }
                Tensor::matrix(r0, cols, data)?
            }
            _ => {
                return Err(Error::Validation(format!(
                    "concat axis {axis} unsupported for matrices"
                )))
            }
        };
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            value,
        ))
    }

    pub fn slice(
        &mut self,
        input: NodeId,
        rows: Range<usize>,
        cols: Range<usize>,
    ) -> Result<NodeId> {
        let (r, c) = self.shape(input);
        if rows.start >= rows.end || cols.start >= cols.end || rows.end > r || cols.end > c {
            return Err(Error::Validation(format!(
                "slice rows {rows:?} cols {cols:?} out of bounds for node {} of shape {r}x{c}",
                input.0
            )));
        }
        let src = &self.nodes[input.0].value;
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            data.extend_from_slice(&src.row_slice(i)[cols.clone()]);
        }
        let value = Tensor::matrix(rows.len(), cols.len(), data)?;
        Ok(self.push(Op::Slice { input, rows, cols }, value))
    }

    pub fn row(&mut self, input: NodeId, row: usize) -> Result<NodeId> {
        let (_, c) = self.shape(input);
        self.slice(input, row..row + 1, 0..c)
    }

    pub fn cols(&mut self, input: NodeId, cols: Range<usize>) -> Result<NodeId> {
        let (r, _) = self.shape(input);
        self.slice(input, 0..r, cols)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, |x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let mut v = self.nodes[a.0].value.clone();
        let c = v.cols();
        for row in v.data_mut().chunks_mut(c) {
            let lse = super::log_sum_exp(row);
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        self.push(Op::Softmax(a), v)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let mut v = self.nodes[a.0].value.clone();
        let c = v.cols();
        for row in v.data_mut().chunks_mut(c) {
            let lse = super::log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push(Op::LogSoftmax(a), v)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a.0].value;
        let m = t.sum() / t.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(m))
    }

    /// Repeats a `1 x n` row vector `rows` times.
    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if r != 1 || rows == 0 {
            return Err(Error::Validation(format!(
                "broadcast_rows needs a 1xn row and rows > 0, node {} is {r}x{c}",
                a.0
            )));
        }
        let row = self.nodes[a.0].value.data().to_vec();
        let data = row.repeat(rows);
        let v = Tensor::matrix(rows, c, data)?;
        Ok(self.push(Op::BroadcastRows(a), v))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.transposed();
        self.push(Op::Transpose(a), v)
    }

    /// Row-major reinterpretation as `rows x cols`.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let v = self.nodes[a.0].value.clone().reshaped(vec![rows, cols])?;
        Ok(self.push(Op::Reshape(a), v))
    }

    /// Scalar node with an externally computed value and local gradient
    /// `d value / d input`. Used for losses evaluated outside the graph.
    pub fn injected_scalar(
        &mut self,
        input: NodeId,
        value: f64,
        local_grad: Tensor,
    ) -> Result<NodeId> {
        let (r, c) = self.shape(input);
        if local_grad.rows() != r || local_grad.cols() != c {
            return Err(Error::Dimension {
                what: format!("injected gradient for node {}", input.0),
                expected: r * c,
                got: local_grad.len(),
            });
        }
        let local_grad = local_grad.reshaped(vec![r, c])?;
        Ok(self.push(Op::Injected { input, local_grad }, Tensor::scalar(value)))
    }

    /// Back-propagates from a scalar root; leaf gradients accumulate across calls.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let rv = &self.nodes[root.0].value;
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot {
                node: root.0,
                shape: rv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    matmul_nt_acc(g.data(), bv.data(), m, k, n, slot(&mut grads, *a, m, k));
                    matmul_tn_acc(av.data(), g.data(), m, k, n, slot(&mut grads, *b, k, n));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, &g);
                    acc(&mut grads, *b, &g);
                }
                Op::Mul(a, b) => {
                    let (r, c) = (g.rows(), g.cols());
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let ga = slot(&mut grads, *a, r, c);
                    for ((o, gv), bv) in ga.iter_mut().zip(g.data()).zip(bv) {
                        *o += gv * bv;
                    }
                    let gb = slot(&mut grads, *b, r, c);
                    for ((o, gv), av) in gb.iter_mut().zip(g.data()).zip(av) {
                        *o += gv * av;
                    }
                }
                Op::Scale(a, f) => {
                    let ga = slot(&mut grads, *a, g.rows(), g.cols());
                    for (o, gv) in ga.iter_mut().zip(g.data()) {
                        *o += f * gv;
                    }
                }
                Op::Concat { parts, axis } => {
                    let total_cols = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let (pr, pc) = (self.nodes[p.0].value.rows(), self.nodes[p.0].value.cols());
                        let gp = slot(&mut grads, p, pr, pc);
                        if *axis == 0 {
                            let src = &g.data()[offset * total_cols..(offset + pr) * total_cols];
                            for (o, v) in gp.iter_mut().zip(src) {
                                *o += v;
                            }
                            offset += pr;
                        } else {
                            for i in 0..pr {
                                let src = &g.row_slice(i)[offset..offset + pc];
                                for (o, v) in gp[i * pc..(i + 1) * pc].iter_mut().zip(src) {
                                    *o += v;
                                }
                            }
                            offset += pc;
                        }
                    }
                }
                Op::Slice { input, rows, cols } => {
                    let (ir, ic) = (
                        self.nodes[input.0].value.rows(),
                        self.nodes[input.0].value.cols(),
                    );
                    let gi = slot(&mut grads, *input, ir, ic);
                    for (k, i) in rows.clone().enumerate() {
                        let src = g.row_slice(k);
                        for (o, v) in gi[i * ic + cols.start..i * ic + cols.end]
                            .iter_mut()
                            .zip(src)
                        {
                            *o += v;
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let ga = slot(&mut grads, *a, g.rows(), g.cols());
                    for ((o, gv), y) in ga.iter_mut().zip(g.data()).zip(y) {
                        *o += gv * y * (1.0 - y);
                    }
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let ga = slot(&mut grads, *a, g.rows(), g.cols());
                    for ((o, gv), y) in ga.iter_mut().zip(g.data()).zip(y) {
                        *o += gv * (1.0 - y * y);
                    }
                }
                Op::Relu(a) => {
                    let y = node.value.data();
                    let ga = slot(&mut grads, *a, g.rows(), g.cols());
                    for ((o, gv), y) in ga.iter_mut().zip(g.data()).zip(y) {
                        if *y > 0.0 {
                            *o += gv;
                        }
                    }
                }
                Op::Softmax(a) => {
                    let c = g.cols();
                    let y = node.value.data();
                    let ga = slot(&mut grads, *a, g.rows(), c);
                    for ((o, gr), yr) in ga.chunks_mut(c).zip(g.data().chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in o.iter_mut().zip(gr).zip(yr) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let c = g.cols();
                    let y = node.value.data();
                    let ga = slot(&mut grads, *a, g.rows(), c);
                    for ((o, gr), yr) in ga.chunks_mut(c).zip(g.data().chunks(c)).zip(y.chunks(c)) {
                        let total: f64 = gr.iter().sum();
                        for ((o, gv), yv) in o.iter_mut().zip(gr).zip(yr) {
                            *o += gv - yv.exp() * total;
                        }
                    }
                }
                Op::Sum(a) | Op::Mean(a) => {
                    let src = &self.nodes[a.0].value;
                    let mut gv = g.data()[0];
                    if matches!(node.op, Op::Mean(_)) {
                        gv /= src.len() as f64;
                    }
                    let ga = slot(&mut grads, *a, src.rows(), src.cols());
                    ga.iter_mut().for_each(|o| *o += gv);
                }
                Op::BroadcastRows(a) => {
                    let c = g.cols();
                    let ga = slot(&mut grads, *a, 1, c);
                    for row in g.data().chunks(c) {
                        for (o, v) in ga.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
                Op::Transpose(a) => {
                    let gt = g.transposed();
                    acc(&mut grads, *a, &gt);
                }
                Op::Reshape(a) => {
                    let (r, c) = self.shape(*a);
                    let ga = slot(&mut grads, *a, r, c);
                    for (o, v) in ga.iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
                Op::Injected { input, local_grad } => {
                    let gv = g.data()[0];
                    let gi = slot(&mut grads, *input, local_grad.rows(), local_grad.cols());
                    for (o, v) in gi.iter_mut().zip(local_grad.data()) {
                        *o += gv * v;
                    }
                }
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(existing) => existing.add_assign(&g),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Adds `scale` times every bound parameter's gradient into the store.
    pub fn accumulate_into(&self, store: &mut ParameterStore, scale: f64) -> Result<()> {
        for (name, id) in &self.params {
            if let Some(g) = &self.nodes[id.0].grad {
                store.accumulate(name, g, scale)?;
            }
        }
        Ok(())
    }
}

fn slot(grads: &mut [Option<Tensor>], id: NodeId, rows: usize, cols: usize) -> &mut [f64] {
    grads[id.0]
        .get_or_insert_with(|| Tensor::zeros(rows, cols))
        .data_mut()
}

fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: &Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
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
