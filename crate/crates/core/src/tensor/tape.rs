//! Wengert-list tape: records matrix operations during the forward pass and
//! replays them in reverse to accumulate gradients.
//!
//! Node ids are indices into the tape, so inputs always precede the
//! operations that consume them. The tape is single-threaded and discarded
//! after each forward/backward cycle.

use super::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    SoftmaxRows(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Log(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `a[m x n] + bias[1 x n]`, bias broadcast over rows.
    AddRows(NodeId, NodeId),
    /// `a[m x n] * row[1 x n]`, row broadcast over rows.
    MulRows(NodeId, NodeId),
    Sum(NodeId),
    /// Row gather: output row r is input row `indices[r]`.
    Gather(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    ConcatCols(NodeId, NodeId),
    /// Per-element smooth-l1 distance to a constant target (delta = 1).
    SmoothL1(NodeId, Vec<f64>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    g: Vec<Vec<f64>>,
}

impl Grads {
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.g[id]
    }
}

/// Recorded computation. Values are immutable once pushed.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf (parameter, input, or constant) and returns its node id.
    pub fn leaf(&mut self, t: &Tensor) -> Result<NodeId> {
        if !t.is_matrix() {
            return Err(Error::shape(format!("tape operates on rank-2 tensors, got {:?}", t.shape())));
        }
        Ok(self.push(Op::Leaf, t.rows(), t.cols(), t.data().to_vec()))
    }

    /// Registers a parameter tensor as a leaf, noting the node id on the tensor.
    pub fn param(&mut self, t: &mut Tensor) -> Result<NodeId> {
        let id = self.leaf(t)?;
        t.set_node_id(id);
        Ok(id)
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id];
        (n.rows, n.cols)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    /// Extracts the scalar held in a 1x1 node.
    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        let n = &self.nodes[id];
        if n.value.len() != 1 {
            return Err(Error::contract(format!(
                "expected scalar node, got {}x{}",
                n.rows, n.cols
            )));
        }
        Ok(n.value[0])
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id];
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("tape node is well-formed")
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { op, rows, cols, value });
        self.nodes.len() - 1
    }

    // ── forward operations ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(Error::shape(format!("matmul: {m}x{ka} incompatible with {kb}x{n}")));
        }
        let out = matmul_raw(self.value(a), self.value(b), m, ka, n);
        Ok(self.push(Op::MatMul(a, b), m, n, out))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(x);
        let v = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        Ok(self.push(Op::Transpose(x), n, m, out))
    }

    /// Numerically stabilized row-wise softmax.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(x);
        let v = self.value(x);
        if v.iter().any(|e| e.is_nan()) {
            return Err(Error::numeric("softmax input contains NaN"));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &v[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        Ok(self.push(Op::SoftmaxRows(x), m, n, out))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(x);
        let out = self.value(x).iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        Ok(self.push(Op::Sigmoid(x), m, n, out))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(x);
        let out = self.value(x).iter().map(|&v| v.tanh()).collect();
        Ok(self.push(Op::Tanh(x), m, n, out))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(x);
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        Ok(self.push(Op::Relu(x), m, n, out))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(x);
        if self.value(x).iter().any(|&v| !(v > 0.0)) {
            return Err(Error::numeric("log requires strictly positive inputs"));
        }
        let out = self.value(x).iter().map(|&v| v.ln()).collect();
        Ok(self.push(Op::Log(x), m, n, out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        if self.shape(b) != (m, n) {
            return Err(Error::shape(format!(
                "add: {m}x{n} vs {}x{}",
                self.shape(b).0,
                self.shape(b).1
            )));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(Op::Add(a, b), m, n, out))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        if self.shape(b) != (m, n) {
            return Err(Error::shape(format!(
                "mul: {m}x{n} vs {}x{}",
                self.shape(b).0,
                self.shape(b).1
            )));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(Op::Mul(a, b), m, n, out))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let (m, n) = self.shape(x);
        let out = self.value(x).iter().map(|&v| v * c).collect();
        Ok(self.push(Op::Scale(x, c), m, n, out))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    /// Broadcast add of a 1xN bias over every row of `a`.
    pub fn add_rows(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        let (br, bn) = self.shape(bias);
        if br != 1 || bn != n {
            return Err(Error::shape(format!("add_rows: bias {br}x{bn} against {m}x{n}")));
        }
        let b = self.value(bias).to_vec();
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        Ok(self.push(Op::AddRows(a, bias), m, n, out))
    }

    /// Broadcast multiply of a 1xN row over every row of `a`.
    pub fn mul_rows(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        let (br, bn) = self.shape(row);
        if br != 1 || bn != n {
            return Err(Error::shape(format!("mul_rows: row {br}x{bn} against {m}x{n}")));
        }
        let b = self.value(row).to_vec();
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * b[i % n])
            .collect();
        Ok(self.push(Op::MulRows(a, row), m, n, out))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total = self.value(x).iter().sum();
        Ok(self.push(Op::Sum(x), 1, 1, vec![total]))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Gathers rows by index (repeats allowed); backward scatters with accumulation.
    pub fn gather(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (m, n) = self.shape(x);
        if indices.is_empty() {
            return Err(Error::contract("gather requires at least one index"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::contract(format!("gather index {bad} out of range for {m} rows")));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.extend_from_slice(&v[i * n..(i + 1) * n]);
        }
        Ok(self.push(Op::Gather(x, indices.to_vec()), indices.len(), n, out))
    }

    /// Single-row view of `x`.
    pub fn row(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        self.gather(x, &[index])
    }

    /// Vertical concatenation; all inputs must share a column count.
    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::contract("concat_rows requires at least one input"));
        }
        let (_, n) = self.shape(xs[0]);
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (m, c) = self.shape(x);
            if c != n {
                return Err(Error::shape(format!("concat_rows: column mismatch {c} vs {n}")));
            }
            rows += m;
            out.extend_from_slice(self.value(x));
        }
        Ok(self.push(Op::ConcatRows(xs.to_vec()), rows, n, out))
    }

    /// Horizontal concatenation; inputs must share a row count.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, na) = self.shape(a);
        let (mb, nb) = self.shape(b);
        if m != mb {
            return Err(Error::shape(format!("concat_cols: row mismatch {m} vs {mb}")));
        }
        let va = self.value(a);
        let vb = self.value(b);
        let mut out = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            out.extend_from_slice(&va[i * na..(i + 1) * na]);
            out.extend_from_slice(&vb[i * nb..(i + 1) * nb]);
        }
        Ok(self.push(Op::ConcatCols(a, b), m, na + nb, out))
    }

    /// Per-element smooth-l1 distance between `x` and a constant target.
    pub fn smooth_l1(&mut self, x: NodeId, target: &[f64]) -> Result<NodeId> {
        let (m, n) = self.shape(x);
        if target.len() != m * n {
            return Err(Error::shape(format!(
                "smooth_l1: target length {} against {m}x{n}",
                target.len()
            )));
        }
        let out = self
            .value(x)
            .iter()
            .zip(target)
            .map(|(&v, &t)| {
                let e = v - t;
                if e.abs() < 1.0 {
                    0.5 * e * e
                } else {
                    e.abs() - 0.5
                }
            })
            .collect();
        Ok(self.push(Op::SmoothL1(x, target.to_vec()), m, n, out))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Accumulates d(loss)/d(node) for every node at or before `loss`.
    ///
    /// Nodes that do not reach the loss keep an all-zero gradient. The walk is
    /// a fixed reverse sweep, so repeated runs are bit-identical.
    pub fn backward(&self, loss: NodeId) -> Result<Grads> {
        let loss_node = &self.nodes[loss];
        if loss_node.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss node, got {}x{}",
                loss_node.rows, loss_node.cols
            )));
        }
        let mut g: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        g[loss][0] = 1.0;

        for id in (0..=loss).rev() {
            let node = &self.nodes[id];
            // Split off this node's gradient so inputs can be mutated.
            let d = std::mem::take(&mut g[id]);
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let (_, n) = self.shape(*b);
                    let va = &self.nodes[*a].value;
                    let vb = &self.nodes[*b].value;
                    // dA += dC . B^T
                    for i in 0..m {
                        for j in 0..n {
                            let dij = d[i * n + j];
                            if dij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                g[*a][i * k + p] += dij * vb[p * n + j];
                            }
                        }
                    }
                    // dB += A^T . dC
                    for p in 0..k {
                        for i in 0..m {
                            let aip = va[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                g[*b][p * n + j] += aip * d[i * n + j];
                            }
                        }
                    }
                }
                Op::Transpose(x) => {
                    let (m, n) = (node.rows, node.cols);
                    for i in 0..m {
                        for j in 0..n {
                            g[*x][j * m + i] += d[i * n + j];
                        }
                    }
                }
                Op::SoftmaxRows(x) => {
                    let (m, n) = (node.rows, node.cols);
                    for i in 0..m {
                        let y = &node.value[i * n..(i + 1) * n];
                        let dy = &d[i * n..(i + 1) * n];
                        let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            g[*x][i * n + j] += y[j] * (dy[j] - dot);
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    for (i, &y) in node.value.iter().enumerate() {
                        g[*x][i] += d[i] * y * (1.0 - y);
                    }
                }
                Op::Tanh(x) => {
                    for (i, &y) in node.value.iter().enumerate() {
                        g[*x][i] += d[i] * (1.0 - y * y);
                    }
                }
                Op::Relu(x) => {
                    let vx = &self.nodes[*x].value;
                    for i in 0..vx.len() {
                        if vx[i] > 0.0 {
                            g[*x][i] += d[i];
                        }
                    }
                }
                Op::Log(x) => {
                    let vx = &self.nodes[*x].value;
                    for i in 0..vx.len() {
                        g[*x][i] += d[i] / vx[i];
                    }
                }
                Op::Add(a, b) => {
                    for (i, &di) in d.iter().enumerate() {
                        g[*a][i] += di;
                    }
                    for (i, &di) in d.iter().enumerate() {
                        g[*b][i] += di;
                    }
                }
                Op::Mul(a, b) => {
                    let va = self.nodes[*a].value.clone();
                    let vb = &self.nodes[*b].value;
                    for (i, &di) in d.iter().enumerate() {
                        g[*a][i] += di * vb[i];
                    }
                    for (i, &di) in d.iter().enumerate() {
                        g[*b][i] += di * va[i];
                    }
                }
                Op::Scale(x, c) => {
                    for (i, &di) in d.iter().enumerate() {
                        g[*x][i] += di * c;
                    }
                }
                Op::AddRows(a, bias) => {
                    let n = node.cols;
                    for (i, &di) in d.iter().enumerate() {
                        g[*a][i] += di;
                    }
                    for (i, &di) in d.iter().enumerate() {
                        g[*bias][i % n] += di;
                    }
                }
                Op::MulRows(a, row) => {
                    let n = node.cols;
                    let va = &self.nodes[*a].value;
                    let vr = &self.nodes[*row].value;
                    for (i, &di) in d.iter().enumerate() {
                        g[*a][i] += di * vr[i % n];
                    }
                    for (i, &di) in d.iter().enumerate() {
                        g[*row][i % n] += di * va[i];
                    }
                }
                Op::Sum(x) => {
                    let dx = d[0];
                    for gi in g[*x].iter_mut() {
                        *gi += dx;
                    }
                }
                Op::Gather(x, indices) => {
                    let n = node.cols;
                    for (r, &src) in indices.iter().enumerate() {
                        for j in 0..n {
                            g[*x][src * n + j] += d[r * n + j];
                        }
                    }
                }
                Op::ConcatRows(xs) => {
                    let n = node.cols;
                    let mut offset = 0;
                    for &x in xs {
                        let (m, _) = self.shape(x);
                        for i in 0..m * n {
                            g[x][i] += d[offset + i];
                        }
                        offset += m * n;
                    }
                }
                Op::ConcatCols(a, b) => {
                    let m = node.rows;
                    let na = self.shape(*a).1;
                    let nb = self.shape(*b).1;
                    for i in 0..m {
                        for j in 0..na {
                            g[*a][i * na + j] += d[i * (na + nb) + j];
                        }
                        for j in 0..nb {
                            g[*b][i * nb + j] += d[i * (na + nb) + na + j];
                        }
                    }
                }
                Op::SmoothL1(x, target) => {
                    let vx = &self.nodes[*x].value;
                    for i in 0..vx.len() {
                        let e = vx[i] - target[i];
                        g[*x][i] += d[i] * e.clamp(-1.0, 1.0);
                    }
                }
            }
            g[id] = d;
        }
        Ok(Grads { g })
    }

    /// Copies the gradient of the tensor's registered node into its grad buffer.
    pub fn pull_grad(&self, grads: &Grads, t: &mut Tensor) -> Result<()> {
        let id = t
            .node_id()
            .ok_or_else(|| Error::contract("tensor was not registered on this tape"))?;
        t.set_grad(grads.grad(id).to_vec())
    }
}

/// Plain triple-loop matrix product.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            let c_row = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                c_row[j] += aip * b_row[j];
            }
        }
    }
    c
}
