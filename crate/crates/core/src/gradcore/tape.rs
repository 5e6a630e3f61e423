//! Wengert-list reverse-mode differentiation over dense matrices.
//!
//! Nodes are appended in evaluation order, so every node's inputs precede
//! it and a single reverse sweep propagates adjoints. Values are computed
//! eagerly when a node is recorded.

use super::{Array, Grads, ParamStore};
use crate::error::{Error, Result};

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Silu => x * sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Local derivative given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Act(NodeId, Activation),
    Scale(NodeId, f64),
    Sum(NodeId),
    Gather { table: NodeId, ids: Vec<usize> },
    ConcatCols(Vec<NodeId>),
    Mse { pred: NodeId, target: Array, weights: Option<Vec<f64>> },
    SoftmaxXent { logits: NodeId, labels: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Act(..) => "activation",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Gather { .. } => "gather",
            Op::ConcatCols(_) => "concat_cols",
            Op::Mse { .. } => "mse",
            Op::SoftmaxXent { .. } => "softmax_xent",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Act(a, _) | Op::Scale(a, _) | Op::Sum(a) => vec![*a],
            Op::Gather { table, .. } => vec![*table],
            Op::ConcatCols(parts) => parts.clone(),
            Op::Mse { pred, .. } => vec![*pred],
            Op::SoftmaxXent { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Array,
}

/// Records operations and their values for one forward pass.
///
/// A tape is single-use: build the graph, call [`Tape::backward`], drop it.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints for every node reached by a backward sweep.
#[derive(Clone, Debug)]
pub struct NodeGrads {
    grads: Vec<Option<Array>>,
}

impl NodeGrads {
    pub fn wrt(&self, id: NodeId) -> Option<&Array> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

// C <- A·B + beta·C with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every element addressed by the given
    // dimensions and strides, and `c` does not alias `a` or `b`.
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

fn accumulate(slot: &mut Option<Array>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| Array::zeros(shape));
    f(g.data_mut());
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

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    fn push(&mut self, op: Op, value: Array) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<&Array> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::Contract(format!("node {} does not belong to this tape", id.0)))
    }

    /// A constant input. Gradients flow to it but are never applied.
    pub fn leaf(&mut self, value: Array) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Records the current value of parameter `index` of `params`.
    pub fn param(&mut self, params: &ParamStore, index: usize) -> NodeId {
        self.push(Op::Param(index), params.by_index(index).clone())
    }

    pub fn param_named(&mut self, params: &ParamStore, name: &str) -> Result<NodeId> {
        let i = params
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        Ok(self.param(params, i))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.check(a)?.require_matrix("matmul lhs")?;
        let (k2, n) = self.check(b)?.require_matrix("matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul of [{m},{k}] by [{k2},{n}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            0.0,
            &mut out,
        );
        Ok(self.push(Op::MatMul(a, b), Array::from_parts(vec![m, n], out)))
    }

    /// Elementwise sum. `b` may also be a single row (`[1, n]` or `[n]`)
    /// broadcast over the rows of a matrix `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.check(a)?;
        let bv = self.check(b)?;
        if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
            let shape = av.shape().to_vec();
            return Ok(self.push(Op::Add(a, b), Array::from_parts(shape, data)));
        }
        let row_like = bv.rows() == 1 && bv.shape().len() <= 2;
        if av.shape().len() == 2 && row_like && bv.cols() == av.cols() {
            let cols = av.cols();
            let mut data = av.data().to_vec();
            for chunk in data.chunks_mut(cols) {
                for (x, y) in chunk.iter_mut().zip(bv.data()) {
                    *x += y;
                }
            }
            let shape = av.shape().to_vec();
            return Ok(self.push(Op::AddRow(a, b), Array::from_parts(shape, data)));
        }
        Err(Error::Dimension(format!(
            "add of {:?} and {:?}",
            av.shape(),
            bv.shape()
        )))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.check(a)?;
        let bv = self.check(b)?;
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!(
                "mul of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let shape = av.shape().to_vec();
        Ok(self.push(Op::Mul(a, b), Array::from_parts(shape, data)))
    }

    pub fn activation(&mut self, a: NodeId, kind: Activation) -> Result<NodeId> {
        let v = self.check(a)?.map(|x| kind.apply(x));
        Ok(self.push(Op::Act(a, kind), v))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.activation(a, Activation::Relu)
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        self.activation(a, Activation::Silu)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.activation(a, Activation::Tanh)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        if !s.is_finite() {
            return Err(Error::Numeric(format!("scale factor {s}")));
        }
        let v = self.check(a)?.scaled(s);
        Ok(self.push(Op::Scale(a, s), v))
    }

    /// Sum of all elements, as a one-element array.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.check(a)?.data().iter().sum();
        Ok(self.push(Op::Sum(a), Array::scalar(s)))
    }

    /// Row lookup into an embedding table: output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.check(table)?;
        let (rows, _) = t.require_matrix("embedding table")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Domain(format!("row id {bad} out of range for a table of {rows} rows")));
        }
        let v = t.select_rows(ids);
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            v,
        ))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat of zero parts".into()));
        }
        let mut rows = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.check(p)?.require_matrix("concat part")?;
            if *rows.get_or_insert(r) != r {
                return Err(Error::Dimension(format!(
                    "concat of parts with {} and {r} rows",
                    rows.unwrap()
                )));
            }
            widths.push(c);
        }
        let rows = rows.unwrap_or(0);
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Array::from_parts(vec![rows, total], data)))
    }

    /// Mean over rows of `weight_i * mean_j (pred_ij - target_ij)^2`.
    pub fn mse_loss(&mut self, pred: NodeId, target: &Array, weights: Option<&[f64]>) -> Result<NodeId> {
        let p = self.check(pred)?;
        if p.shape() != target.shape() {
            return Err(Error::Dimension(format!(
                "mse of prediction {:?} against target {:?}",
                p.shape(),
                target.shape()
            )));
        }
        let (rows, cols) = (p.rows(), p.cols());
        if let Some(w) = weights {
            if w.len() != rows {
                return Err(Error::Dimension(format!("{} weights for {rows} rows", w.len())));
            }
            if let Some(bad) = w.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
                return Err(Error::Domain(format!("row weight {bad} is not a finite non-negative number")));
            }
        }
        let mut total = 0.0;
        for i in 0..rows {
            let sq: f64 = p
                .row(i)
                .iter()
                .zip(target.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let w = weights.map_or(1.0, |w| w[i]);
            total += w * sq / cols as f64;
        }
        let value = if rows == 0 { 0.0 } else { total / rows as f64 };
        Ok(self.push(
            Op::Mse {
                pred,
                target: target.clone(),
                weights: weights.map(<[f64]>::to_vec),
            },
            Array::scalar(value),
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let l = self.check(logits)?;
        let (rows, k) = l.require_matrix("logits")?;
        if labels.len() != rows {
            return Err(Error::Dimension(format!("{} labels for {rows} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= k) {
            return Err(Error::Domain(format!("label {bad} out of range for {k} classes")));
        }
        let mut total = 0.0;
        for (i, &c) in labels.iter().enumerate() {
            let row = l.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[c];
        }
        let value = if rows == 0 { 0.0 } else { total / rows as f64 };
        Ok(self.push(
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
            },
            Array::scalar(value),
        ))
    }

    /// Reverse sweep from a one-element `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<NodeGrads> {
        let lv = self.check(loss)?;
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Array>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, k) = (av.rows(), av.cols());
                    let n = bv.cols();
                    accumulate(&mut grads[a.0], av.shape(), |da| {
                        gemm(m, n, k, g.data(), (n as isize, 1), bv.data(), (1, n as isize), 1.0, da)
                    });
                    accumulate(&mut grads[b.0], bv.shape(), |db| {
                        gemm(k, m, n, av.data(), (1, k as isize), g.data(), (n as isize, 1), 1.0, db)
                    });
                }
                Op::Add(a, b) => {
                    for x in [a, b] {
                        accumulate(&mut grads[x.0], g.shape(), |d| {
                            d.iter_mut().zip(g.data()).for_each(|(d, v)| *d += v)
                        });
                    }
                }
                Op::AddRow(a, b) => {
                    accumulate(&mut grads[a.0], g.shape(), |d| {
                        d.iter_mut().zip(g.data()).for_each(|(d, v)| *d += v)
                    });
                    let cols = g.cols();
                    accumulate(&mut grads[b.0], self.value(*b).shape(), |d| {
                        for chunk in g.data().chunks(cols) {
                            d.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads[a.0], av.shape(), |d| {
                        for ((d, gv), y) in d.iter_mut().zip(g.data()).zip(bv.data()) {
                            *d += gv * y;
                        }
                    });
                    accumulate(&mut grads[b.0], bv.shape(), |d| {
                        for ((d, gv), x) in d.iter_mut().zip(g.data()).zip(av.data()) {
                            *d += gv * x;
                        }
                    });
                }
                Op::Act(a, kind) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    accumulate(&mut grads[a.0], x.shape(), |d| {
                        for (((d, gv), xv), yv) in d.iter_mut().zip(g.data()).zip(x.data()).zip(y.data()) {
                            *d += gv * kind.derivative(*xv, *yv);
                        }
                    });
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads[a.0], g.shape(), |d| {
                        d.iter_mut().zip(g.data()).for_each(|(d, v)| *d += s * v)
                    });
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    accumulate(&mut grads[a.0], self.value(*a).shape(), |d| {
                        d.iter_mut().for_each(|d| *d += gv)
                    });
                }
                Op::Gather { table, ids } => {
                    let tv = self.value(*table);
                    let cols = tv.cols();
                    accumulate(&mut grads[table.0], tv.shape(), |d| {
                        for (i, &r) in ids.iter().enumerate() {
                            let src = &g.data()[i * cols..(i + 1) * cols];
                            d[r * cols..(r + 1) * cols]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, v)| *d += v);
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let total = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let w = pv.cols();
                        accumulate(&mut grads[p.0], pv.shape(), |d| {
                            for i in 0..pv.rows() {
                                let src = &g.data()[i * total + offset..i * total + offset + w];
                                d[i * w..(i + 1) * w].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                            }
                        });
                        offset += w;
                    }
                }
                Op::Mse { pred, target, weights } => {
                    let pv = self.value(*pred);
                    let (rows, cols) = (pv.rows(), pv.cols());
                    let gv = g.data()[0];
                    let base = 2.0 * gv / (rows * cols) as f64;
                    accumulate(&mut grads[pred.0], pv.shape(), |d| {
                        for i in 0..rows {
                            let w = weights.as_ref().map_or(1.0, |w| w[i]);
                            let c = base * w;
                            for j in 0..cols {
                                let k = i * cols + j;
                                d[k] += c * (pv.data()[k] - target.data()[k]);
                            }
                        }
                    });
                }
                Op::SoftmaxXent { logits, labels } => {
                    let lv = self.value(*logits);
                    let probs = softmax_rows(lv);
                    let rows = lv.rows();
                    let cols = lv.cols();
                    let c = g.data()[0] / rows as f64;
                    accumulate(&mut grads[logits.0], lv.shape(), |d| {
                        for (i, &lab) in labels.iter().enumerate() {
                            for j in 0..cols {
                                let onehot = if j == lab { 1.0 } else { 0.0 };
                                d[i * cols + j] += c * (probs.data()[i * cols + j] - onehot);
                            }
                        }
                    });
                }
            }
            grads[idx] = Some(g);
        }
        Ok(NodeGrads { grads })
    }

    /// Backward sweep collected per parameter of `params`. Parameters never
    /// recorded on this tape, or not reachable from `loss`, get zeros.
    pub fn param_grads(&self, loss: NodeId, params: &ParamStore) -> Result<Grads> {
        let node_grads = self.backward(loss)?;
        let mut values: Vec<Array> = params.iter().map(|(_, p)| Array::zeros(p.shape())).collect();
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Param(p) = node.op {
                if p >= values.len() {
                    return Err(Error::Contract(format!(
                        "tape references parameter {p} outside a store of {}",
                        values.len()
                    )));
                }
                if let Some(g) = node_grads.grads[i].as_ref() {
                    if g.shape() != values[p].shape() {
                        return Err(Error::Dimension(format!(
                            "parameter `{}` changed shape since it was recorded",
                            params.name(p)
                        )));
                    }
                    values[p]
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(d, v)| *d += v);
                }
            }
        }
        Ok(Grads::from_vec(values))
    }
}

/// Row-wise softmax of a matrix of logits.
pub fn softmax_rows(logits: &Array) -> Array {
    let cols = logits.cols();
    let mut data = Vec::with_capacity(logits.len());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = data.len();
        let mut z = 0.0;
        for v in row {
            let e = (v - max).exp();
            z += e;
            data.push(e);
        }
        data[start..start + cols].iter_mut().for_each(|v| *v /= z);
    }
    Array::from_parts(logits.shape().to_vec(), data)
}
