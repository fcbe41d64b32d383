//! Tape-based reverse-mode automatic differentiation over 2-D tensors.
//!
//! A forward pass appends nodes to the tape in topological order; `backward`
//! walks the tape in reverse, accumulating adjoints. Nodes hold their forward
//! values so backward never recomputes activations. The tape is single-writer;
//! a fresh tape is created per forward pass.

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<String> },
    Add(NodeId, NodeId),
    /// Matrix plus a 1xC bias row broadcast over rows.
    AddBias(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    SoftmaxRows(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    PickRow(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    MeanRows(NodeId),
    Cosine(NodeId, NodeId),
    /// Summed token-level cross-entropy of row logits against target indices.
    CrossEntropyRows(NodeId, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node adjoints produced by `Tape::backward`.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn of(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    /// Records a constant input; no gradient is reported for it.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf { param: None })
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Records a named parameter leaf; `backward` accumulates its gradient
    /// under this name.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let t = store.value(name)?.clone();
        Ok(self.push(t, Op::Leaf { param: Some(name.to_string()) }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if !ta.same_shape(tb) {
            return Err(Error::shape("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn add_bias(&mut self, m: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tm, tb) = (&self.nodes[m].value, &self.nodes[bias].value);
        if tb.rows() != 1 || tb.cols() != tm.cols() {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} vs bias {:?}", tm.shape(), tb.shape()),
            ));
        }
        let cols = tm.cols();
        let data = tm
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data()[i % cols])
            .collect();
        let value = Tensor::new(tm.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddBias(m, bias)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if !ta.same_shape(tb) {
            return Err(Error::shape("sub", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if !ta.same_shape(tb) {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let ta = &self.nodes[a].value;
        let data = ta.data().iter().map(|x| x * k).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Scale(a, k)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.cols() != tb.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let x = ta.at(i, p);
                if x == 0.0 {
                    continue;
                }
                let brow = tb.row(p);
                let out = &mut data[i * m..(i + 1) * m];
                for j in 0..m {
                    out[j] += x * brow[j];
                }
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a].value;
        let (n, m) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = ta.at(i, j);
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op, name: &'static str) -> Result<NodeId> {
        let ta = &self.nodes[a].value;
        let data: Vec<f64> = ta.data().iter().map(|&x| f(x)).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, op))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, f64::tanh, Op::Tanh(a), "tanh")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a), "relu")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a), "sigmoid")
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, f64::exp, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if self.nodes[a].value.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Invalid("log of non-positive value".into()));
        }
        self.unary(a, f64::ln, Op::Log(a), "log")
    }

    /// Softmax over the last axis (each row independently), numerically stable.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a].value;
        let (n, m) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let row = ta.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..m {
                let e = (row[j] - max).exp();
                data[i * m + j] = e;
                z += e;
            }
            for j in 0..m {
                data[i * m + j] /= z;
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        Ok(self.push(value, Op::SoftmaxRows(a)))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.nodes[a].value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a)))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a].value;
        if ta.is_empty() {
            return Err(Error::shape("mean", "empty tensor".to_string()));
        }
        let s: f64 = ta.data().iter().sum::<f64>() / ta.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(a)))
    }

    /// Stacks inputs with equal column counts along the row axis.
    pub fn concat_rows(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs".to_string()));
        }
        let cols = self.nodes[ids[0]].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &id in ids {
            let t = &self.nodes[id].value;
            if t.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column mismatch: {} vs {}", t.cols(), cols),
                ));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::ConcatRows(ids.to_vec())))
    }

    /// Concatenates inputs with equal row counts along the column axis.
    pub fn concat_cols(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs".to_string()));
        }
        let rows = self.nodes[ids[0]].value.rows();
        let total_cols: usize = ids.iter().map(|&id| self.nodes[id].value.cols()).sum();
        for &id in ids {
            if self.nodes[id].value.rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row mismatch: {} vs {}", self.nodes[id].value.rows(), rows),
                ));
            }
        }
        let mut data = vec![0.0; rows * total_cols];
        for i in 0..rows {
            let mut off = 0;
            for &id in ids {
                let t = &self.nodes[id].value;
                let c = t.cols();
                data[i * total_cols + off..i * total_cols + off + c].copy_from_slice(t.row(i));
                off += c;
            }
        }
        let value = Tensor::new(vec![rows, total_cols], data)?;
        Ok(self.push(value, Op::ConcatCols(ids.to_vec())))
    }

    pub fn pick_row(&mut self, a: NodeId, row: usize) -> Result<NodeId> {
        let ta = &self.nodes[a].value;
        if row >= ta.rows() {
            return Err(Error::shape(
                "pick_row",
                format!("row {} out of {} rows", row, ta.rows()),
            ));
        }
        let value = Tensor::new(vec![1, ta.cols()], ta.row(row).to_vec())?;
        Ok(self.push(value, Op::PickRow(a, row)))
    }

    /// Selects rows of `a` by index (embedding lookup); backward scatter-adds.
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let ta = &self.nodes[a].value;
        let mut data = Vec::with_capacity(indices.len() * ta.cols());
        for &i in indices {
            if i >= ta.rows() {
                return Err(Error::shape(
                    "gather_rows",
                    format!("index {} out of {} rows", i, ta.rows()),
                ));
            }
            data.extend_from_slice(ta.row(i));
        }
        let value = Tensor::new(vec![indices.len(), ta.cols()], data)?;
        Ok(self.push(value, Op::GatherRows(a, indices.to_vec())))
    }

    /// Mean over the row axis: NxC -> 1xC.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a].value;
        let (n, m) = (ta.rows(), ta.cols());
        if n == 0 {
            return Err(Error::shape("mean_rows", "no rows".to_string()));
        }
        let mut data = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                data[j] += ta.at(i, j);
            }
        }
        for v in data.iter_mut() {
            *v /= n as f64;
        }
        let value = Tensor::new(vec![1, m], data)?;
        Ok(self.push(value, Op::MeanRows(a)))
    }

    /// Cosine similarity of two 1xN vectors; errors on zero norm.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if !ta.same_shape(tb) || ta.rows() != 1 {
            return Err(Error::shape(
                "cosine",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let na = norm(ta.data());
        let nb = norm(tb.data());
        if na == 0.0 || nb == 0.0 {
            return Err(Error::Invalid("cosine of zero-norm vector".into()));
        }
        let dot: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        Ok(self.push(Tensor::scalar(dot / (na * nb)), Op::Cosine(a, b)))
    }

    /// Sum over rows of -log softmax(row)[target]; targets must index columns.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let t = &self.nodes[logits].value;
        if targets.len() != t.rows() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {} rows", targets.len(), t.rows()),
            ));
        }
        let mut loss = 0.0;
        for (i, &tgt) in targets.iter().enumerate() {
            if tgt >= t.cols() {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("target {} out of vocab {}", tgt, t.cols()),
                ));
            }
            loss += log_sum_exp(t.row(i)) - t.at(i, tgt);
        }
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropyRows(logits, targets.to_vec())))
    }

    /// Reverse pass from a scalar root. Two runs over identical tapes produce
    /// bit-identical gradients (fixed traversal order, no parallel reduction).
    pub fn backward(&self, root: NodeId) -> Result<Grads> {
        if self.nodes.is_empty() {
            return Err(Error::Invalid("backward on empty tape".into()));
        }
        let root_t = &self.nodes[root].value;
        if !root_t.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", root_t.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::scalar(1.0));

        for id in (0..=root).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Grads { grads })
    }

    /// Adds parameter-leaf adjoints into the store's gradient accumulators.
    pub fn accumulate_param_grads(&self, grads: &Grads, store: &mut ParamStore) -> Result<()> {
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(name) } = &node.op {
                if let Some(g) = grads.of(id) {
                    store.accumulate_grad(name, g)?;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, id: NodeId, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let val = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                acc(grads, *a, val.shape(), g.data());
                acc(grads, *b, val.shape(), g.data());
            }
            Op::AddBias(m, bias) => {
                acc(grads, *m, val.shape(), g.data());
                let cols = val.cols();
                let mut gb = vec![0.0; cols];
                for (i, v) in g.data().iter().enumerate() {
                    gb[i % cols] += v;
                }
                acc(grads, *bias, &[1, cols], &gb);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, val.shape(), g.data());
                let neg: Vec<f64> = g.data().iter().map(|v| -v).collect();
                acc(grads, *b, val.shape(), &neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let ga: Vec<f64> = g.data().iter().zip(tb.data()).map(|(gv, y)| gv * y).collect();
                let gb: Vec<f64> = g.data().iter().zip(ta.data()).map(|(gv, x)| gv * x).collect();
                acc(grads, *a, val.shape(), &ga);
                acc(grads, *b, val.shape(), &gb);
            }
            Op::Scale(a, k) => {
                let ga: Vec<f64> = g.data().iter().map(|v| v * k).collect();
                acc(grads, *a, val.shape(), &ga);
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                // dA = G * B^T
                let mut ga = vec![0.0; n * k];
                for i in 0..n {
                    for p in 0..k {
                        let brow = tb.row(p);
                        let grow = &g.data()[i * m..(i + 1) * m];
                        let mut s = 0.0;
                        for j in 0..m {
                            s += grow[j] * brow[j];
                        }
                        ga[i * k + p] = s;
                    }
                }
                // dB = A^T * G
                let mut gb = vec![0.0; k * m];
                for i in 0..n {
                    let grow = &g.data()[i * m..(i + 1) * m];
                    for p in 0..k {
                        let x = ta.at(i, p);
                        if x == 0.0 {
                            continue;
                        }
                        let out = &mut gb[p * m..(p + 1) * m];
                        for j in 0..m {
                            out[j] += x * grow[j];
                        }
                    }
                }
                acc(grads, *a, &[n, k], &ga);
                acc(grads, *b, &[k, m], &gb);
            }
            Op::Transpose(a) => {
                let (n, m) = (val.rows(), val.cols());
                let mut ga = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        ga[j * n + i] = g.at(i, j);
                    }
                }
                acc(grads, *a, &[m, n], &ga);
            }
            Op::Tanh(a) => {
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(val.data())
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect();
                acc(grads, *a, val.shape(), &ga);
            }
            Op::Relu(a) => {
                // subgradient at the kink is 0
                let x = &self.nodes[*a].value;
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                acc(grads, *a, val.shape(), &ga);
            }
            Op::Sigmoid(a) => {
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(val.data())
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect();
                acc(grads, *a, val.shape(), &ga);
            }
            Op::Exp(a) => {
                let ga: Vec<f64> = g.data().iter().zip(val.data()).map(|(gv, y)| gv * y).collect();
                acc(grads, *a, val.shape(), &ga);
            }
            Op::Log(a) => {
                let x = &self.nodes[*a].value;
                let ga: Vec<f64> = g.data().iter().zip(x.data()).map(|(gv, xv)| gv / xv).collect();
                acc(grads, *a, val.shape(), &ga);
            }
            Op::SoftmaxRows(a) => {
                let (n, m) = (val.rows(), val.cols());
                let mut ga = vec![0.0; n * m];
                for i in 0..n {
                    let y = val.row(i);
                    let grow = &g.data()[i * m..(i + 1) * m];
                    let dot: f64 = y.iter().zip(grow).map(|(yv, gv)| yv * gv).sum();
                    for j in 0..m {
                        ga[i * m + j] = y[j] * (grow[j] - dot);
                    }
                }
                acc(grads, *a, &[n, m], &ga);
            }
            Op::Sum(a) => {
                let ta = &self.nodes[*a].value;
                let gv = g.data()[0];
                let ga = vec![gv; ta.len()];
                acc(grads, *a, ta.shape(), &ga);
            }
            Op::Mean(a) => {
                let ta = &self.nodes[*a].value;
                let gv = g.data()[0] / ta.len() as f64;
                let ga = vec![gv; ta.len()];
                acc(grads, *a, ta.shape(), &ga);
            }
            Op::ConcatRows(ids) => {
                let mut off = 0;
                for &cid in ids {
                    let t = &self.nodes[cid].value;
                    let n = t.len();
                    acc(grads, cid, t.shape(), &g.data()[off..off + n]);
                    off += n;
                }
            }
            Op::ConcatCols(ids) => {
                let rows = val.rows();
                let total = val.cols();
                let mut off = 0;
                for &cid in ids {
                    let t = &self.nodes[cid].value;
                    let c = t.cols();
                    let mut gc = vec![0.0; rows * c];
                    for i in 0..rows {
                        gc[i * c..(i + 1) * c]
                            .copy_from_slice(&g.data()[i * total + off..i * total + off + c]);
                    }
                    acc(grads, cid, t.shape(), &gc);
                    off += c;
                }
            }
            Op::PickRow(a, row) => {
                let ta = &self.nodes[*a].value;
                let mut ga = vec![0.0; ta.len()];
                let c = ta.cols();
                ga[row * c..(row + 1) * c].copy_from_slice(g.data());
                acc(grads, *a, ta.shape(), &ga);
            }
            Op::GatherRows(a, indices) => {
                let ta = &self.nodes[*a].value;
                let c = ta.cols();
                let mut ga = vec![0.0; ta.len()];
                for (i, &idx) in indices.iter().enumerate() {
                    let grow = &g.data()[i * c..(i + 1) * c];
                    let out = &mut ga[idx * c..(idx + 1) * c];
                    for j in 0..c {
                        out[j] += grow[j];
                    }
                }
                acc(grads, *a, ta.shape(), &ga);
            }
            Op::MeanRows(a) => {
                let ta = &self.nodes[*a].value;
                let (n, m) = (ta.rows(), ta.cols());
                let mut ga = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        ga[i * m + j] = g.data()[j] / n as f64;
                    }
                }
                acc(grads, *a, ta.shape(), &ga);
            }
            Op::Cosine(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let na = norm(ta.data());
                let nb = norm(tb.data());
                let cos = val.data()[0];
                let gv = g.data()[0];
                let ga: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| gv * (y / (na * nb) - cos * x / (na * na)))
                    .collect();
                let gb: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| gv * (x / (na * nb) - cos * y / (nb * nb)))
                    .collect();
                acc(grads, *a, ta.shape(), &ga);
                acc(grads, *b, tb.shape(), &gb);
            }
            Op::CrossEntropyRows(a, targets) => {
                let ta = &self.nodes[*a].value;
                let (n, m) = (ta.rows(), ta.cols());
                let gv = g.data()[0];
                let mut ga = vec![0.0; n * m];
                for i in 0..n {
                    let row = ta.row(i);
                    let lse = log_sum_exp(row);
                    for j in 0..m {
                        let p = (row[j] - lse).exp();
                        ga[i * m + j] = gv * (p - if j == targets[i] { 1.0 } else { 0.0 });
                    }
                }
                acc(grads, *a, &[n, m], &ga);
            }
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], delta: &[f64]) {
    match &mut grads[id] {
        Some(g) => {
            for (gv, d) in g.data_mut().iter_mut().zip(delta) {
                *gv += d;
            }
        }
        None => {
            grads[id] = Some(
                Tensor::new(shape.to_vec(), delta.to_vec())
                    .expect("gradient shape mirrors forward shape"),
            );
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
