//! Reverse-mode differentiation over a linear operation tape.
//!
//! Values are computed eagerly as operations are pushed. Nodes can only
//! reference earlier nodes, so the tape order is a topological order and the
//! backward sweep walks it once in reverse.

use std::sync::Arc;

use indexmap::IndexMap;

use crate::error::{LabError, Result};
use crate::ops::{self, rms_inv, sigmoid};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T: Scalar> {
    Leaf,
    Const,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Silu(NodeId),
    RmsNorm(NodeId, NodeId),
    Softmax {
        x: NodeId,
        scale: T,
        causal: Option<usize>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    GatherRows {
        table: NodeId,
        ids: Vec<usize>,
    },
    /// Row `i` of `x` scaled by `col[i]`.
    MulCol {
        x: NodeId,
        col: NodeId,
    },
    /// `Σ −log softmax(z_row)[token]` over `(row, token)` targets.
    CrossEntropy {
        logits: NodeId,
        targets: Vec<(usize, usize)>,
    },
    /// `Σ_rows KL(softmax(teacher/τ) ‖ softmax(z/τ))`; teacher row `k` pairs with `rows[k]`.
    KlDiv {
        logits: NodeId,
        teacher: Arc<Tensor<T>>,
        rows: Vec<usize>,
        tau: f64,
    },
    Sum(NodeId),
}

impl<T: Scalar> Op<T> {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Const => vec![],
            Op::MatMul(a, b) | Op::MatMulT(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::RmsNorm(x, g) => vec![*x, *g],
            Op::Scale(x, _) | Op::Silu(x) | Op::Sum(x) => vec![*x],
            Op::Softmax { x, .. } | Op::SliceCols { x, .. } => vec![*x],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
            Op::GatherRows { table, .. } => vec![*table],
            Op::MulCol { x, col } => vec![*x, *col],
            Op::CrossEntropy { logits, .. } | Op::KlDiv { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T: Scalar> {
    op: Op<T>,
    value: Arc<Tensor<T>>,
}

/// Recorded computation. Build with the op methods, then call [`reverse_grad`].
#[derive(Clone, Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, NodeId>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: IndexMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shared_value(&self, id: NodeId) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[id.0].value)
    }

    /// Named leaves that receive gradients, in registration order.
    pub fn params(&self) -> &IndexMap<String, NodeId> {
        &self.params
    }

    /// Register a differentiable leaf.
    pub fn param(&mut self, name: &str, value: Arc<Tensor<T>>) -> Result<NodeId> {
        if self.params.contains_key(name) {
            return Err(LabError::Contract(format!("leaf {name} registered twice")));
        }
        let id = self.push_raw(Op::Leaf, value);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// A value the backward sweep treats as constant.
    pub fn constant(&mut self, value: Arc<Tensor<T>>) -> NodeId {
        self.push_raw(Op::Const, value)
    }

    pub fn constant_tensor(&mut self, value: Tensor<T>) -> NodeId {
        self.constant(Arc::new(value))
    }

    fn push_raw(&mut self, op: Op<T>, value: Arc<Tensor<T>>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<T>) -> Result<NodeId> {
        let value = self.compute(&op)?;
        Ok(self.push_raw(op, Arc::new(value)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        self.push(Op::Scale(a, c))
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Silu(a))
    }

    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        self.push(Op::RmsNorm(x, gain))
    }

    /// Row softmax of `scale · x`; with `causal = Some(o)` row `i` sees columns `<= i + o`.
    pub fn softmax(&mut self, x: NodeId, scale: T, causal: Option<usize>) -> Result<NodeId> {
        self.push(Op::Softmax { x, scale, causal })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::SliceCols { x, start, len })
    }

    pub fn concat_cols(&mut self, xs: Vec<NodeId>) -> Result<NodeId> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        self.push(Op::ConcatCols(xs))
    }

    pub fn concat_rows(&mut self, xs: Vec<NodeId>) -> Result<NodeId> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        self.push(Op::ConcatRows(xs))
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: Vec<usize>) -> Result<NodeId> {
        self.push(Op::GatherRows { table, ids })
    }

    pub fn mul_col(&mut self, x: NodeId, col: NodeId) -> Result<NodeId> {
        self.push(Op::MulCol { x, col })
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<(usize, usize)>) -> Result<NodeId> {
        self.push(Op::CrossEntropy { logits, targets })
    }

    pub fn kl_div(&mut self, logits: NodeId, teacher: Arc<Tensor<T>>, rows: Vec<usize>, tau: f64) -> Result<NodeId> {
        self.push(Op::KlDiv { logits, teacher, rows, tau })
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(x))
    }

    /// Recompute every node from its inputs and compare with the recorded values.
    /// Returns the number of nodes whose recomputation is not bit-identical.
    pub fn replay_mismatches(&self) -> Result<usize> {
        let mut bad = 0;
        for node in &self.nodes {
            if matches!(node.op, Op::Leaf | Op::Const) {
                continue;
            }
            let again = self.compute(&node.op)?;
            let same = again.shape() == node.value.shape()
                && again.data().iter().zip(node.value.data()).all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits());
            if !same {
                bad += 1;
            }
        }
        Ok(bad)
    }

    fn v(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.nodes
            .get(id.0)
            .map(|n| n.value.as_ref())
            .ok_or_else(|| LabError::Internal(format!("dangling node reference {}", id.0)))
    }

    fn compute(&self, op: &Op<T>) -> Result<Tensor<T>> {
        Ok(match op {
            Op::Leaf | Op::Const => unreachable!("leaves carry their value"),
            Op::MatMul(a, b) => self.v(*a)?.matmul(self.v(*b)?)?,
            Op::MatMulT(a, b) => self.v(*a)?.matmul_t(self.v(*b)?)?,
            Op::Add(a, b) => self.v(*a)?.add(self.v(*b)?)?,
            Op::Mul(a, b) => self.v(*a)?.hadamard(self.v(*b)?)?,
            Op::Scale(a, c) => self.v(*a)?.scale(*c),
            Op::Silu(a) => ops::silu(self.v(*a)?),
            Op::RmsNorm(x, g) => {
                let (x, g) = (self.v(*x)?, self.v(*g)?);
                if g.numel() != x.cols() {
                    return Err(LabError::Contract(format!("rms_norm gain {:?} for input {:?}", g.shape(), x.shape())));
                }
                ops::rms_norm(x, g)
            }
            Op::Softmax { x, scale, causal } => ops::masked_softmax_rows(self.v(*x)?, *scale, *causal),
            Op::SliceCols { x, start, len } => {
                let x = self.v(*x)?;
                if start + len > x.cols() {
                    return Err(LabError::Contract("column slice out of range".into()));
                }
                x.slice_cols(*start, *len)
            }
            Op::ConcatCols(xs) => {
                let parts = xs.iter().map(|x| self.v(*x)).collect::<Result<Vec<_>>>()?;
                let n = parts[0].rows();
                if parts.iter().any(|p| p.rows() != n) {
                    return Err(LabError::Contract("concat_cols row mismatch".into()));
                }
                let width: usize = parts.iter().map(|p| p.cols()).sum();
                let mut data = Vec::with_capacity(n * width);
                for i in 0..n {
                    for p in &parts {
                        data.extend_from_slice(p.row(i));
                    }
                }
                Tensor::new(vec![n, width], data)?
            }
            Op::ConcatRows(xs) => {
                let parts = xs.iter().map(|x| self.v(*x)).collect::<Result<Vec<_>>>()?;
                let m = parts[0].cols();
                if parts.iter().any(|p| p.cols() != m) {
                    return Err(LabError::Contract("concat_rows width mismatch".into()));
                }
                let n: usize = parts.iter().map(|p| p.rows()).sum();
                let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
                Tensor::new(vec![n, m], data)?
            }
            Op::GatherRows { table, ids } => {
                let table = self.v(*table)?;
                let m = table.cols();
                let mut data = Vec::with_capacity(ids.len() * m);
                for &id in ids {
                    if id >= table.rows() {
                        return Err(LabError::Input(format!("row id {id} out of range for table with {} rows", table.rows())));
                    }
                    data.extend_from_slice(table.row(id));
                }
                Tensor::new(vec![ids.len(), m], data)?
            }
            Op::MulCol { x, col } => {
                let (x, col) = (self.v(*x)?, self.v(*col)?);
                if col.numel() != x.rows() {
                    return Err(LabError::Contract("mul_col length mismatch".into()));
                }
                let mut out = x.clone();
                for i in 0..x.rows() {
                    let c = col.data()[i];
                    for v in out.row_mut(i) {
                        *v *= c;
                    }
                }
                out
            }
            Op::CrossEntropy { logits, targets } => {
                let z = self.v(*logits)?;
                let mut total = 0.0f64;
                for &(r, t) in targets {
                    if r >= z.rows() || t >= z.cols() {
                        return Err(LabError::Contract(format!("cross-entropy target ({r}, {t}) out of range")));
                    }
                    let row: Vec<f64> = z.row(r).iter().map(|v| v.to_f64()).collect();
                    total -= ops::log_softmax(&row)[t];
                }
                Tensor::scalar(T::from_f64(total))
            }
            Op::KlDiv { logits, teacher, rows, tau } => {
                let z = self.v(*logits)?;
                if teacher.cols() != z.cols() || teacher.rows() != rows.len() {
                    return Err(LabError::Contract(format!(
                        "teacher logits {:?} for {} rows of width {}",
                        teacher.shape(),
                        rows.len(),
                        z.cols()
                    )));
                }
                let mut total = 0.0f64;
                for (k, &r) in rows.iter().enumerate() {
                    let (lp, lq) = kl_logs(teacher.row(k), z.row(r), *tau);
                    total += lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum::<f64>();
                }
                Tensor::scalar(T::from_f64(total))
            }
            Op::Sum(x) => Tensor::scalar(T::from_f64(self.v(*x)?.sum_f64())),
        })
    }
}

fn kl_logs<T: Scalar>(teacher: &[T], student: &[T], tau: f64) -> (Vec<f64>, Vec<f64>) {
    let t: Vec<f64> = teacher.iter().map(|v| v.to_f64() / tau).collect();
    let s: Vec<f64> = student.iter().map(|v| v.to_f64() / tau).collect();
    (ops::log_softmax(&t), ops::log_softmax(&s))
}

/// Gradients of a scalar loss with respect to every registered leaf.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T: Scalar = f32> {
    grads: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.grads.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, name: String, grad: Tensor<T>) {
        self.grads.insert(name, grad);
    }

    /// Elementwise accumulate `other` into `self`, adding missing entries.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v *= c;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.grads.values().map(Tensor::max_abs).fold(0.0, f64::max)
    }
}

/// Reverse sweep from `loss`. Leaves with no path to the loss get zero gradients;
/// constants get none.
pub fn reverse_grad<T: Scalar>(tape: &Tape<T>, loss: NodeId) -> Result<Gradients<T>> {
    let loss_node = tape.nodes.get(loss.0).ok_or_else(|| LabError::Contract(format!("loss node {} not on tape", loss.0)))?;
    if loss_node.value.numel() != 1 {
        return Err(LabError::Contract(format!("loss must be a scalar, got shape {:?}", loss_node.value.shape())));
    }
    for (i, node) in tape.nodes.iter().enumerate() {
        if node.op.inputs().iter().any(|inp| inp.0 >= i) {
            return Err(LabError::Internal(format!("node {i} references a later node; tape is cyclic")));
        }
    }

    let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
    grads[loss.0] = Some(Tensor::full(loss_node.value.shape(), T::ONE));

    for i in (0..=loss.0).rev() {
        let Some(upstream) = grads[i].take() else { continue };
        let node = &tape.nodes[i];
        if matches!(node.op, Op::Leaf) {
            grads[i] = Some(upstream);
            continue;
        }
        backward_op(tape, &node.op, &node.value, &upstream, &mut grads)?;
    }

    let mut out = Gradients::default();
    for (name, id) in &tape.params {
        let g = grads.get_mut(id.0).and_then(Option::take).unwrap_or_else(|| Tensor::zeros(tape.nodes[id.0].value.shape()));
        out.grads.insert(name.clone(), g);
    }
    Ok(out)
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) {
    match &mut grads[id.0] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn backward_op<T: Scalar>(
    tape: &Tape<T>,
    op: &Op<T>,
    out: &Tensor<T>,
    dy: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let val = |id: NodeId| tape.nodes[id.0].value.as_ref();
    match op {
        Op::Leaf | Op::Const => {}
        Op::MatMul(a, b) => {
            accumulate(grads, *a, dy.matmul_t(val(*b))?);
            accumulate(grads, *b, val(*a).t_matmul(dy)?);
        }
        Op::MatMulT(a, b) => {
            accumulate(grads, *a, dy.matmul(val(*b))?);
            accumulate(grads, *b, dy.t_matmul(val(*a))?);
        }
        Op::Add(a, b) => {
            accumulate(grads, *a, dy.clone());
            accumulate(grads, *b, dy.clone());
        }
        Op::Mul(a, b) => {
            accumulate(grads, *a, dy.hadamard(val(*b))?);
            accumulate(grads, *b, dy.hadamard(val(*a))?);
        }
        Op::Scale(a, c) => accumulate(grads, *a, dy.scale(*c)),
        Op::Silu(a) => {
            let x = val(*a);
            let mut dx = dy.clone();
            for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                let s = sigmoid(xv);
                *d *= s * (T::ONE + xv * (T::ONE - s));
            }
            accumulate(grads, *a, dx);
        }
        Op::RmsNorm(xid, gid) => {
            let (x, g) = (val(*xid), val(*gid));
            let (n, d) = (x.rows(), x.cols());
            let dn = T::from_f64(d as f64);
            let mut dx = Tensor::zeros(x.shape());
            let mut dg = Tensor::zeros(g.shape());
            for i in 0..n {
                let xr = x.row(i);
                let dyr = dy.row(i);
                let inv = rms_inv(xr);
                let mut dot = T::ZERO;
                for j in 0..d {
                    dot += dyr[j] * g.data()[j] * xr[j];
                    dg.data_mut()[j] += dyr[j] * xr[j] * inv;
                }
                let k = inv * inv * inv * dot / dn;
                let dxr = dx.row_mut(i);
                for j in 0..d {
                    dxr[j] = inv * g.data()[j] * dyr[j] - xr[j] * k;
                }
            }
            accumulate(grads, *xid, dx);
            accumulate(grads, *gid, dg);
        }
        Op::Softmax { x, scale, .. } => {
            let mut dx = Tensor::zeros(out.shape());
            for i in 0..out.rows() {
                let y = out.row(i);
                let g = dy.row(i);
                let mut dot = T::ZERO;
                for j in 0..y.len() {
                    dot += y[j] * g[j];
                }
                for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                    *d = *scale * y[j] * (g[j] - dot);
                }
            }
            accumulate(grads, *x, dx);
        }
        Op::SliceCols { x, start, len } => {
            let xv = val(*x);
            let mut dx = Tensor::zeros(xv.shape());
            for i in 0..xv.rows() {
                dx.row_mut(i)[*start..start + len].copy_from_slice(dy.row(i));
            }
            accumulate(grads, *x, dx);
        }
        Op::ConcatCols(xs) => {
            let mut start = 0;
            for &x in xs {
                let w = val(x).cols();
                accumulate(grads, x, dy.slice_cols(start, w));
                start += w;
            }
        }
        Op::ConcatRows(xs) => {
            let mut start = 0;
            for &x in xs {
                let h = val(x).rows();
                accumulate(grads, x, dy.slice_rows(start, h));
                start += h;
            }
        }
        Op::GatherRows { table, ids } => {
            let t = val(*table);
            let mut dt = Tensor::zeros(t.shape());
            for (k, &id) in ids.iter().enumerate() {
                for (d, &g) in dt.row_mut(id).iter_mut().zip(dy.row(k)) {
                    *d += g;
                }
            }
            accumulate(grads, *table, dt);
        }
        Op::MulCol { x, col } => {
            let (xv, cv) = (val(*x), val(*col));
            let mut dx = dy.clone();
            let mut dc = Tensor::zeros(cv.shape());
            for i in 0..xv.rows() {
                let c = cv.data()[i];
                let mut acc = T::ZERO;
                for (d, &xe) in dx.row_mut(i).iter_mut().zip(xv.row(i)) {
                    acc += *d * xe;
                    *d *= c;
                }
                dc.data_mut()[i] = acc;
            }
            accumulate(grads, *x, dx);
            accumulate(grads, *col, dc);
        }
        Op::CrossEntropy { logits, targets } => {
            let z = val(*logits);
            let g = dy.data()[0].to_f64();
            let mut dz = Tensor::zeros(z.shape());
            for &(r, t) in targets {
                let row: Vec<f64> = z.row(r).iter().map(|v| v.to_f64()).collect();
                let p = ops::softmax_f64(&row);
                for (v, d) in dz.row_mut(r).iter_mut().enumerate() {
                    let onehot = if v == t { 1.0 } else { 0.0 };
                    *d += T::from_f64(g * (p[v] - onehot));
                }
            }
            accumulate(grads, *logits, dz);
        }
        Op::KlDiv { logits, teacher, rows, tau } => {
            let z = val(*logits);
            let g = dy.data()[0].to_f64();
            let mut dz = Tensor::zeros(z.shape());
            for (k, &r) in rows.iter().enumerate() {
                let (lp, lq) = kl_logs(teacher.row(k), z.row(r), *tau);
                for (v, d) in dz.row_mut(r).iter_mut().enumerate() {
                    *d += T::from_f64(g * (lq[v].exp() - lp[v].exp()) / tau);
                }
            }
            accumulate(grads, *logits, dz);
        }
        Op::Sum(x) => {
            let g = dy.data()[0];
            accumulate(grads, *x, Tensor::full(val(*x).shape(), g));
        }
    }
    Ok(())
}
