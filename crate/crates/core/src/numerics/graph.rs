//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Graph`]; parents always carry a
//! smaller id than their children, so node order is already a topological
//! order and the backward sweep is a single reverse scan.
//!
//! Leaf gradients accumulate across calls to [`Graph::backward`] until
//! [`Graph::zero_grad`] is called.

use std::cell::{Ref, RefCell};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Abs(usize),
    Relu(usize),
    Gelu(usize),
    Sum(usize),
    Mean(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    NormalizeRows {
        x: usize,
        norms: Vec<f64>,
    },
    PairwiseSqDist(usize),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    Pick(usize, Vec<usize>),
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-thread computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives gradients.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { graph: self, id }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    pub fn concat_rows<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Domain("concat_rows of nothing".into()))?;
        let cols = first.value_ref().cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = p.value_ref();
            if v.ndim() != 2 || v.cols() != cols {
                return Err(Error::dim("concat_rows", first.value_ref().shape(), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.needs(&ids);
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatRows(ids),
            rg,
        ))
    }

    pub fn concat_cols<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Domain("concat_cols of nothing".into()))?;
        let rows = first.value_ref().rows();
        let mut total = 0;
        for p in parts {
            let v = p.value_ref();
            if v.ndim() != 2 || v.rows() != rows {
                return Err(Error::dim("concat_cols", first.value_ref().shape(), v.shape()));
            }
            total += v.cols();
        }
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for p in parts {
            let v = p.value_ref();
            let c = v.cols();
            for i in 0..rows {
                data[i * total + off..i * total + off + c].copy_from_slice(v.row(i));
            }
            off += c;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.needs(&ids);
        Ok(self.push(
            Tensor::new(vec![rows, total], data)?,
            Op::ConcatCols(ids),
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        adj[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                adj[id] = Some(g);
                continue;
            }
            propagate(&nodes, node, &g, &mut adj);
        }

        let mut grads = self.grads.borrow_mut();
        if grads.len() < nodes.len() {
            grads.resize_with(nodes.len(), || None);
        }
        for (id, a) in adj.into_iter().enumerate() {
            let Some(a) = a else { continue };
            if !matches!(nodes[id].op, Op::Leaf) || !nodes[id].requires_grad {
                continue;
            }
            match &mut grads[id] {
                Some(acc) => acc.add_assign(&a),
                slot @ None => *slot = Some(a),
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf, if any flowed into it.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        self.grads.borrow().get(v.id).cloned().flatten()
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }
}

fn add_to(adj: &mut [Option<Tensor>], nodes: &[Node], id: usize, delta: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut adj[id] {
        Some(acc) => acc.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

/// The adjoint accumulator of `id`, created as zeros on first use; `None`
/// when `id` needs no gradient.
fn slot<'a>(adj: &'a mut [Option<Tensor>], nodes: &[Node], id: usize) -> Option<&'a mut Tensor> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(adj[id].get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape())))
}

fn with_shape(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("gradient shape")
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            add_to(adj, nodes, *a, g.clone());
            add_to(adj, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            add_to(adj, nodes, *a, g.clone());
            add_to(adj, nodes, *b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let da = g.data().iter().zip(vb.data()).map(|(g, b)| g * b).collect();
            let db = g.data().iter().zip(va.data()).map(|(g, a)| g * a).collect();
            add_to(adj, nodes, *a, with_shape(va.shape(), da));
            add_to(adj, nodes, *b, with_shape(vb.shape(), db));
        }
        Op::AddRow(a, b) => {
            add_to(adj, nodes, *a, g.clone());
            let vb = &nodes[*b].value;
            let c = g.cols();
            let mut db = vec![0.0; c];
            for i in 0..g.rows() {
                for (d, x) in db.iter_mut().zip(g.row(i)) {
                    *d += x;
                }
            }
            add_to(adj, nodes, *b, with_shape(vb.shape(), db));
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            if nodes[*a].requires_grad {
                add_to(adj, nodes, *a, gemm(g, false, vb, true));
            }
            if nodes[*b].requires_grad {
                add_to(adj, nodes, *b, gemm(va, true, g, false));
            }
        }
        Op::Transpose(a) => add_to(adj, nodes, *a, g.transpose()),
        Op::Scale(a, s) => add_to(adj, nodes, *a, g.map(|x| x * s)),
        Op::AddScalar(a) => add_to(adj, nodes, *a, g.clone()),
        Op::Exp(a) => {
            let d = g.data().iter().zip(out.data()).map(|(g, y)| g * y).collect();
            add_to(adj, nodes, *a, with_shape(out.shape(), d));
        }
        Op::Log(a) => {
            let va = &nodes[*a].value;
            let d = g.data().iter().zip(va.data()).map(|(g, x)| g / x).collect();
            add_to(adj, nodes, *a, with_shape(out.shape(), d));
        }
        Op::Sqrt(a) => {
            let d = g
                .data()
                .iter()
                .zip(out.data())
                .map(|(g, y)| 0.5 * g / y)
                .collect();
            add_to(adj, nodes, *a, with_shape(out.shape(), d));
        }
        Op::Abs(a) => {
            let va = &nodes[*a].value;
            let d = g
                .data()
                .iter()
                .zip(va.data())
                .map(|(g, x)| {
                    if *x > 0.0 {
                        *g
                    } else if *x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })
                .collect();
            add_to(adj, nodes, *a, with_shape(out.shape(), d));
        }
        Op::Relu(a) => {
            let va = &nodes[*a].value;
            let d = g
                .data()
                .iter()
                .zip(va.data())
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect();
            add_to(adj, nodes, *a, with_shape(out.shape(), d));
        }
        Op::Gelu(a) => {
            let va = &nodes[*a].value;
            let d = g
                .data()
                .iter()
                .zip(va.data())
                .map(|(g, &x)| {
                    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * dt)
                })
                .collect();
            add_to(adj, nodes, *a, with_shape(out.shape(), d));
        }
        Op::Sum(a) => {
            let va = &nodes[*a].value;
            add_to(adj, nodes, *a, Tensor::full(va.shape(), g.item()));
        }
        Op::Mean(a) => {
            let va = &nodes[*a].value;
            let n = va.len().max(1) as f64;
            add_to(adj, nodes, *a, Tensor::full(va.shape(), g.item() / n));
        }
        Op::Softmax(a) => {
            let c = out.cols();
            let mut d = vec![0.0; out.len()];
            for i in 0..out.rows() {
                let (y, gy) = (out.row(i), g.row(i));
                let dot: f64 = y.iter().zip(gy).map(|(y, g)| y * g).sum();
                for j in 0..c {
                    d[i * c + j] = y[j] * (gy[j] - dot);
                }
            }
            add_to(adj, nodes, *a, with_shape(out.shape(), d));
        }
        Op::LogSoftmax(a) => {
            let c = out.cols();
            let mut d = vec![0.0; out.len()];
            for i in 0..out.rows() {
                let (y, gy) = (out.row(i), g.row(i));
                let total: f64 = gy.iter().sum();
                for j in 0..c {
                    d[i * c + j] = gy[j] - y[j].exp() * total;
                }
            }
            add_to(adj, nodes, *a, with_shape(out.shape(), d));
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let vg = &nodes[*gamma].value;
            let c = xhat.cols();
            let mut dx = vec![0.0; xhat.len()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for i in 0..xhat.rows() {
                let (xh, gy) = (xhat.row(i), g.row(i));
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for j in 0..c {
                    let dxh = gy[j] * vg.data()[j];
                    sum_d += dxh;
                    sum_dx += dxh * xh[j];
                    dgamma[j] += gy[j] * xh[j];
                    dbeta[j] += gy[j];
                }
                let n = c as f64;
                for j in 0..c {
                    let dxh = gy[j] * vg.data()[j];
                    dx[i * c + j] = inv_std[i] / n * (n * dxh - sum_d - xh[j] * sum_dx);
                }
            }
            add_to(adj, nodes, *x, with_shape(xhat.shape(), dx));
            add_to(adj, nodes, *gamma, with_shape(vg.shape(), dgamma));
            add_to(adj, nodes, *beta, with_shape(nodes[*beta].value.shape(), dbeta));
        }
        Op::NormalizeRows { x, norms } => {
            let c = out.cols();
            let mut d = vec![0.0; out.len()];
            for i in 0..out.rows() {
                let (y, gy) = (out.row(i), g.row(i));
                let dot: f64 = y.iter().zip(gy).map(|(y, g)| y * g).sum();
                for j in 0..c {
                    d[i * c + j] = (gy[j] - y[j] * dot) / norms[i];
                }
            }
            add_to(adj, nodes, *x, with_shape(out.shape(), d));
        }
        Op::PairwiseSqDist(a) => {
            let va = &nodes[*a].value;
            let (b, c) = (va.rows(), va.cols());
            let mut d = vec![0.0; va.len()];
            for i in 0..b {
                for j in 0..b {
                    let w = 2.0 * (g.at(i, j) + g.at(j, i));
                    if w == 0.0 || i == j {
                        continue;
                    }
                    let (xi, xj) = (va.row(i), va.row(j));
                    for k in 0..c {
                        d[i * c + k] += w * (xi[k] - xj[k]);
                    }
                }
            }
            add_to(adj, nodes, *a, with_shape(va.shape(), d));
        }
        Op::ConcatRows(ids) => {
            let c = g.cols();
            let mut off = 0;
            for &id in ids {
                let v = &nodes[id].value;
                let n = v.rows() * c;
                add_to(
                    adj,
                    nodes,
                    id,
                    with_shape(v.shape(), g.data()[off..off + n].to_vec()),
                );
                off += n;
            }
        }
        Op::SliceRows(a, start) => {
            let c = nodes[*a].value.cols();
            if let Some(acc) = slot(adj, nodes, *a) {
                for (d, x) in acc.data_mut()[start * c..start * c + g.len()].iter_mut().zip(g.data()) {
                    *d += x;
                }
            }
        }
        Op::ConcatCols(ids) => {
            let (rows, total) = (g.rows(), g.cols());
            let mut off = 0;
            for &id in ids {
                let v = &nodes[id].value;
                let c = v.cols();
                let mut d = Vec::with_capacity(rows * c);
                for i in 0..rows {
                    d.extend_from_slice(&g.data()[i * total + off..i * total + off + c]);
                }
                add_to(adj, nodes, id, with_shape(v.shape(), d));
                off += c;
            }
        }
        Op::SliceCols(a, start) => {
            let (rows, c) = (nodes[*a].value.rows(), nodes[*a].value.cols());
            let w = g.cols();
            if let Some(acc) = slot(adj, nodes, *a) {
                let data = acc.data_mut();
                for i in 0..rows {
                    for (d, x) in data[i * c + start..i * c + start + w].iter_mut().zip(g.row(i)) {
                        *d += x;
                    }
                }
            }
        }
        Op::Pick(a, idx) => {
            let va = &nodes[*a].value;
            let mut d = vec![0.0; va.len()];
            for (k, &i) in idx.iter().enumerate() {
                d[i] += g.data()[k];
            }
            add_to(adj, nodes, *a, with_shape(va.shape(), d));
        }
        Op::Reshape(a) => {
            let va = &nodes[*a].value;
            add_to(adj, nodes, *a, with_shape(va.shape(), g.data().to_vec()));
        }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    fn value_ref(&self) -> Ref<'g, Tensor> {
        self.graph.value_ref(self.id)
    }

    pub fn value(&self) -> Tensor {
        self.value_ref().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value_ref().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value_ref().rows()
    }

    pub fn cols(&self) -> usize {
        self.value_ref().cols()
    }

    pub fn item(&self) -> f64 {
        self.value_ref().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.graph.grad(*self)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'g> {
        let rg = self.requires_grad();
        self.graph.push(value, op, rg)
    }

    fn binary(&self, other: Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        let rg = self.graph.needs(&[self.id, other.id]);
        self.graph.push(value, op, rg)
    }

    fn zip_same(&self, other: Var<'g>, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (a, b) = (self.value_ref(), other.value_ref());
        if a.shape() != b.shape() {
            return Err(Error::dim(op, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        let v = self.zip_same(other, "add", |a, b| a + b)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        let v = self.zip_same(other, "sub", |a, b| a - b)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        let v = self.zip_same(other, "mul", |a, b| a * b)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&self, bias: Var<'g>) -> Result<Var<'g>> {
        let v = {
            let (a, b) = (self.value_ref(), bias.value_ref());
            if a.ndim() != 2 || b.len() != a.cols() {
                return Err(Error::dim("add_row", a.shape(), b.shape()));
            }
            let mut data = a.data().to_vec();
            if !b.is_empty() {
                for row in data.chunks_exact_mut(b.len()) {
                    for (x, y) in row.iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
            }
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.binary(bias, v, Op::AddRow(self.id, bias.id)))
    }

    pub fn matmul(&self, other: Var<'g>) -> Result<Var<'g>> {
        let v = self.value_ref().matmul(&other.value_ref())?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    pub fn t(&self) -> Var<'g> {
        let v = self.value_ref().transpose();
        self.unary(v, Op::Transpose(self.id))
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        let v = self.value_ref().map(|x| x * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: f64) -> Var<'g> {
        let v = self.value_ref().map(|x| x + s);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn exp(&self) -> Var<'g> {
        let v = self.value_ref().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn ln(&self) -> Var<'g> {
        let v = self.value_ref().map(f64::ln);
        self.unary(v, Op::Log(self.id))
    }

    pub fn sqrt(&self) -> Var<'g> {
        let v = self.value_ref().map(f64::sqrt);
        self.unary(v, Op::Sqrt(self.id))
    }

    pub fn abs(&self) -> Var<'g> {
        let v = self.value_ref().map(f64::abs);
        self.unary(v, Op::Abs(self.id))
    }

    pub fn relu(&self) -> Var<'g> {
        let v = self.value_ref().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'g> {
        let v = self
            .value_ref()
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()));
        self.unary(v, Op::Gelu(self.id))
    }

    pub fn sum(&self) -> Var<'g> {
        let v = Tensor::scalar(self.value_ref().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'g> {
        let t = self.value_ref();
        let v = Tensor::scalar(if t.is_empty() { 0.0 } else { t.sum() / t.len() as f64 });
        drop(t);
        self.unary(v, Op::Mean(self.id))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&self) -> Result<Var<'g>> {
        let v = softmax_rows(&self.value_ref())?;
        Ok(self.unary(v, Op::Softmax(self.id)))
    }

    /// Row-wise log-softmax (log-sum-exp stabilized).
    pub fn log_softmax(&self) -> Result<Var<'g>> {
        let v = {
            let t = self.value_ref();
            let c = t.cols();
            if c == 0 {
                return Err(Error::Domain("log_softmax over an empty axis".into()));
            }
            let mut out = Vec::with_capacity(t.len());
            for i in 0..t.rows() {
                let r = t.row(i);
                let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + r.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                out.extend(r.iter().map(|x| x - lse));
            }
            Tensor::new(t.shape().to_vec(), out)?
        };
        Ok(self.unary(v, Op::LogSoftmax(self.id)))
    }

    /// Row-wise layer normalization followed by an affine map.
    pub fn layer_norm(&self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Result<Var<'g>> {
        if !(eps >= 0.0) {
            return Err(Error::Domain(format!("layer_norm eps must be >= 0, got {eps}")));
        }
        let (y, xhat, inv_std) = {
            let x = self.value_ref();
            let (gv, bv) = (gamma.value_ref(), beta.value_ref());
            let c = x.cols();
            if gv.len() != c || bv.len() != c {
                return Err(Error::dim("layer_norm", x.shape(), gv.shape()));
            }
            if bv.len() != gv.len() {
                return Err(Error::dim("layer_norm", gv.shape(), bv.shape()));
            }
            let mut xhat = Vec::with_capacity(x.len());
            let mut y = Vec::with_capacity(x.len());
            let mut inv = Vec::with_capacity(x.rows());
            for i in 0..x.rows() {
                let r = x.row(i);
                let n = c as f64;
                let mu = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                let is = 1.0 / (var + eps).sqrt();
                inv.push(is);
                for j in 0..c {
                    let h = (r[j] - mu) * is;
                    xhat.push(h);
                    y.push(h * gv.data()[j] + bv.data()[j]);
                }
            }
            let shape = x.shape().to_vec();
            (
                Tensor::new(shape.clone(), y)?,
                Tensor::new(shape, xhat)?,
                inv,
            )
        };
        let rg = self.graph.needs(&[self.id, gamma.id, beta.id]);
        Ok(self.graph.push(
            y,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Scales every row to unit Euclidean norm; zero rows are rejected.
    pub fn normalize_rows(&self) -> Result<Var<'g>> {
        let (v, norms) = {
            let t = self.value_ref();
            let c = t.cols();
            let mut out = Vec::with_capacity(t.len());
            let mut norms = Vec::with_capacity(t.rows());
            for i in 0..t.rows() {
                let r = t.row(i);
                let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                if !(n > 0.0) || !n.is_finite() {
                    return Err(Error::Numeric(format!("row {i} has norm {n}; cannot normalize")));
                }
                norms.push(n);
                out.extend(r.iter().map(|x| x / n));
            }
            debug_assert_eq!(out.len(), t.rows() * c);
            (Tensor::new(t.shape().to_vec(), out)?, norms)
        };
        Ok(self.unary(v, Op::NormalizeRows { x: self.id, norms }))
    }

    /// B×D rows to the B×B matrix of squared Euclidean distances.
    pub fn pairwise_sq_dist(&self) -> Var<'g> {
        let v = {
            let t = self.value_ref();
            let b = t.rows();
            let mut out = vec![0.0; b * b];
            for i in 0..b {
                for j in 0..b {
                    if i != j {
                        out[i * b + j] = t
                            .row(i)
                            .iter()
                            .zip(t.row(j))
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum();
                    }
                }
            }
            Tensor::new(vec![b, b], out).expect("square")
        };
        self.unary(v, Op::PairwiseSqDist(self.id))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'g>> {
        let v = {
            let t = self.value_ref();
            if t.ndim() != 2 || start > end || end > t.rows() {
                return Err(Error::Index {
                    what: "slice_rows",
                    index: end,
                    len: t.rows(),
                });
            }
            let c = t.cols();
            Tensor::new(vec![end - start, c], t.data()[start * c..end * c].to_vec())?
        };
        Ok(self.unary(v, Op::SliceRows(self.id, start)))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'g>> {
        let v = {
            let t = self.value_ref();
            if t.ndim() != 2 || start > end || end > t.cols() {
                return Err(Error::Index {
                    what: "slice_cols",
                    index: end,
                    len: t.cols(),
                });
            }
            let mut d = Vec::with_capacity(t.rows() * (end - start));
            for i in 0..t.rows() {
                d.extend_from_slice(&t.row(i)[start..end]);
            }
            Tensor::new(vec![t.rows(), end - start], d)?
        };
        Ok(self.unary(v, Op::SliceCols(self.id, start)))
    }

    /// Gathers flat elements into a vector.
    pub fn pick(&self, flat: &[usize]) -> Result<Var<'g>> {
        let v = {
            let t = self.value_ref();
            let mut d = Vec::with_capacity(flat.len());
            for &i in flat {
                if i >= t.len() {
                    return Err(Error::Index {
                        what: "pick",
                        index: i,
                        len: t.len(),
                    });
                }
                d.push(t.data()[i]);
            }
            Tensor::vector(d)
        };
        Ok(self.unary(v, Op::Pick(self.id, flat.to_vec())))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'g>> {
        let v = self.value_ref().clone().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }
}

pub(crate) fn softmax_rows(t: &Tensor) -> Result<Tensor> {
    let c = t.cols();
    if c == 0 {
        return Err(Error::Domain("softmax over an empty axis".into()));
    }
    let mut out = Vec::with_capacity(t.len());
    for i in 0..t.rows() {
        let r = t.row(i);
        let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|x| x / s));
    }
    Tensor::new(t.shape().to_vec(), out)
}
