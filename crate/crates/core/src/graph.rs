//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Parameter nodes
//! borrow their values from a [`ModelParams`] store instead of copying them,
//! so building a graph per sample is cheap. [`Graph::backward`] walks the
//! recorded nodes in reverse creation order (which is a topological order)
//! and returns the gradient of a scalar output with respect to every
//! parameter as one flat vector laid out like [`ModelParams::flatten`].

use std::collections::HashMap;
use std::rc::Rc;

use crate::params::ModelParams;
use crate::tensor::{dot, matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use crate::train::loss::{bce_term, bce_term_grad};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(NodeId, NodeId),
    /// a · bᵀ
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// m×n plus a broadcast 1×n row.
    AddRow(NodeId, NodeId),
    /// m×n times a broadcast 1×n row.
    MulRow(NodeId, NodeId),
    /// m×n times a broadcast m×1 column.
    MulCol(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// m×n times a 1×1 node.
    MulScalar(NodeId, NodeId),
    /// scale * x + shift; only the scale matters for the gradient.
    Affine(NodeId, f64),
    Gelu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    /// Identity on the first `skip` columns, sine on the rest.
    SinTail(NodeId, usize),
    /// Row softmax, optionally masked; masked entries have zero output and
    /// therefore receive zero gradient.
    Softmax(NodeId),
    /// Row normalization to zero mean / unit variance; keeps 1/std per row.
    LayerNorm(NodeId, Vec<f64>),
    Gather(NodeId, Rc<Vec<usize>>),
    /// Scatters entries of a 1×K table into an m×n matrix; `None` cells are 0.
    BiasTable(NodeId, Rc<Vec<Option<usize>>>),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    MeanRows(NodeId),
    SumCols(NodeId),
    BroadcastRows(NodeId),
    /// Elementwise product with a constant (dropout keep-mask, pre-scaled).
    ConstMul(NodeId, Rc<Vec<f64>>),
    Bce {
        logits: NodeId,
        labels: Vec<f64>,
        pos_weight: Vec<f64>,
    },
    Sum(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    /// Empty for parameter nodes; their values live in the store.
    value: Tensor,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ModelParams,
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, NodeId>,
}

/// Result of [`Graph::backward`]. Parameter gradients are kept sparse: whole
/// tensors for parameters used directly, single rows for tables that were
/// only read through row lookups.
#[derive(Debug, Clone)]
pub struct Gradients {
    n_scalars: usize,
    /// (flat offset, gradient) of parameters used as whole tensors.
    dense: Vec<(usize, Tensor)>,
    /// (flat offset of the row, gradient) of looked-up table rows.
    rows: Vec<(usize, Vec<f64>)>,
    inputs: HashMap<NodeId, Tensor>,
}

impl Gradients {
    /// Gradient of an input created with [`Graph::input_var`].
    pub fn input(&self, id: NodeId) -> Option<&Tensor> {
        self.inputs.get(&id)
    }

    /// Adds the parameter gradient to `acc` (laid out like
    /// [`ModelParams::flatten`]).
    pub fn accumulate(&self, acc: &mut [f64]) {
        assert_eq!(acc.len(), self.n_scalars, "gradient buffer length");
        for (off, t) in &self.dense {
            for (a, g) in acc[*off..*off + t.len()].iter_mut().zip(&t.data) {
                *a += g;
            }
        }
        for (off, r) in &self.rows {
            for (a, g) in acc[*off..*off + r.len()].iter_mut().zip(r) {
                *a += g;
            }
        }
    }

    /// Dense flat parameter gradient.
    pub fn flat(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_scalars];
        self.accumulate(&mut acc);
        acc
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(256),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match self.nodes[id].op {
            Op::Param(i) => self.params.tensor(i),
            _ => &self.nodes[id].value,
        }
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            rows: value.rows,
            cols: value.cols,
            value,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value, false)
    }

    /// An input whose gradient is reported by [`Gradients::input`].
    pub fn input_var(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value, true)
    }

    /// Node for parameter `name`. Panics when the store lacks it; parameter
    /// sets are always built together with the architecture that reads them.
    pub fn param(&mut self, name: &str) -> NodeId {
        let i = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        if let Some(&id) = self.param_nodes.get(&i) {
            return id;
        }
        let (rows, cols) = self.params.tensor(i).shape();
        self.nodes.push(Node {
            op: Op::Param(i),
            rows,
            cols,
            value: Tensor::zeros(0, 0),
            requires_grad: true,
        });
        let id = self.nodes.len() - 1;
        self.param_nodes.insert(i, id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul {m}x{k} · {k2}x{n}");
        let mut out = Tensor::zeros(m, n);
        matmul_acc(&self.value(a).data, &self.value(b).data, &mut out.data, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Op::MatMul(a, b), out, rg)
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_bt {m}x{k} · ({n}x{k2})ᵀ");
        let mut out = Tensor::zeros(m, n);
        matmul_bt_acc(&self.value(a).data, &self.value(b).data, &mut out.data, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Op::MatMulBt(a, b), out, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(Op::Add(a, b), out, rg)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row shapes");
        let mut out = self.value(a).clone();
        let r = &self.value(row).data;
        for i in 0..m {
            for (o, b) in out.row_mut(i).iter_mut().zip(r) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(Op::AddRow(a, row), out, rg)
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "mul_row shapes");
        let mut out = self.value(a).clone();
        let r = &self.value(row).data;
        for i in 0..m {
            for (o, b) in out.row_mut(i).iter_mut().zip(r) {
                *o *= b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(Op::MulRow(a, row), out, rg)
    }

    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let (m, _) = self.shape(a);
        assert_eq!(self.shape(col), (m, 1), "mul_col shapes");
        let mut out = self.value(a).clone();
        let c = &self.value(col).data;
        for (i, &ci) in c.iter().enumerate() {
            for o in out.row_mut(i) {
                *o *= ci;
            }
        }
        let rg = self.rg(&[a, col]);
        self.push(Op::MulCol(a, col), out, rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let mut out = self.value(a).clone();
        for (o, b) in out.data.iter_mut().zip(&self.value(b).data) {
            *o *= b;
        }
        let rg = self.rg(&[a, b]);
        self.push(Op::Mul(a, b), out, rg)
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.shape(s), (1, 1), "mul_scalar expects 1x1");
        let sv = self.value(s).data[0];
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|v| *v *= sv);
        let rg = self.rg(&[a, s]);
        self.push(Op::MulScalar(a, s), out, rg)
    }

    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> NodeId {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|v| *v = scale * *v + shift);
        let rg = self.rg(&[a]);
        self.push(Op::Affine(a, scale), out, rg)
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|v| *v = f(*v));
        let rg = self.rg(&[a]);
        self.push(op, out, rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Gelu(a), gelu)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn sin_tail(&mut self, a: NodeId, skip: usize) -> NodeId {
        let mut out = self.value(a).clone();
        let cols = out.cols;
        for (j, v) in out.data.iter_mut().enumerate() {
            if j % cols >= skip {
                *v = v.sin();
            }
        }
        let rg = self.rg(&[a]);
        self.push(Op::SinTail(a, skip), out, rg)
    }

    /// Row-wise softmax. With a mask, disallowed entries get exactly zero
    /// weight; every row must allow at least one entry.
    pub fn softmax(&mut self, a: NodeId, mask: Option<Rc<Vec<bool>>>) -> NodeId {
        let x = self.value(a);
        let (m, n) = x.shape();
        if let Some(mk) = &mask {
            assert_eq!(mk.len(), m * n, "softmax mask size");
        }
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let allowed = |j: usize| mask.as_ref().is_none_or(|mk| mk[i * n + j]);
            let row = x.row(i);
            assert!(n == 0 || (0..n).any(allowed), "softmax row {i} fully masked");
            // NaN inputs are skipped here and propagate through exp below
            let mx = (0..n)
                .filter(|&j| allowed(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let orow = out.row_mut(i);
            let mut sum = 0.0;
            for j in 0..n {
                if allowed(j) {
                    let e = (row[j] - mx).exp();
                    orow[j] = e;
                    sum += e;
                }
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let rg = self.rg(&[a]);
        self.push(Op::Softmax(a), out, rg)
    }

    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let (m, n) = x.shape();
        let mut out = Tensor::zeros(m, n);
        let mut rstd = Vec::with_capacity(m);
        for i in 0..m {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in out.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            rstd.push(r);
        }
        let rg = self.rg(&[a]);
        self.push(Op::LayerNorm(a, rstd), out, rg)
    }

    /// Rows of `a` selected by `idx` (embedding lookup).
    pub fn gather(&mut self, a: NodeId, idx: Rc<Vec<usize>>) -> NodeId {
        let x = self.value(a);
        let n = x.cols;
        let mut out = Tensor::zeros(idx.len(), n);
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < x.rows, "gather index {i} out of {} rows", x.rows);
            out.row_mut(r).copy_from_slice(x.row(i));
        }
        let rg = self.rg(&[a]);
        self.push(Op::Gather(a, idx), out, rg)
    }

    pub fn bias_table(&mut self, table: NodeId, idx: Rc<Vec<Option<usize>>>, rows: usize, cols: usize) -> NodeId {
        assert_eq!(self.shape(table).0, 1, "bias table must be a row");
        assert_eq!(idx.len(), rows * cols);
        let t = &self.value(table).data;
        let data = idx.iter().map(|o| o.map_or(0.0, |k| t[k])).collect();
        let rg = self.rg(&[table]);
        self.push(Op::BiasTable(table, idx), Tensor::from_vec(rows, cols, data), rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            assert_eq!(self.shape(p).1, n, "concat_rows column mismatch");
            data.extend_from_slice(&self.value(p).data);
            m += self.shape(p).0;
        }
        let rg = self.rg(parts);
        self.push(Op::ConcatRows(parts.to_vec()), Tensor::from_vec(m, n, data), rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let m = self.shape(parts[0]).0;
        let n: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(m, n);
        let mut c0 = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows, m, "concat_cols row mismatch");
            for i in 0..m {
                out.row_mut(i)[c0..c0 + v.cols].copy_from_slice(v.row(i));
            }
            c0 += v.cols;
        }
        let rg = self.rg(parts);
        self.push(Op::ConcatCols(parts.to_vec()), out, rg)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = self.value(a);
        assert!(start + len <= x.rows, "slice_rows out of range");
        let data = x.data[start * x.cols..(start + len) * x.cols].to_vec();
        let cols = x.cols;
        let rg = self.rg(&[a]);
        self.push(Op::SliceRows(a, start), Tensor::from_vec(len, cols, data), rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = self.value(a);
        assert!(start + len <= x.cols, "slice_cols out of range");
        let mut out = Tensor::zeros(x.rows, len);
        for i in 0..x.rows {
            out.row_mut(i).copy_from_slice(&x.row(i)[start..start + len]);
        }
        let rg = self.rg(&[a]);
        self.push(Op::SliceCols(a, start), out, rg)
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        assert!(x.rows > 0, "mean over zero rows");
        let mut out = Tensor::zeros(1, x.cols);
        for i in 0..x.rows {
            for (o, v) in out.data.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / x.rows as f64;
        out.data.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(&[a]);
        self.push(Op::MeanRows(a), out, rg)
    }

    /// Sum across columns: m×n → m×1.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let data = (0..x.rows).map(|i| x.row(i).iter().sum()).collect();
        let rg = self.rg(&[a]);
        self.push(Op::SumCols(a), Tensor::column(data), rg)
    }

    pub fn broadcast_rows(&mut self, a: NodeId, m: usize) -> NodeId {
        let x = self.value(a);
        assert_eq!(x.rows, 1, "broadcast_rows expects a row");
        let mut data = Vec::with_capacity(m * x.cols);
        for _ in 0..m {
            data.extend_from_slice(&x.data);
        }
        let cols = x.cols;
        let rg = self.rg(&[a]);
        self.push(Op::BroadcastRows(a), Tensor::from_vec(m, cols, data), rg)
    }

    pub fn const_mul(&mut self, a: NodeId, c: Rc<Vec<f64>>) -> NodeId {
        let mut out = self.value(a).clone();
        assert_eq!(out.len(), c.len());
        for (o, k) in out.data.iter_mut().zip(c.iter()) {
            *o *= k;
        }
        let rg = self.rg(&[a]);
        self.push(Op::ConstMul(a, c), out, rg)
    }

    /// Weighted binary cross-entropy on logits, summed over entries.
    pub fn bce(&mut self, logits: NodeId, labels: &[f64], pos_weight: &[f64]) -> NodeId {
        let x = &self.value(logits).data;
        assert_eq!(x.len(), labels.len());
        assert_eq!(x.len(), pos_weight.len());
        let v: f64 = x
            .iter()
            .zip(labels)
            .zip(pos_weight)
            .map(|((&x, &y), &p)| bce_term(x, y, p))
            .sum();
        let rg = self.rg(&[logits]);
        self.push(
            Op::Bce {
                logits,
                labels: labels.to_vec(),
                pos_weight: pos_weight.to_vec(),
            },
            Tensor::from_vec(1, 1, vec![v]),
            rg,
        )
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).data.iter().sum();
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), Tensor::from_vec(1, 1, vec![v]), rg)
    }

    /// Gradients of the scalar node `out` with respect to all parameters and
    /// to inputs created with [`Graph::input_var`].
    pub fn backward(&self, out: NodeId) -> Gradients {
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out] = Some(Tensor::from_vec(1, 1, vec![1.0]));
        let mut dense = Vec::new();
        let mut rows = Vec::new();
        let mut inputs = HashMap::new();

        for id in (0..=out).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {
                    inputs.insert(id, gy);
                }
                Op::Param(i) => dense.push((self.params.offset(*i), gy)),
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = self.shape(*b).1;
                    if let Some(ga) = self.grad_buf(&mut grads, *a) {
                        matmul_bt_acc(&gy.data, &self.value(*b).data, &mut ga.data, m, n, k);
                    }
                    if let Some(gb) = self.grad_buf(&mut grads, *b) {
                        matmul_at_acc(&self.value(*a).data, &gy.data, &mut gb.data, m, k, n);
                    }
                }
                Op::MatMulBt(a, b) => {
                    // y = a bᵀ; da = gy b; db = gyᵀ a
                    let (m, k) = self.shape(*a);
                    let n = self.shape(*b).0;
                    if let Some(ga) = self.grad_buf(&mut grads, *a) {
                        matmul_acc(&gy.data, &self.value(*b).data, &mut ga.data, m, n, k);
                    }
                    if let Some(gb) = self.grad_buf(&mut grads, *b) {
                        matmul_at_acc(&gy.data, &self.value(*a).data, &mut gb.data, m, n, k);
                    }
                }
                Op::Add(a, b) => {
                    for c in [*a, *b] {
                        if let Some(gc) = self.grad_buf(&mut grads, c) {
                            gc.add_assign(&gy);
                        }
                    }
                }
                Op::AddRow(a, r) => {
                    if let Some(ga) = self.grad_buf(&mut grads, *a) {
                        ga.add_assign(&gy);
                    }
                    if let Some(gr) = self.grad_buf(&mut grads, *r) {
                        for i in 0..gy.rows {
                            for (o, g) in gr.data.iter_mut().zip(gy.row(i)) {
                                *o += g;
                            }
                        }
                    }
                }
                Op::MulRow(a, r) => {
                    let rv = &self.value(*r).data;
                    if let Some(ga) = self.grad_buf(&mut grads, *a) {
                        for i in 0..gy.rows {
                            for ((o, g), w) in ga.row_mut(i).iter_mut().zip(gy.row(i)).zip(rv) {
                                *o += g * w;
                            }
                        }
                    }
                    let av = self.value(*a);
                    if let Some(gr) = self.grad_buf(&mut grads, *r) {
                        for i in 0..gy.rows {
                            for ((o, g), x) in gr.data.iter_mut().zip(gy.row(i)).zip(av.row(i)) {
                                *o += g * x;
                            }
                        }
                    }
                }
                Op::MulCol(a, c) => {
                    let cv = &self.value(*c).data;
                    if let Some(ga) = self.grad_buf(&mut grads, *a) {
                        for (i, &ci) in cv.iter().enumerate() {
                            for (o, g) in ga.row_mut(i).iter_mut().zip(gy.row(i)) {
                                *o += g * ci;
                            }
                        }
                    }
                    let av = self.value(*a);
                    if let Some(gc) = self.grad_buf(&mut grads, *c) {
                        for i in 0..gy.rows {
                            gc.data[i] += dot(gy.row(i), av.row(i));
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if let Some(ga) = self.grad_buf(&mut grads, *a) {
                        for ((o, g), w) in ga.data.iter_mut().zip(&gy.data).zip(&bv.data) {
                            *o += g * w;
                        }
                    }
                    if let Some(gb) = self.grad_buf(&mut grads, *b) {
                        for ((o, g), w) in gb.data.iter_mut().zip(&gy.data).zip(&av.data) {
                            *o += g * w;
                        }
                    }
                }
                Op::MulScalar(a, s) => {
                    let sv = self.value(*s).data[0];
                    if let Some(ga) = self.grad_buf(&mut grads, *a) {
                        for (o, g) in ga.data.iter_mut().zip(&gy.data) {
                            *o += g * sv;
                        }
                    }
                    let d = dot(&gy.data, &self.value(*a).data);
                    if let Some(gs) = self.grad_buf(&mut grads, *s) {
                        gs.data[0] += d;
                    }
                }
                Op::Affine(a, scale) => {
                    if let Some(ga) = self.grad_buf(&mut grads, *a) {
                        for (o, g) in ga.data.iter_mut().zip(&gy.data) {
                            *o += g * scale;
                        }
                    }
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    if let Some(ga) = self.grad_buf(&mut grads, *a) {
                        for ((o, g), &xv) in ga.data.iter_mut().zip(&gy.data).zip(&x.data) {
                            *o += g * gelu_grad(xv);
                        }
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    if let Some(ga) = self.grad_buf(&mut grads, *a) {
                        for ((o, g), &yv) in ga.data.iter_mut().zip(&gy.data).zip(&y.data) {
                            *o += g * (1.0 - yv * yv);
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    if let Some(ga) = self.grad_buf(&mut grads, *a) {
                        for ((o, g), &yv) in ga.data.iter_mut().zip(&gy.data).zip(&y.data) {
                            *o += g * yv * (1.0 - yv);
                        }
                    }
                }
                Op::SinTail(a, skip) => {
                    let x = self.value(*a);
                    let cols = x.cols;
                    if let Some(ga) = self.grad_buf(&mut grads, *a) {
                        for (j, ((o, g), &xv)) in ga.data.iter_mut().zip(&gy.data).zip(&x.data).enumerate() {
                            *o += if j % cols >= *skip { g * xv.cos() } else { *g };
                        }
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    if let Some(ga) = self.grad_buf(&mut grads, *a) {
                        for i in 0..y.rows {
                            let (yr, gr) = (y.row(i), gy.row(i));
                            let s = dot(yr, gr);
                            for ((o, &yv), &g) in ga.row_mut(i).iter_mut().zip(yr).zip(gr) {
                                *o += yv * (g - s);
                            }
                        }
                    }
                }
                Op::LayerNorm(a, rstd) => {
                    let y = &node.value;
                    let n = y.cols as f64;
                    if let Some(ga) = self.grad_buf(&mut grads, *a) {
                        for (i, &r) in rstd.iter().enumerate() {
                            let (yr, gr) = (y.row(i), gy.row(i));
                            let mg = gr.iter().sum::<f64>() / n;
                            let mgy = dot(yr, gr) / n;
                            for ((o, &yv), &g) in ga.row_mut(i).iter_mut().zip(yr).zip(gr) {
                                *o += r * (g - mg - yv * mgy);
                            }
                        }
                    }
                }
                Op::Gather(a, idx) => {
                    if let Op::Param(pi) = self.nodes[*a].op {
                        // lookups into a parameter table stay row-sparse
                        let off = self.params.offset(pi);
                        let cols = gy.cols;
                        for (r, &i) in idx.iter().enumerate() {
                            rows.push((off + i * cols, gy.row(r).to_vec()));
                        }
                    } else if let Some(ga) = self.grad_buf(&mut grads, *a) {
                        for (r, &i) in idx.iter().enumerate() {
                            for (o, g) in ga.row_mut(i).iter_mut().zip(gy.row(r)) {
                                *o += g;
                            }
                        }
                    }
                }
                Op::BiasTable(t, idx) => {
                    if let Some(gt) = self.grad_buf(&mut grads, *t) {
                        for (k, g) in idx.iter().zip(&gy.data) {
                            if let Some(k) = k {
                                gt.data[*k] += g;
                            }
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.nodes[p].rows * self.nodes[p].cols;
                        if let Some(gp) = self.grad_buf(&mut grads, p) {
                            for (o, g) in gp.data.iter_mut().zip(&gy.data[off..off + len]) {
                                *o += g;
                            }
                        }
                        off += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let w = self.nodes[p].cols;
                        if let Some(gp) = self.grad_buf(&mut grads, p) {
                            for i in 0..gy.rows {
                                for (o, g) in gp.row_mut(i).iter_mut().zip(&gy.row(i)[c0..c0 + w]) {
                                    *o += g;
                                }
                            }
                        }
                        c0 += w;
                    }
                }
                Op::SliceRows(a, start) => {
                    let cols = gy.cols;
                    if let Some(ga) = self.grad_buf(&mut grads, *a) {
                        let dst = &mut ga.data[start * cols..start * cols + gy.len()];
                        for (o, g) in dst.iter_mut().zip(&gy.data) {
                            *o += g;
                        }
                    }
                }
                Op::SliceCols(a, start) => {
                    if let Some(ga) = self.grad_buf(&mut grads, *a) {
                        for i in 0..gy.rows {
                            let dst = &mut ga.row_mut(i)[*start..start + gy.cols];
                            for (o, g) in dst.iter_mut().zip(gy.row(i)) {
                                *o += g;
                            }
                        }
                    }
                }
                Op::MeanRows(a) => {
                    let m = self.nodes[*a].rows;
                    let inv = 1.0 / m as f64;
                    if let Some(ga) = self.grad_buf(&mut grads, *a) {
                        for i in 0..m {
                            for (o, g) in ga.row_mut(i).iter_mut().zip(&gy.data) {
                                *o += g * inv;
                            }
                        }
                    }
                }
                Op::SumCols(a) => {
                    if let Some(ga) = self.grad_buf(&mut grads, *a) {
                        for (i, &g) in gy.data.iter().enumerate() {
                            ga.row_mut(i).iter_mut().for_each(|o| *o += g);
                        }
                    }
                }
                Op::BroadcastRows(a) => {
                    if let Some(ga) = self.grad_buf(&mut grads, *a) {
                        for i in 0..gy.rows {
                            for (o, g) in ga.data.iter_mut().zip(gy.row(i)) {
                                *o += g;
                            }
                        }
                    }
                }
                Op::ConstMul(a, c) => {
                    if let Some(ga) = self.grad_buf(&mut grads, *a) {
                        for ((o, g), k) in ga.data.iter_mut().zip(&gy.data).zip(c.iter()) {
                            *o += g * k;
                        }
                    }
                }
                Op::Bce {
                    logits,
                    labels,
                    pos_weight,
                } => {
                    let g0 = gy.data[0];
                    let x = &self.value(*logits).data.clone();
                    if let Some(gl) = self.grad_buf(&mut grads, *logits) {
                        for (k, o) in gl.data.iter_mut().enumerate() {
                            *o += g0 * bce_term_grad(x[k], labels[k], pos_weight[k]);
                        }
                    }
                }
                Op::Sum(a) => {
                    let g0 = gy.data[0];
                    if let Some(ga) = self.grad_buf(&mut grads, *a) {
                        ga.data.iter_mut().for_each(|o| *o += g0);
                    }
                }
            }
        }
        Gradients {
            n_scalars: self.params.n_scalars(),
            dense,
            rows,
            inputs,
        }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Tensor>], id: NodeId) -> Option<&'g mut Tensor> {
        let node = &self.nodes[id];
        if !node.requires_grad {
            return None;
        }
        Some(grads[id].get_or_insert_with(|| Tensor::zeros(node.rows, node.cols)))
    }
}

/// Tanh approximation of the Gaussian error linear unit.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
