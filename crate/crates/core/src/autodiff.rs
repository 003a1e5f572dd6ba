//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value plus whatever it
//! needs for the backward pass. Node ids are assigned in creation order, so
//! walking ids downwards from the loss is a valid reverse topological order.
//! Nodes that do not depend on any tracked leaf are recorded as constants and
//! skipped entirely during backward.
//!
//! Leaf gradients accumulate (`+=`) across calls to [`Tape::backward`];
//! call [`Tape::zero_grad`] between independent passes.

use std::cell::{Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{matmul_acc, matmul_tn_acc, transpose_raw, Tensor};

/// Stabilizer inside the RMS of [`Var::rmsnorm`].
pub const RMS_EPS: f64 = 1e-6;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MulRow(usize, usize),
    ScaleRows(usize, usize),
    Softmax(usize),
    RmsNorm {
        x: usize,
        gain: usize,
        inv_rms: Vec<f64>,
    },
    Gelu(usize),
    Silu(usize),
    MeanRows(usize),
    Sum(usize),
    Mean(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
    },
    GatherRows {
        x: usize,
        indices: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of a forward computation.
///
/// A tape is single-threaded; run independent tapes for parallel work.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tracked input: receives a gradient on backward.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Untracked input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Constant, false)
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op, parents: &[usize]) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Constant };
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let grads = self.leaf_grads.borrow();
        let g = grads.get(var.id)?.as_ref()?;
        Some(Tensor::new(var.shape().as_slice(), g.clone()).expect("grad shape"))
    }

    /// Gradient of a leaf, or zeros of the leaf's shape when nothing reached it.
    pub fn grad_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.grad(var)
            .unwrap_or_else(|| Tensor::zeros(var.shape().as_slice()))
    }

    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    /// Row-wise concatenation; all parts must share the column count.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of nothing".into()));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].id].value.cols();
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let v = &nodes[p.id].value;
                if v.cols() != cols {
                    return Err(Error::shape("concat_rows", format!("{} vs {cols} columns", v.cols())));
                }
                rows += v.rows();
                data.extend_from_slice(v.data());
            }
            Tensor::new(&[rows, cols], data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.push("concat_rows", value, Op::ConcatRows(ids.clone()), &ids)
    }

    /// Column-wise concatenation; all parts must share the row count.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of nothing".into()));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].id].value.rows();
            let widths: Vec<usize> = parts.iter().map(|p| nodes[p.id].value.cols()).collect();
            let total: usize = widths.iter().sum();
            let mut data = vec![0.0; rows * total];
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let v = &nodes[p.id].value;
                if v.rows() != rows {
                    return Err(Error::shape("concat_cols", format!("{} vs {rows} rows", v.rows())));
                }
                for i in 0..rows {
                    data[i * total + off..i * total + off + w].copy_from_slice(v.row_slice(i));
                }
                off += w;
            }
            Tensor::new(&[rows, total], data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.push("concat_cols", value, Op::ConcatCols(ids.clone()), &ids)
    }

    /// Reverse pass from a scalar loss, accumulating into leaf gradients.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![1.0]);
        let mut leaf_grads = self.leaf_grads.borrow_mut();
        if leaf_grads.len() < nodes.len() {
            leaf_grads.resize_with(nodes.len(), || None);
        }

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut acc = Acc {
                nodes: &nodes,
                grads: &mut grads,
            };
            match &node.op {
                Op::Leaf => {
                    let slot = leaf_grads[id].get_or_insert_with(|| vec![0.0; g.len()]);
                    add_into(slot, &g);
                }
                Op::Constant => {}
                &Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[a].value, &nodes[b].value);
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if let Some(da) = acc.slot(a) {
                        let bt = transpose_raw(bv.data(), k, n);
                        matmul_acc(&g, &bt, da, m, n, k);
                    }
                    if let Some(db) = acc.slot(b) {
                        matmul_tn_acc(av.data(), &g, db, m, k, n);
                    }
                }
                &Op::MatMulBt(a, b) => {
                    let (av, bv) = (&nodes[a].value, &nodes[b].value);
                    let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                    if let Some(da) = acc.slot(a) {
                        matmul_acc(&g, bv.data(), da, m, n, k);
                    }
                    if let Some(db) = acc.slot(b) {
                        matmul_tn_acc(&g, av.data(), db, m, n, k);
                    }
                }
                &Op::Transpose(a) => {
                    let av = &nodes[a].value;
                    let (m, n) = (av.rows(), av.cols());
                    if let Some(da) = acc.slot(a) {
                        add_into(da, &transpose_raw(&g, n, m));
                    }
                }
                &Op::Add(a, b) => {
                    if let Some(da) = acc.slot(a) {
                        add_into(da, &g);
                    }
                    if let Some(db) = acc.slot(b) {
                        add_into(db, &g);
                    }
                }
                &Op::Sub(a, b) => {
                    if let Some(da) = acc.slot(a) {
                        add_into(da, &g);
                    }
                    if let Some(db) = acc.slot(b) {
                        db.iter_mut().zip(&g).for_each(|(d, gv)| *d -= gv);
                    }
                }
                &Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a].value, &nodes[b].value);
                    if let Some(da) = acc.slot(a) {
                        for ((d, gv), bx) in da.iter_mut().zip(&g).zip(bv.data()) {
                            *d += gv * bx;
                        }
                    }
                    if let Some(db) = acc.slot(b) {
                        for ((d, gv), ax) in db.iter_mut().zip(&g).zip(av.data()) {
                            *d += gv * ax;
                        }
                    }
                }
                &Op::Scale(a, s) => {
                    if let Some(da) = acc.slot(a) {
                        da.iter_mut().zip(&g).for_each(|(d, gv)| *d += s * gv);
                    }
                }
                &Op::AddRow(x, r) => {
                    let n = nodes[x].value.cols();
                    if let Some(dx) = acc.slot(x) {
                        add_into(dx, &g);
                    }
                    if let Some(dr) = acc.slot(r) {
                        for grow in g.chunks(n) {
                            add_into(dr, grow);
                        }
                    }
                }
                &Op::MulRow(x, r) => {
                    let (xv, rv) = (&nodes[x].value, &nodes[r].value);
                    let n = xv.cols();
                    if let Some(dx) = acc.slot(x) {
                        for (drow, grow) in dx.chunks_mut(n).zip(g.chunks(n)) {
                            for ((d, gv), rj) in drow.iter_mut().zip(grow).zip(rv.data()) {
                                *d += gv * rj;
                            }
                        }
                    }
                    if let Some(dr) = acc.slot(r) {
                        for (xrow, grow) in xv.data().chunks(n).zip(g.chunks(n)) {
                            for ((d, gv), xj) in dr.iter_mut().zip(grow).zip(xrow) {
                                *d += gv * xj;
                            }
                        }
                    }
                }
                &Op::ScaleRows(x, s) => {
                    let (xv, sv) = (&nodes[x].value, &nodes[s].value);
                    let n = xv.cols();
                    if let Some(dx) = acc.slot(x) {
                        for ((drow, grow), si) in dx.chunks_mut(n).zip(g.chunks(n)).zip(sv.data()) {
                            drow.iter_mut().zip(grow).for_each(|(d, gv)| *d += gv * si);
                        }
                    }
                    if let Some(ds) = acc.slot(s) {
                        for ((d, grow), xrow) in ds.iter_mut().zip(g.chunks(n)).zip(xv.data().chunks(n)) {
                            *d += dot(grow, xrow);
                        }
                    }
                }
                &Op::Softmax(x) => {
                    let y = &node.value;
                    let n = y.cols();
                    if let Some(dx) = acc.slot(x) {
                        for ((drow, grow), yrow) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.data().chunks(n)) {
                            let s = dot(grow, yrow);
                            for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d += yv * (gv - s);
                            }
                        }
                    }
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let (xv, gv) = (&nodes[*x].value, &nodes[*gain].value);
                    let n = xv.cols();
                    let gamma = gv.data();
                    if let Some(dx) = acc.slot(*x) {
                        for (((drow, grow), xrow), &r) in dx
                            .chunks_mut(n)
                            .zip(g.chunks(n))
                            .zip(xv.data().chunks(n))
                            .zip(inv_rms)
                        {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += grow[j] * gamma[j] * xrow[j];
                            }
                            let c = r * r * r * s / n as f64;
                            for j in 0..n {
                                drow[j] += r * grow[j] * gamma[j] - c * xrow[j];
                            }
                        }
                    }
                    if let Some(dg) = acc.slot(*gain) {
                        for ((grow, xrow), &r) in g.chunks(n).zip(xv.data().chunks(n)).zip(inv_rms) {
                            for j in 0..n {
                                dg[j] += grow[j] * xrow[j] * r;
                            }
                        }
                    }
                }
                &Op::Gelu(x) => {
                    let xv = &nodes[x].value;
                    if let Some(dx) = acc.slot(x) {
                        for ((d, gv), &v) in dx.iter_mut().zip(&g).zip(xv.data()) {
                            *d += gv * gelu_grad(v);
                        }
                    }
                }
                &Op::Silu(x) => {
                    let xv = &nodes[x].value;
                    if let Some(dx) = acc.slot(x) {
                        for ((d, gv), &v) in dx.iter_mut().zip(&g).zip(xv.data()) {
                            let s = sigmoid(v);
                            *d += gv * (s + v * s * (1.0 - s));
                        }
                    }
                }
                &Op::MeanRows(x) => {
                    let xv = &nodes[x].value;
                    let (m, n) = (xv.rows(), xv.cols());
                    if let Some(dx) = acc.slot(x) {
                        let inv = 1.0 / m as f64;
                        for drow in dx.chunks_mut(n) {
                            drow.iter_mut().zip(&g).for_each(|(d, gv)| *d += gv * inv);
                        }
                    }
                }
                &Op::Sum(x) => {
                    if let Some(dx) = acc.slot(x) {
                        dx.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                &Op::Mean(x) => {
                    if let Some(dx) = acc.slot(x) {
                        let s = g[0] / dx.len() as f64;
                        dx.iter_mut().for_each(|d| *d += s);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = nodes[p].value.len();
                        if let Some(dp) = acc.slot(p) {
                            add_into(dp, &g[off..off + len]);
                        }
                        off += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let mut off = 0;
                    for &p in parts {
                        let w = nodes[p].value.cols();
                        if let Some(dp) = acc.slot(p) {
                            for (drow, grow) in dp.chunks_mut(w).zip(g.chunks(total)) {
                                add_into(drow, &grow[off..off + w]);
                            }
                        }
                        off += w;
                    }
                }
                &Op::SliceCols { x, start } => {
                    let total = nodes[x].value.cols();
                    let w = node.value.cols();
                    if let Some(dx) = acc.slot(x) {
                        for (drow, grow) in dx.chunks_mut(total).zip(g.chunks(w)) {
                            add_into(&mut drow[start..start + w], grow);
                        }
                    }
                }
                Op::GatherRows { x, indices } => {
                    let n = nodes[*x].value.cols();
                    if let Some(dx) = acc.slot(*x) {
                        for (&i, grow) in indices.iter().zip(g.chunks(n)) {
                            add_into(&mut dx[i * n..(i + 1) * n], grow);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

struct Acc<'a> {
    nodes: &'a [Node],
    grads: &'a mut Vec<Option<Vec<f64>>>,
}

impl Acc<'_> {
    /// Gradient buffer of `id`, or `None` when `id` is untracked.
    fn slot(&mut self, id: usize) -> Option<&mut Vec<f64>> {
        let node = &self.nodes[id];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.grads[id].get_or_insert_with(|| vec![0.0; len]))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Row-wise softmax of a raw buffer. Columns where `key_mask` is false get
/// exactly zero weight.
fn softmax_raw(x: &Tensor, key_mask: Option<&[bool]>) -> Result<Tensor> {
    let n = x.cols();
    let mut out = vec![0.0; x.len()];
    for (orow, xrow) in out.chunks_mut(n).zip(x.data().chunks(n)) {
        let live = |j: usize| key_mask.map_or(true, |m| m[j]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in xrow.iter().enumerate() {
            if live(j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::Contract("softmax row with every key masked".into()));
        }
        let mut z = 0.0;
        for (j, (o, &v)) in orow.iter_mut().zip(xrow).enumerate() {
            if live(j) {
                *o = (v - max).exp();
                z += *o;
            }
        }
        let inv = 1.0 / z;
        orow.iter_mut().for_each(|o| *o *= inv);
    }
    Tensor::new(&[x.rows(), n], out)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    /// Borrow of the forward value. Do not hold across op calls.
    pub fn borrow(&self) -> Ref<'t, Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.tape.value(self.id).rows()
    }

    pub fn cols(&self) -> usize {
        self.tape.value(self.id).cols()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value; panics if the node holds more than one element.
    pub fn item(&self) -> f64 {
        let v = self.tape.value(self.id);
        assert_eq!(v.len(), 1, "item() on non-scalar");
        v.data()[0]
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn binary_same_shape(&self, other: &Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_tape(other);
        let (a, b) = (self.borrow(), other.borrow());
        if a.rows() != b.rows() || a.cols() != b.cols() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(&[a.rows(), a.cols()], data)
    }

    /// `self[m×k] · other[k×n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let value = self.borrow().matmul(&other.borrow())?;
        self.tape.push("matmul", value, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    /// `self[m×k] · other[n×k]ᵀ`.
    pub fn matmul_t(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let value = {
            let (a, b) = (self.borrow(), other.borrow());
            let (m, k, n) = (a.rows(), a.cols(), b.rows());
            if b.cols() != k {
                return Err(Error::shape("matmul_t", format!("[{m}x{k}] . [{n}x{}]^T", b.cols())));
            }
            let bt = transpose_raw(b.data(), n, k);
            let mut out = vec![0.0; m * n];
            matmul_acc(a.data(), &bt, &mut out, m, k, n);
            Tensor::new(&[m, n], out)?
        };
        self.tape.push("matmul_t", value, Op::MatMulBt(self.id, other.id), &[self.id, other.id])
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let value = self.borrow().transpose();
        self.tape.push("transpose", value, Op::Transpose(self.id), &[self.id])
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let value = self.binary_same_shape(other, "add", |a, b| a + b)?;
        self.tape.push("add", value, Op::Add(self.id, other.id), &[self.id, other.id])
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let value = self.binary_same_shape(other, "sub", |a, b| a - b)?;
        self.tape.push("sub", value, Op::Sub(self.id, other.id), &[self.id, other.id])
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let value = self.binary_same_shape(other, "mul", |a, b| a * b)?;
        self.tape.push("mul", value, Op::Mul(self.id, other.id), &[self.id, other.id])
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        let value = {
            let a = self.borrow();
            Tensor::new(&[a.rows(), a.cols()], a.data().iter().map(|v| v * s).collect())?
        };
        self.tape.push("scale", value, Op::Scale(self.id, s), &[self.id])
    }

    fn row_broadcast(&self, row: &Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_tape(row);
        let (x, r) = (self.borrow(), row.borrow());
        let n = x.cols();
        if r.len() != n {
            return Err(Error::shape(name, format!("row of {} for {n} columns", r.len())));
        }
        let mut data = x.data().to_vec();
        for drow in data.chunks_mut(n) {
            drow.iter_mut().zip(r.data()).for_each(|(d, &rv)| *d = f(*d, rv));
        }
        Tensor::new(&[x.rows(), n], data)
    }

    /// `self[m×n] + row[1×n]` broadcast over rows.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        let value = self.row_broadcast(row, "add_row", |a, b| a + b)?;
        self.tape.push("add_row", value, Op::AddRow(self.id, row.id), &[self.id, row.id])
    }

    /// `self[m×n] ⊙ row[1×n]` broadcast over rows.
    pub fn mul_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        let value = self.row_broadcast(row, "mul_row", |a, b| a * b)?;
        self.tape.push("mul_row", value, Op::MulRow(self.id, row.id), &[self.id, row.id])
    }

    /// Multiplies row `i` by `scales[i]` (`diag(s)·x`); `scales` has `m` elements.
    pub fn scale_rows(&self, scales: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(scales);
        let value = {
            let (x, s) = (self.borrow(), scales.borrow());
            let (m, n) = (x.rows(), x.cols());
            if s.len() != m {
                return Err(Error::shape("scale_rows", format!("{} scales for {m} rows", s.len())));
            }
            let mut data = x.data().to_vec();
            for (drow, &si) in data.chunks_mut(n).zip(s.data()) {
                drow.iter_mut().for_each(|d| *d *= si);
            }
            Tensor::new(&[m, n], data)?
        };
        self.tape.push("scale_rows", value, Op::ScaleRows(self.id, scales.id), &[self.id, scales.id])
    }

    /// Row-wise softmax, stabilized by subtracting the row max.
    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let value = softmax_raw(&self.borrow(), None)?;
        self.tape.push("softmax_rows", value, Op::Softmax(self.id), &[self.id])
    }

    /// Row-wise softmax over the columns where `key_mask[j]` is true; masked
    /// columns get exactly zero probability and zero gradient.
    pub fn softmax_rows_masked(&self, key_mask: &[bool]) -> Result<Var<'t>> {
        let value = {
            let x = self.borrow();
            if key_mask.len() != x.cols() {
                return Err(Error::shape(
                    "softmax_rows_masked",
                    format!("mask of {} for {} columns", key_mask.len(), x.cols()),
                ));
            }
            softmax_raw(&x, Some(key_mask))?
        };
        self.tape.push("softmax_rows_masked", value, Op::Softmax(self.id), &[self.id])
    }

    /// Per row: `x / sqrt(mean(x²) + RMS_EPS) ⊙ gain`.
    pub fn rmsnorm(&self, gain: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(gain);
        let (value, inv_rms) = {
            let (x, g) = (self.borrow(), gain.borrow());
            let n = x.cols();
            if g.len() != n {
                return Err(Error::shape("rmsnorm", format!("gain of {} for {n} columns", g.len())));
            }
            let mut inv_rms = Vec::with_capacity(x.rows());
            let mut data = vec![0.0; x.len()];
            for (orow, xrow) in data.chunks_mut(n).zip(x.data().chunks(n)) {
                let ms = xrow.iter().map(|v| v * v).sum::<f64>() / n as f64;
                let r = 1.0 / (ms + RMS_EPS).sqrt();
                for ((o, &xv), &gv) in orow.iter_mut().zip(xrow).zip(g.data()) {
                    *o = xv * r * gv;
                }
                inv_rms.push(r);
            }
            (Tensor::new(&[x.rows(), n], data)?, inv_rms)
        };
        self.tape.push(
            "rmsnorm",
            value,
            Op::RmsNorm {
                x: self.id,
                gain: gain.id,
                inv_rms,
            },
            &[self.id, gain.id],
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Result<Var<'t>> {
        let value = self.borrow().map(gelu);
        self.tape.push("gelu", value, Op::Gelu(self.id), &[self.id])
    }

    pub fn silu(&self) -> Result<Var<'t>> {
        let value = self.borrow().map(|v| v * sigmoid(v));
        self.tape.push("silu", value, Op::Silu(self.id), &[self.id])
    }

    /// Mean over rows: `m×n → 1×n`.
    pub fn mean_rows(&self) -> Result<Var<'t>> {
        let value = {
            let x = self.borrow();
            let (m, n) = (x.rows(), x.cols());
            let mut out = vec![0.0; n];
            for row in x.data().chunks(n) {
                add_into(&mut out, row);
            }
            let inv = 1.0 / m as f64;
            out.iter_mut().for_each(|v| *v *= inv);
            Tensor::new(&[1, n], out)?
        };
        self.tape.push("mean_rows", value, Op::MeanRows(self.id), &[self.id])
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let value = Tensor::scalar(self.borrow().sum());
        self.tape.push("sum", value, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let value = {
            let x = self.borrow();
            Tensor::scalar(x.sum() / x.len() as f64)
        };
        self.tape.push("mean", value, Op::Mean(self.id), &[self.id])
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let x = self.borrow();
            let n = x.cols();
            if start + len > n || len == 0 {
                return Err(Error::shape("slice_cols", format!("{start}+{len} of {n}")));
            }
            let mut data = Vec::with_capacity(x.rows() * len);
            for row in x.data().chunks(n) {
                data.extend_from_slice(&row[start..start + len]);
            }
            Tensor::new(&[x.rows(), len], data)?
        };
        self.tape.push("slice_cols", value, Op::SliceCols { x: self.id, start }, &[self.id])
    }

    /// Rows at `indices`, in that order; backward scatter-adds.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var<'t>> {
        let value = {
            let x = self.borrow();
            if let Some(&bad) = indices.iter().find(|&&i| i >= x.rows()) {
                return Err(Error::shape("gather_rows", format!("index {bad} of {} rows", x.rows())));
            }
            if indices.is_empty() {
                return Err(Error::Contract("gather_rows with no indices".into()));
            }
            x.gather_rows(indices)
        };
        self.tape.push(
            "gather_rows",
            value,
            Op::GatherRows {
                x: self.id,
                indices: indices.to_vec(),
            },
            &[self.id],
        )
    }

    /// Forward identity that contributes nothing on backward.
    pub fn stop_gradient(&self) -> Var<'t> {
        let value = self.value();
        self.tape.constant(value)
    }
}

/// Embedding lookup: rows of `table` at `ids`, with a range check.
pub fn embedding_lookup<'t>(table: &Var<'t>, ids: &[usize]) -> Result<Var<'t>> {
    let vocab = table.rows();
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(Error::Input(format!("token id {bad} outside vocabulary of {vocab}")));
    }
    table.gather_rows(ids)
}
