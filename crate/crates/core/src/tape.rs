//! Tape-based reverse-mode differentiation over [`FeatureMatrix`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s during one
//! forward pass. [`Tape::backward`] walks the record in reverse and returns
//! a [`Gradients`] table holding `d loss / d node` for every node reachable
//! from the loss. Nodes the loss does not depend on get zero gradients.
//!
//! The op set is exactly what the MTP stack needs; it is not a general
//! autodiff engine.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::{FeatureMatrix, Scalar};
use crate::ops::{self, Mode};

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Mix(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, T),
    Shift(usize),
    Relu(usize),
    Mask(usize, FeatureMatrix<T>),
    Softmax(usize),
    LayerNorm(usize, Vec<T>),
    MeanRows(usize),
    SelectRows(usize, Vec<usize>),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(usize, usize),
    Sum(usize),
    LogisticLoss(usize, FeatureMatrix<T>),
}

struct Node<T> {
    value: Rc<FeatureMatrix<T>>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node on a [`Tape`].
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input or parameter.
    pub fn leaf(&self, value: FeatureMatrix<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf)
    }

    fn push(&self, value: FeatureMatrix<T>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<FeatureMatrix<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Smallest `|x|` fed to any ReLU on the tape, or `None` if there is no
    /// ReLU. Finite differences with a step above this may cross the kink.
    pub fn relu_margin(&self) -> Option<f64> {
        let nodes = self.nodes.borrow();
        nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(&nodes[a].value),
                _ => None,
            })
            .flat_map(|v| v.data().iter().map(|x| x.as_f64().abs()))
            .reduce(f64::min)
    }

    /// Propagates `d loss / d node` backward from a 1×1 `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape();
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        let mut grads: Vec<Option<FeatureMatrix<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(FeatureMatrix::filled(1, 1, T::one()));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: usize| -> &FeatureMatrix<T> { &nodes[i].value };
            let mut acc = |i: usize, contrib: FeatureMatrix<T>| match &mut grads[i] {
                Some(existing) => existing.add_assign(&contrib),
                slot => *slot = Some(contrib),
            };
            match &node.op {
                Op::Leaf => {}
                &Op::MatMul(a, b) | &Op::Mix(a, b) => {
                    acc(a, ops::matmul(&g, &val(b).transpose())?);
                    acc(b, ops::matmul(&val(a).transpose(), &g)?);
                }
                &Op::Transpose(a) => acc(a, g.transpose()),
                &Op::Add(a, b) => {
                    acc(a, g.clone());
                    acc(b, g.clone());
                }
                &Op::Sub(a, b) => {
                    acc(a, g.clone());
                    acc(b, g.map(|v| -v));
                }
                &Op::Mul(a, b) => {
                    acc(a, g.zip_map(val(b), |x, y| x * y));
                    acc(b, g.zip_map(val(a), |x, y| x * y));
                }
                &Op::AddRow(x, r) => {
                    acc(r, column_sums(&g));
                    acc(x, g.clone());
                }
                &Op::MulRow(x, r) => {
                    acc(r, column_sums(&g.zip_map(val(x), |a, b| a * b)));
                    acc(x, ops::mul_row(&g, val(r))?);
                }
                &Op::Scale(a, s) => acc(a, g.map(|v| v * s)),
                &Op::Shift(a) => acc(a, g.clone()),
                &Op::Relu(a) => {
                    acc(a, g.zip_map(val(a), |gv, x| if x > T::zero() { gv } else { T::zero() }))
                }
                Op::Mask(a, mask) => acc(*a, g.zip_map(mask, |gv, m| gv * m)),
                &Op::Softmax(a) => {
                    let y = &node.value;
                    let mut dx = FeatureMatrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let dot = g
                            .row(i)
                            .iter()
                            .zip(y.row(i))
                            .fold(T::zero(), |s, (&gv, &yv)| s + gv * yv);
                        for j in 0..y.cols() {
                            dx.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                        }
                    }
                    acc(a, dx);
                }
                Op::LayerNorm(a, inv_stds) => {
                    let y = &node.value;
                    let n = T::of(y.cols() as f64);
                    let mut dx = FeatureMatrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let (gr, yr) = (g.row(i), y.row(i));
                        let mean_g = gr.iter().fold(T::zero(), |s, &v| s + v) / n;
                        let mean_gy = gr
                            .iter()
                            .zip(yr)
                            .fold(T::zero(), |s, (&gv, &yv)| s + gv * yv)
                            / n;
                        for j in 0..y.cols() {
                            dx.set(i, j, inv_stds[i] * (gr[j] - mean_g - yr[j] * mean_gy));
                        }
                    }
                    acc(*a, dx);
                }
                &Op::MeanRows(a) => {
                    let rows = val(a).rows();
                    let inv = T::one() / T::of(rows as f64);
                    acc(a, FeatureMatrix::from_fn(rows, g.cols(), |_, j| g.get(0, j) * inv));
                }
                Op::SelectRows(a, idx) => {
                    let src = val(*a);
                    let mut dx = FeatureMatrix::zeros(src.rows(), src.cols());
                    for (k, &r) in idx.iter().enumerate() {
                        for (d, &gv) in dx.row_mut(r).iter_mut().zip(g.row(k)) {
                            *d = *d + gv;
                        }
                    }
                    acc(*a, dx);
                }
                &Op::SliceCols(a, start) => {
                    let src = val(a);
                    let mut dx = FeatureMatrix::zeros(src.rows(), src.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            dx.set(i, start + j, g.get(i, j));
                        }
                    }
                    acc(a, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        acc(p, g.slice_cols(start, w));
                        start += w;
                    }
                }
                &Op::ConcatRows(a, b) => {
                    let ra = val(a).rows();
                    let rb = val(b).rows();
                    acc(a, g.select_rows(&(0..ra).collect::<Vec<_>>()));
                    acc(b, g.select_rows(&(ra..ra + rb).collect::<Vec<_>>()));
                }
                &Op::Sum(a) => {
                    let (r, c) = val(a).shape();
                    acc(a, FeatureMatrix::filled(r, c, g.get(0, 0)));
                }
                Op::LogisticLoss(z, labels) => {
                    let dz = val(*z).zip_map(labels, |zv, y| ops::sigmoid(zv) - y);
                    acc(*z, dz.zip_map(&g, |a, b| a * b));
                }
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn column_sums<T: Scalar>(g: &FeatureMatrix<T>) -> FeatureMatrix<T> {
    let mut out = FeatureMatrix::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, &v) in out.row_mut(0).iter_mut().zip(g.row(i)) {
            *o = *o + v;
        }
    }
    out
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<FeatureMatrix<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_, T>) -> FeatureMatrix<T> {
        match self.grads.get(var.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes.get(var.id).copied().unwrap_or((0, 0));
                FeatureMatrix::zeros(r, c)
            }
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Rc<FeatureMatrix<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    fn unary(self, value: FeatureMatrix<T>, op: Op<T>) -> Self {
        self.tape.push(value, op)
    }

    pub fn matmul(self, rhs: Self) -> Result<Self> {
        let v = ops::matmul(&self.value(), &rhs.value())?;
        Ok(self.unary(v, Op::MatMul(self.id, rhs.id)))
    }

    /// Set-reduction product, see [`ops::mix`].
    pub fn mix(self, values: Self) -> Result<Self> {
        let v = ops::mix(&self.value(), &values.value())?;
        Ok(self.unary(v, Op::Mix(self.id, values.id)))
    }

    pub fn transpose(self) -> Self {
        let v = self.value().transpose();
        self.unary(v, Op::Transpose(self.id))
    }

    fn same_shape(self, rhs: Self, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), rhs.shape());
        if a != b {
            return Err(Error::shape(op, a, b));
        }
        Ok(())
    }

    pub fn add(self, rhs: Self) -> Result<Self> {
        self.same_shape(rhs, "add")?;
        let v = self.value().zip_map(&rhs.value(), |a, b| a + b);
        Ok(self.unary(v, Op::Add(self.id, rhs.id)))
    }

    pub fn sub(self, rhs: Self) -> Result<Self> {
        self.same_shape(rhs, "sub")?;
        let v = self.value().zip_map(&rhs.value(), |a, b| a - b);
        Ok(self.unary(v, Op::Sub(self.id, rhs.id)))
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Self) -> Result<Self> {
        self.same_shape(rhs, "mul")?;
        let v = self.value().zip_map(&rhs.value(), |a, b| a * b);
        Ok(self.unary(v, Op::Mul(self.id, rhs.id)))
    }

    /// Adds a 1×c row to every row.
    pub fn add_row(self, row: Self) -> Result<Self> {
        let v = ops::add_row(&self.value(), &row.value())?;
        Ok(self.unary(v, Op::AddRow(self.id, row.id)))
    }

    /// Multiplies every row elementwise by a 1×c row.
    pub fn mul_row(self, row: Self) -> Result<Self> {
        let v = ops::mul_row(&self.value(), &row.value())?;
        Ok(self.unary(v, Op::MulRow(self.id, row.id)))
    }

    pub fn scale(self, s: T) -> Self {
        let v = self.value().map(|x| x * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    /// Adds a constant to every entry.
    pub fn shift(self, c: T) -> Self {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::Shift(self.id))
    }

    pub fn linear(self, weight: Self, bias: Self) -> Result<Self> {
        self.matmul(weight)?.add_row(bias)
    }

    pub fn relu(self) -> Self {
        let v = ops::relu(&self.value());
        self.unary(v, Op::Relu(self.id))
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(self, p: f64, mode: Mode, rng: &mut R) -> Result<Self> {
        ops::check_dropout_p(p)?;
        if mode == Mode::Eval || p == 0.0 {
            return Ok(self);
        }
        let (r, c) = self.shape();
        let mask = ops::dropout_mask(r, c, p, rng)?;
        let v = self.value().zip_map(&mask, |a, m| a * m);
        Ok(self.unary(v, Op::Mask(self.id, mask)))
    }

    pub fn softmax_rows(self) -> Self {
        let v = ops::softmax_rows(&self.value());
        self.unary(v, Op::Softmax(self.id))
    }

    pub fn layer_norm_core(self, eps: T) -> Result<Self> {
        let (v, inv) = ops::layer_norm_with_stats(&self.value(), eps)?;
        Ok(self.unary(v, Op::LayerNorm(self.id, inv)))
    }

    /// Column means as a 1×c row; order-independent.
    pub fn mean_rows(self) -> Result<Self> {
        let v = ops::avg_pool_rows(&self.value())?;
        Ok(self.unary(v, Op::MeanRows(self.id)))
    }

    pub fn select_rows(self, indices: &[usize]) -> Result<Self> {
        let src = self.value();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.rows()) {
            return Err(Error::Contract(format!(
                "row index {bad} out of range for {} rows",
                src.rows()
            )));
        }
        let v = src.select_rows(indices);
        Ok(self.unary(v, Op::SelectRows(self.id, indices.to_vec())))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Self> {
        let src = self.value();
        if start + len > src.cols() {
            return Err(Error::shape("slice_cols", src.shape(), (start, len)));
        }
        let v = src.slice_cols(start, len);
        Ok(self.unary(v, Op::SliceCols(self.id, start)))
    }

    pub fn concat_cols(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or(Error::EmptyInput("concat_cols"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&FeatureMatrix<T>> = values.iter().map(|v| v.as_ref()).collect();
        let v = FeatureMatrix::concat_cols(&refs)?;
        Ok(first.unary(v, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }

    pub fn concat_rows(self, below: Self) -> Result<Self> {
        let v = self.value().concat_rows(&below.value())?;
        Ok(self.unary(v, Op::ConcatRows(self.id, below.id)))
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(self) -> Self {
        let v = FeatureMatrix::filled(1, 1, self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    /// Elementwise logistic loss of logits against constant labels.
    pub fn logistic_loss(self, labels: FeatureMatrix<T>) -> Result<Self> {
        let z = self.value();
        if z.shape() != labels.shape() {
            return Err(Error::shape("logistic_loss", z.shape(), labels.shape()));
        }
        let v = z.zip_map(&labels, ops::logistic_loss);
        Ok(self.unary(v, Op::LogisticLoss(self.id, labels)))
    }
}
