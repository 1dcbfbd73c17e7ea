use std::cell::RefCell;

use super::matrix::{matmul_nt, matmul_tn, Matrix};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
///
/// Handles are only meaningful for the tape that produced them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Tensor {
    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// Second operand may be a single row broadcast over the first.
    Add(usize, usize, bool),
    Sub(usize, usize, bool),
    MulRow(usize, usize, bool),
    Scale(usize, f64),
    ScaleBy(usize, usize),
    ConcatCols(usize, usize),
    ConcatRows(Vec<usize>),
    SelectRows(usize, Vec<usize>),
    Relu(usize),
    RowMean(usize),
    Sum(usize),
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Matrix,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Dynamic computation record for reverse-mode differentiation.
///
/// A tape lives for one forward/backward pass and is confined to one thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`], indexed by tensor handle.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, or `None` when `t` does not
    /// require gradients or is not an ancestor of the loss.
    pub fn get(&self, t: Tensor) -> Option<&Matrix> {
        self.grads.get(t.id).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but yields zeros for unreached tensors.
    pub fn get_or_zeros(&self, t: Tensor) -> Matrix {
        self.get(t).cloned().unwrap_or_else(|| Matrix::zeros(t.rows, t.cols))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, op: Op, requires_grad: bool) -> Tensor {
        let (rows, cols) = value.shape();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Tensor {
            id: nodes.len() - 1,
            rows,
            cols,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Records a trainable leaf.
    pub fn param(&self, value: Matrix) -> Tensor {
        self.push(value, Op::Leaf, true)
    }

    /// Records a constant leaf; no gradient is ever computed for it.
    pub fn constant(&self, value: Matrix) -> Tensor {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, t: Tensor) -> Matrix {
        self.nodes.borrow()[t.id].value.clone()
    }

    pub fn with_value<R>(&self, t: Tensor, f: impl FnOnce(&Matrix) -> R) -> R {
        f(&self.nodes.borrow()[t.id].value)
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes.borrow()[t.id].requires_grad
    }

    /// Copies the value of `t` into a fresh constant leaf, cutting all
    /// gradient paths through it.
    pub fn detach(&self, t: Tensor) -> Tensor {
        let v = self.value(t);
        self.constant(v)
    }

    pub fn matmul(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.id].value.matmul(&nodes[b.id].value)?
        };
        let rg = self.requires(&[a.id, b.id]);
        Ok(self.push(value, Op::MatMul(a.id, b.id), rg))
    }

    fn check_row_broadcast(op: &'static str, a: Tensor, b: Tensor) -> Result<bool> {
        if a.shape() == b.shape() {
            Ok(false)
        } else if b.rows == 1 && b.cols == a.cols {
            Ok(true)
        } else {
            Err(Error::shape(op, a.shape(), b.shape()))
        }
    }

    fn zip_broadcast(&self, a: Tensor, b: Tensor, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let nodes = self.nodes.borrow();
        let av = &nodes[a.id].value;
        let bv = &nodes[b.id].value;
        let mut out = av.clone();
        let cols = a.cols;
        let broadcast = bv.rows() == 1 && a.rows != 1;
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let bj = if broadcast { i % cols } else { i };
            *o = f(*o, bv.data()[bj]);
        }
        out
    }

    /// Elementwise sum; `b` may be a 1xC row broadcast over every row of `a`.
    pub fn add(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let bc = Self::check_row_broadcast("add", a, b)?;
        let value = self.zip_broadcast(a, b, |x, y| x + y);
        let rg = self.requires(&[a.id, b.id]);
        Ok(self.push(value, Op::Add(a.id, b.id, bc), rg))
    }

    /// Elementwise difference with the same broadcasting rule as [`Tape::add`].
    pub fn sub(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let bc = Self::check_row_broadcast("sub", a, b)?;
        let value = self.zip_broadcast(a, b, |x, y| x - y);
        let rg = self.requires(&[a.id, b.id]);
        Ok(self.push(value, Op::Sub(a.id, b.id, bc), rg))
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul_row(&self, a: Tensor, w: Tensor) -> Result<Tensor> {
        let bc = Self::check_row_broadcast("mul_row", a, w)?;
        let value = self.zip_broadcast(a, w, |x, y| x * y);
        let rg = self.requires(&[a.id, w.id]);
        Ok(self.push(value, Op::MulRow(a.id, w.id, bc), rg))
    }

    pub fn scale(&self, a: Tensor, s: f64) -> Tensor {
        let value = self.nodes.borrow()[a.id].value.map(|v| v * s);
        let rg = self.requires(&[a.id]);
        self.push(value, Op::Scale(a.id, s), rg)
    }

    /// Multiplies `a` by the value of a 1x1 tensor `s`.
    pub fn scale_by(&self, a: Tensor, s: Tensor) -> Result<Tensor> {
        if s.shape() != (1, 1) {
            return Err(Error::shape("scale_by", a.shape(), s.shape()));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let sv = nodes[s.id].value.item();
            nodes[a.id].value.map(|v| v * sv)
        };
        let rg = self.requires(&[a.id, s.id]);
        Ok(self.push(value, Op::ScaleBy(a.id, s.id), rg))
    }

    /// Column-wise concatenation `[a || b]`.
    pub fn concat_cols(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if a.rows != b.rows {
            return Err(Error::shape("concat_cols", a.shape(), b.shape()));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.id].value;
            let bv = &nodes[b.id].value;
            let mut data = Vec::with_capacity(a.rows * (a.cols + b.cols));
            for r in 0..a.rows {
                data.extend_from_slice(av.row(r));
                data.extend_from_slice(bv.row(r));
            }
            Matrix::new(a.rows, a.cols + b.cols, data)?
        };
        let rg = self.requires(&[a.id, b.id]);
        Ok(self.push(value, Op::ConcatCols(a.id, b.id), rg))
    }

    /// Stacks tensors with equal column counts vertically.
    pub fn concat_rows(&self, parts: &[Tensor]) -> Result<Tensor> {
        let value = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Matrix> = parts.iter().map(|t| &nodes[t.id].value).collect();
            Matrix::vstack(&refs)?
        };
        let ids: Vec<usize> = parts.iter().map(|t| t.id).collect();
        let rg = self.requires(&ids);
        Ok(self.push(value, Op::ConcatRows(ids), rg))
    }

    pub fn select_rows(&self, a: Tensor, idx: &[usize]) -> Result<Tensor> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= a.rows) {
            return Err(Error::InvalidInput(format!(
                "row index {bad} out of range for {} rows",
                a.rows
            )));
        }
        let value = self.nodes.borrow()[a.id].value.select_rows(idx);
        let rg = self.requires(&[a.id]);
        Ok(self.push(value, Op::SelectRows(a.id, idx.to_vec()), rg))
    }

    pub fn relu(&self, a: Tensor) -> Tensor {
        let value = self.nodes.borrow()[a.id].value.map(|v| v.max(0.0));
        let rg = self.requires(&[a.id]);
        self.push(value, Op::Relu(a.id), rg)
    }

    /// Mean over rows, producing a 1xC tensor.
    pub fn row_mean(&self, a: Tensor) -> Result<Tensor> {
        if a.rows == 0 {
            return Err(Error::InvalidInput("row_mean of an empty tensor".into()));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.id].value;
            let mut out = vec![0.0; a.cols];
            for r in 0..a.rows {
                for (o, v) in out.iter_mut().zip(av.row(r)) {
                    *o += v;
                }
            }
            let n = a.rows as f64;
            out.iter_mut().for_each(|o| *o /= n);
            Matrix::row_vector(out)
        };
        let rg = self.requires(&[a.id]);
        Ok(self.push(value, Op::RowMean(a.id), rg))
    }

    /// Sum of all entries as a 1x1 tensor.
    pub fn sum(&self, a: Tensor) -> Tensor {
        let s: f64 = self.nodes.borrow()[a.id].value.data().iter().sum();
        let rg = self.requires(&[a.id]);
        self.push(Matrix::scalar(s), Op::Sum(a.id), rg)
    }

    /// Mean cross-entropy of row-wise softmax against class indices.
    pub fn softmax_cross_entropy(&self, logits: Tensor, labels: &[usize]) -> Result<Tensor> {
        if labels.len() != logits.rows {
            return Err(Error::InvalidInput(format!(
                "{} labels for {} logit rows",
                labels.len(),
                logits.rows
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: logits.cols,
            });
        }
        let probs = softmax(&self.nodes.borrow()[logits.id].value);
        let n = labels.len().max(1) as f64;
        let loss = {
            let nodes = self.nodes.borrow();
            let lv = &nodes[logits.id].value;
            labels
                .iter()
                .enumerate()
                .map(|(r, &y)| log_sum_exp(lv.row(r)) - lv.get(r, y))
                .sum::<f64>()
                / n
        };
        let rg = self.requires(&[logits.id]);
        Ok(self.push(
            Matrix::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: logits.id,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Tensor) -> Result<Gradients> {
        if loss.shape() != (1, 1) {
            return Err(Error::NotScalar(loss.rows, loss.cols));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Matrix>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Matrix::scalar(1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mut acc = |target: usize, contrib: Matrix| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => existing.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    acc(*a, matmul_nt(&g, &nodes[*b].value));
                    acc(*b, matmul_tn(&nodes[*a].value, &g));
                }
                Op::Add(a, b, bc) => {
                    acc(*b, if *bc { col_sums(&g) } else { g.clone() });
                    acc(*a, g);
                }
                Op::Sub(a, b, bc) => {
                    let neg = g.map(|v| -v);
                    acc(*b, if *bc { col_sums(&neg) } else { neg });
                    acc(*a, g);
                }
                Op::MulRow(a, w, bc) => {
                    let av = &nodes[*a].value;
                    let wv = &nodes[*w].value;
                    let cols = av.cols();
                    let mut ga = g.clone();
                    let mut gw = g.clone();
                    for i in 0..g.data().len() {
                        let wj = if *bc { i % cols } else { i };
                        ga.data_mut()[i] *= wv.data()[wj];
                        gw.data_mut()[i] *= av.data()[i];
                    }
                    acc(*a, ga);
                    acc(*w, if *bc { col_sums(&gw) } else { gw });
                }
                Op::Scale(a, s) => acc(*a, g.map(|v| v * s)),
                Op::ScaleBy(a, s) => {
                    let sv = nodes[*s].value.item();
                    let ds: f64 = g.data().iter().zip(nodes[*a].value.data()).map(|(x, y)| x * y).sum();
                    acc(*s, Matrix::scalar(ds));
                    acc(*a, g.map(|v| v * sv));
                }
                Op::ConcatCols(a, b) => {
                    let ac = nodes[*a].value.cols();
                    let bcn = nodes[*b].value.cols();
                    let mut ga = Vec::with_capacity(g.rows() * ac);
                    let mut gb = Vec::with_capacity(g.rows() * bcn);
                    for r in 0..g.rows() {
                        let row = g.row(r);
                        ga.extend_from_slice(&row[..ac]);
                        gb.extend_from_slice(&row[ac..]);
                    }
                    acc(*a, Matrix::new(g.rows(), ac, ga)?);
                    acc(*b, Matrix::new(g.rows(), bcn, gb)?);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = nodes[p].value.rows();
                        acc(p, g.slice_rows(start, start + n));
                        start += n;
                    }
                }
                Op::SelectRows(a, idx) => {
                    let (rows, cols) = nodes[*a].value.shape();
                    let mut ga = Matrix::zeros(rows, cols);
                    for (k, &i) in idx.iter().enumerate() {
                        for c in 0..cols {
                            let v = ga.get(i, c) + g.get(k, c);
                            ga.set(i, c, v);
                        }
                    }
                    acc(*a, ga);
                }
                Op::Relu(a) => {
                    let av = &nodes[*a].value;
                    let mut ga = g;
                    for (gv, &x) in ga.data_mut().iter_mut().zip(av.data()) {
                        if x <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    acc(*a, ga);
                }
                Op::RowMean(a) => {
                    let rows = nodes[*a].value.rows();
                    let scaled = g.map(|v| v / rows as f64);
                    acc(*a, scaled.broadcast_rows(rows)?);
                }
                Op::Sum(a) => {
                    let (rows, cols) = nodes[*a].value.shape();
                    acc(*a, Matrix::filled(rows, cols, g.item()));
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let upstream = g.item() / labels.len().max(1) as f64;
                    let mut gl = probs.clone();
                    for (r, &y) in labels.iter().enumerate() {
                        let v = gl.get(r, y) - 1.0;
                        gl.set(r, y, v);
                    }
                    acc(*logits, gl.map(|v| v * upstream));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn col_sums(g: &Matrix) -> Matrix {
    let mut out = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    Matrix::row_vector(out)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    let cols = logits.cols();
    for r in 0..logits.rows() {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        softmax_in_place(row);
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_subgradient_is_zero_for_negative_inputs() {
        let tape = Tape::new();
        let x = tape.param(Matrix::row_vector(vec![-1.0, 2.0]));
        let y = tape.sum(tape.relu(x));
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn uniform_logits_give_log_q() {
        let tape = Tape::new();
        let logits = tape.constant(Matrix::zeros(3, 4));
        let loss = tape.softmax_cross_entropy(logits, &[0, 1, 3]).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn wide_margin_drives_loss_to_zero() {
        let tape = Tape::new();
        let logits = tape.constant(Matrix::new(2, 2, vec![50.0, 0.0, 0.0, 50.0]).unwrap());
        let loss = tape.softmax_cross_entropy(logits, &[0, 1]).unwrap();
        assert!(tape.value(loss).item() < 1e-20);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let tape = Tape::new();
        let logits = tape.constant(Matrix::zeros(1, 3));
        assert!(matches!(
            tape.softmax_cross_entropy(logits, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let x = tape.param(Matrix::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(2, 2))));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Matrix::zeros(2, 3));
        let b = tape.constant(Matrix::zeros(2, 3));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("2x3") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.param(Matrix::row_vector(vec![1.0, 2.0]));
        let d = tape.detach(x);
        let y = tape.sum(tape.add(x, d).unwrap());
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);
        assert!(g.get(d).is_none());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let m = Matrix::new(2, 3, vec![1000.0, -5.0, 3.0, 0.1, 0.2, 0.3]).unwrap();
        let p = softmax(&m);
        for r in 0..2 {
            let s: f64 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
