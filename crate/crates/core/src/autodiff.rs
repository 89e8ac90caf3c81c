//! Tape-based reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation in evaluation order. Calling
//! [`Tape::backward`] walks the record in reverse and accumulates adjoints.
//! Nodes that do not depend on any parameter are never visited.

use std::rc::Rc;

use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

pub type LinearFn = Rc<dyn Fn(&Mat) -> Mat>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Silu(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, index: Rc<Vec<usize>> },
    Gather { x: Var, index: Rc<Vec<usize>> },
    Linear { x: Var, adjoint: LinearFn },
    MseConst { x: Var, target: Rc<Mat> },
    Sum(Var),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape());
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p - q).collect();
        let v = Mat::from_vec(x.rows, x.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    /// Adds the `1 × cols` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let row = self.value(r);
        assert_eq!(row.rows, 1);
        assert_eq!(row.cols, self.value(a).cols);
        let mut v = self.value(a).clone();
        let cols = v.cols;
        for chunk in v.data.chunks_mut(cols) {
            for (o, b) in chunk.iter_mut().zip(&row.data) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(r);
        self.push(v, Op::AddRow(a, r), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape());
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let v = Mat::from_vec(x.rows, x.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scaled(s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    /// Multiplies `a` by the `1 × 1` value `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).shape(), (1, 1));
        let v = self.value(a).scaled(self.value(s).data[0]);
        let ng = self.ng(a) || self.ng(s);
        self.push(v, Op::ScaleBy(a, s), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(v, Op::Silu(a), ng)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine terms).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        const EPS: f64 = 1e-5;
        let x = self.value(a);
        let mut out = Mat::zeros(x.rows, x.cols);
        let mut inv_std = Vec::with_capacity(x.rows);
        let n = x.cols as f64;
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + EPS).sqrt();
            for (o, v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm { x: a, inv_std }, ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let row = x.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = out.row_mut(r);
            let mut total = 0.0;
            for (oi, v) in o.iter_mut().zip(row) {
                *oi = (v - max).exp();
                total += *oi;
            }
            o.iter_mut().for_each(|v| *v /= total);
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols);
        let mut out = Mat::zeros(x.rows, len);
        for r in 0..x.rows {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols { x: a, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let m = self.value(*p);
                assert_eq!(m.rows, rows);
                out.row_mut(r)[off..off + m.cols].copy_from_slice(m.row(r));
                off += m.cols;
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Output row `i` is row `index[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Rc<Vec<usize>>) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros(index.len(), x.cols);
        for (i, &src) in index.iter().enumerate() {
            out.row_mut(i).copy_from_slice(x.row(src));
        }
        let ng = self.ng(a);
        self.push(out, Op::GatherRows { x: a, index }, ng)
    }

    /// Flat gather into a `rows × cols` result: `out.data[i] = a.data[index[i]]`.
    pub fn gather(&mut self, a: Var, index: Rc<Vec<usize>>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols);
        let x = self.value(a);
        let data = index.iter().map(|&i| x.data[i]).collect();
        let ng = self.ng(a);
        self.push(Mat::from_vec(rows, cols, data), Op::Gather { x: a, index }, ng)
    }

    /// Applies a linear map; `adjoint` must be its transpose.
    pub fn linear(&mut self, a: Var, forward: impl Fn(&Mat) -> Mat, adjoint: LinearFn) -> Var {
        let v = forward(self.value(a));
        let ng = self.ng(a);
        self.push(v, Op::Linear { x: a, adjoint }, ng)
    }

    /// Mean squared difference to a constant target, as a `1 × 1` value.
    pub fn mse_const(&mut self, a: Var, target: Rc<Mat>) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), target.shape(), "mse_const shapes");
        let n = x.len() as f64;
        let s = x.data.iter().zip(&target.data).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / n;
        let ng = self.ng(a);
        self.push(Mat::scalar(s), Op::MseConst { x: a, target }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Mat::scalar(s), Op::Sum(a), ng)
    }

    /// Reverse sweep from the `1 × 1` node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward expects a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, d: Mat| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.matmul_t(self.value(*b)));
                }
                if self.ng(*b) {
                    acc(*b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.matmul(self.value(*b)));
                }
                if self.ng(*b) {
                    acc(*b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scaled(-1.0));
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                if self.ng(*r) {
                    acc(*r, g.column_sums());
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = g.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
                    acc(*a, Mat::from_vec(g.rows, g.cols, d));
                }
                if self.ng(*b) {
                    let d = g.data.iter().zip(&x.data).map(|(p, q)| p * q).collect();
                    acc(*b, Mat::from_vec(g.rows, g.cols, d));
                }
            }
            Op::Scale(a, s) => acc(*a, g.scaled(*s)),
            Op::ScaleBy(a, s) => {
                let sv = self.value(*s).data[0];
                if self.ng(*a) {
                    acc(*a, g.scaled(sv));
                }
                if self.ng(*s) {
                    let x = self.value(*a);
                    let d: f64 = g.data.iter().zip(&x.data).map(|(p, q)| p * q).sum();
                    acc(*s, Mat::scalar(d));
                }
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let d = g
                    .data
                    .iter()
                    .zip(&x.data)
                    .map(|(gi, &xi)| {
                        let s = sigmoid(xi);
                        gi * s * (1.0 + xi * (1.0 - s))
                    })
                    .collect();
                acc(*a, Mat::from_vec(g.rows, g.cols, d));
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let n = y.cols as f64;
                let mut d = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                    for ((o, gi), yi) in d.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = inv_std[r] * (gi - mean_g - yi * mean_gy);
                    }
                }
                acc(*x, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for ((o, gi), yi) in d.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
                acc(*a, d);
            }
            Op::SliceCols { x, start } => {
                let src = self.value(*x);
                let mut d = Mat::zeros(src.rows, src.cols);
                for r in 0..g.rows {
                    d.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                acc(*x, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let cols = self.value(*p).cols;
                    if self.ng(*p) {
                        let mut d = Mat::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        acc(*p, d);
                    }
                    off += cols;
                }
            }
            Op::GatherRows { x, index } => {
                let src = self.value(*x);
                let mut d = Mat::zeros(src.rows, src.cols);
                for (i, &s) in index.iter().enumerate() {
                    for (o, v) in d.row_mut(s).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                acc(*x, d);
            }
            Op::Gather { x, index } => {
                let src = self.value(*x);
                let mut d = Mat::zeros(src.rows, src.cols);
                for (gv, &s) in g.data.iter().zip(index.iter()) {
                    d.data[s] += gv;
                }
                acc(*x, d);
            }
            Op::Linear { x, adjoint } => acc(*x, adjoint(g)),
            Op::MseConst { x, target } => {
                let xv = self.value(*x);
                let k = 2.0 * g.data[0] / xv.len() as f64;
                let d = xv.data.iter().zip(&target.data).map(|(p, q)| k * (p - q)).collect();
                acc(*x, Mat::from_vec(xv.rows, xv.cols, d));
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                acc(*a, Mat::filled(x.rows, x.cols, g.data[0]));
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
