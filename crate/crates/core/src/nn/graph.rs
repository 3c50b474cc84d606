//! Reverse-mode automatic differentiation over [`Mat`] values.

use super::mat::{gemm, Mat};
use super::params::{Grads, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Mat),
    LayerNorm(Var, Vec<f64>),
    Softmax(Var),
    Gelu(Var),
    Silu(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    WeightedRowSum(Var, Vec<f64>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    Clamp(Var, f64, f64),
    L2NormalizeRows(Var, Vec<f64>),
    SoftmaxCrossEntropy(Var, Vec<usize>, Mat),
    Transpose(Var),
}

struct Node {
    op: Op,
    value: Mat,
}

/// Records operations for one forward pass; parameters are read from the
/// borrowed set without copying.
pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(512),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    fn push(&mut self, op: Op, value: Mat) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        match self.nodes[v.0].op {
            Op::Param(i) => self.params.value(i),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data[0]
    }

    pub fn input(&mut self, m: Mat) -> Var {
        self.push(Op::Input, m)
    }

    pub fn param(&mut self, idx: usize) -> Var {
        self.push(Op::Param(idx), Mat::zeros(0, 0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    /// `a * b^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut c = Mat::zeros(av.rows, bv.rows);
        gemm(av, false, bv, true, &mut c, 0.0);
        self.push(Op::MatMulBt(a, b), c)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Mat {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        Mat::from_vec(av.rows, av.cols, av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    fn row_op(&self, a: Var, r: Var, f: impl Fn(f64, f64) -> f64) -> Mat {
        let (av, rv) = (self.value(a), self.value(r));
        assert_eq!((1, av.cols), rv.shape(), "row broadcast shape mismatch");
        let mut out = av.clone();
        for i in 0..out.rows {
            for (x, y) in out.row_mut(i).iter_mut().zip(&rv.data) {
                *x = f(*x, *y);
            }
        }
        out
    }

    /// Adds a `1 x c` row to every row.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let v = self.row_op(a, r, |x, y| x + y);
        self.push(Op::AddRow(a, r), v)
    }

    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        let v = self.row_op(a, r, |x, y| x * y);
        self.push(Op::MulRow(a, r), v)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scaled(s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(Op::AddScalar(a), v)
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, a: Var, c: Mat) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), c.shape(), "mul_const shape mismatch");
        let v = Mat::from_vec(av.rows, av.cols, av.data.iter().zip(&c.data).map(|(x, y)| x * y).collect());
        self.push(Op::MulConst(a, c), v)
    }

    /// Row-wise normalization to zero mean, unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        let mut rstd = Vec::with_capacity(av.rows);
        let n = av.cols as f64;
        for i in 0..av.rows {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let r = 1.0 / (var + LN_EPS).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * r);
            rstd.push(r);
        }
        self.push(Op::LayerNorm(a, rstd), out)
    }

    /// Row softmax; columns with `mask[j] == false` get exactly zero weight.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for i in 0..out.rows {
            let row = out.row_mut(i);
            let keep = |j: usize| mask.map(|m| m[j]).unwrap_or(true);
            let mx = row
                .iter()
                .enumerate()
                .filter(|(j, _)| keep(*j))
                .map(|(_, x)| *x)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (j, x) in row.iter_mut().enumerate() {
                *x = if keep(j) { (*x - mx).exp() } else { 0.0 };
                s += *x;
            }
            if s > 0.0 {
                row.iter_mut().for_each(|x| *x /= s);
            }
        }
        self.push(Op::Softmax(a), out)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(Op::Gelu(a), v)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x / (1.0 + (-x).exp()));
        self.push(Op::Silu(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let v = Mat::scalar(av.sum() / av.len().max(1) as f64);
        self.push(Op::Mean(a), v)
    }

    /// Per-row sum, `r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let v = Mat::from_fn(av.rows, 1, |i, _| av.row(i).iter().sum());
        self.push(Op::SumCols(a), v)
    }

    /// `sum_i w_i * row_i`, `1 x c`.
    pub fn weighted_row_sum(&mut self, a: Var, w: Vec<f64>) -> Var {
        let av = self.value(a);
        assert_eq!(w.len(), av.rows, "weighted_row_sum weight count");
        let mut out = Mat::zeros(1, av.cols);
        for (i, wi) in w.iter().enumerate() {
            if *wi != 0.0 {
                for (o, x) in out.data.iter_mut().zip(av.row(i)) {
                    *o += wi * x;
                }
            }
        }
        self.push(Op::WeightedRowSum(a, w), out)
    }

    /// Mean over rows with `mask[i] == true` (all rows when `None`).
    pub fn mean_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let n = self.value(a).rows;
        let count = mask.map(|m| m.iter().filter(|b| **b).count()).unwrap_or(n).max(1) as f64;
        let w = (0..n)
            .map(|i| if mask.map(|m| m[i]).unwrap_or(true) { 1.0 / count } else { 0.0 })
            .collect();
        self.weighted_row_sum(a, w)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        self.push(Op::ConcatRows(parts.to_vec()), Mat::from_vec(rows, cols, data))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows, rows, "concat_cols row mismatch");
            for i in 0..rows {
                out.row_mut(i)[off..off + v.cols].copy_from_slice(v.row(i));
            }
            off += v.cols;
        }
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows, "slice_rows out of range");
        let v = Mat::from_vec(len, av.cols, av.data[start * av.cols..(start + len) * av.cols].to_vec());
        self.push(Op::SliceRows(a, start), v)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols, "slice_cols out of range");
        let v = Mat::from_fn(av.rows, len, |i, j| av.get(i, start + j));
        self.push(Op::SliceCols(a, start), v)
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * tv.cols);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let v = Mat::from_vec(ids.len(), tv.cols, data);
        self.push(Op::Gather(table, ids.to_vec()), v)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), v)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        let mut norms = Vec::with_capacity(av.rows);
        for i in 0..av.rows {
            let row = out.row_mut(i);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        self.push(Op::L2NormalizeRows(a, norms), out)
    }

    /// Mean cross-entropy of row softmaxes against target columns.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len(), "one target per row");
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = probs.row_mut(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            let lse = mx + s.ln();
            loss += lse - row[t];
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let n = targets.len().max(1) as f64;
        self.push(Op::SoftmaxCrossEntropy(logits, targets.to_vec(), probs), Mat::scalar(loss / n))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    /// Gradients of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Grads {
        self.backward_with_inputs(loss, &[]).0
    }

    /// Parameter gradients plus gradients for the listed input nodes.
    pub fn backward_with_inputs(&self, loss: Var, inputs: &[Var]) -> (Grads, Vec<Mat>) {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut input_grads: Vec<Mat> = inputs
            .iter()
            .map(|v| {
                let (r, c) = self.shape(*v);
                Mat::zeros(r, c)
            })
            .collect();
        let mut grads = Grads::zeros_like(self.params);
        let mut g: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(Mat::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(dy) = g[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Input => {
                    for (k, v) in inputs.iter().enumerate() {
                        if v.0 == idx {
                            input_grads[k].add_assign(&dy);
                        }
                    }
                }
                Op::Param(p) => grads.0[*p].add_assign(&dy),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    gemm(&dy, false, bv, true, slot(&mut g, *a, av), 1.0);
                    gemm(av, true, &dy, false, slot(&mut g, *b, bv), 1.0);
                }
                Op::MatMulBt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    gemm(&dy, false, bv, false, slot(&mut g, *a, av), 1.0);
                    gemm(&dy, true, av, false, slot(&mut g, *b, bv), 1.0);
                }
                Op::Add(a, b) => {
                    acc(&mut g, *a, &dy);
                    acc(&mut g, *b, &dy);
                }
                Op::Sub(a, b) => {
                    acc(&mut g, *a, &dy);
                    acc(&mut g, *b, &dy.scaled(-1.0));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut g, *a, &hadamard(&dy, bv));
                    acc(&mut g, *b, &hadamard(&dy, av));
                }
                Op::AddRow(a, r) => {
                    acc(&mut g, *a, &dy);
                    acc(&mut g, *r, &col_sums(&dy));
                }
                Op::MulRow(a, r) => {
                    let (av, rv) = (self.value(*a), self.value(*r));
                    let mut da = dy.clone();
                    for i in 0..da.rows {
                        da.row_mut(i).iter_mut().zip(&rv.data).for_each(|(x, s)| *x *= s);
                    }
                    acc(&mut g, *a, &da);
                    acc(&mut g, *r, &col_sums(&hadamard(&dy, av)));
                }
                Op::Scale(a, s) => acc(&mut g, *a, &dy.scaled(*s)),
                Op::AddScalar(a) => acc(&mut g, *a, &dy),
                Op::MulConst(a, c) => acc(&mut g, *a, &hadamard(&dy, c)),
                Op::LayerNorm(a, rstd) => {
                    let n = y.cols as f64;
                    let mut dx = Mat::zeros(y.rows, y.cols);
                    for i in 0..y.rows {
                        let (yr, dr) = (y.row(i), dy.row(i));
                        let md = dr.iter().sum::<f64>() / n;
                        let mdy = dr.iter().zip(yr).map(|(d, v)| d * v).sum::<f64>() / n;
                        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                            *o = rstd[i] * (dr[j] - md - yr[j] * mdy);
                        }
                    }
                    acc(&mut g, *a, &dx);
                }
                Op::Softmax(a) => {
                    let mut dx = Mat::zeros(y.rows, y.cols);
                    for i in 0..y.rows {
                        let (yr, dr) = (y.row(i), dy.row(i));
                        let dot: f64 = yr.iter().zip(dr).map(|(p, d)| p * d).sum();
                        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                            *o = yr[j] * (dr[j] - dot);
                        }
                    }
                    acc(&mut g, *a, &dx);
                }
                Op::Gelu(a) => {
                    let av = self.value(*a);
                    let d = Mat::from_vec(
                        av.rows,
                        av.cols,
                        av.data
                            .iter()
                            .zip(&dy.data)
                            .map(|(&x, &d)| {
                                let u = GELU_C * (x + 0.044715 * x * x * x);
                                let t = u.tanh();
                                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                                d * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                            })
                            .collect(),
                    );
                    acc(&mut g, *a, &d);
                }
                Op::Silu(a) => {
                    let av = self.value(*a);
                    let d = Mat::from_vec(
                        av.rows,
                        av.cols,
                        av.data
                            .iter()
                            .zip(&dy.data)
                            .map(|(&x, &d)| {
                                let s = 1.0 / (1.0 + (-x).exp());
                                d * (s + x * s * (1.0 - s))
                            })
                            .collect(),
                    );
                    acc(&mut g, *a, &d);
                }
                Op::Exp(a) => acc(&mut g, *a, &hadamard(&dy, y)),
                Op::Square(a) => {
                    let av = self.value(*a);
                    acc(&mut g, *a, &hadamard(&dy, av).scaled(2.0));
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    acc(&mut g, *a, &Mat::filled(r, c, dy.data[0]));
                }
                Op::Mean(a) => {
                    let (r, c) = self.shape(*a);
                    acc(&mut g, *a, &Mat::filled(r, c, dy.data[0] / (r * c).max(1) as f64));
                }
                Op::SumCols(a) => {
                    let (r, c) = self.shape(*a);
                    acc(&mut g, *a, &Mat::from_fn(r, c, |i, _| dy.data[i]));
                }
                Op::WeightedRowSum(a, w) => {
                    let (r, c) = self.shape(*a);
                    acc(&mut g, *a, &Mat::from_fn(r, c, |i, j| w[i] * dy.data[j]));
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (r, c) = self.shape(*p);
                        let part = Mat::from_vec(r, c, dy.data[off * c..(off + r) * c].to_vec());
                        acc(&mut g, *p, &part);
                        off += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (r, c) = self.shape(*p);
                        let part = Mat::from_fn(r, c, |i, j| dy.get(i, off + j));
                        acc(&mut g, *p, &part);
                        off += c;
                    }
                }
                Op::SliceRows(a, start) => {
                    let av = self.value(*a);
                    let dst = slot(&mut g, *a, av);
                    let c = dst.cols;
                    for (o, d) in dst.data[start * c..(start + dy.rows) * c].iter_mut().zip(&dy.data) {
                        *o += d;
                    }
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let dst = slot(&mut g, *a, av);
                    for i in 0..dy.rows {
                        for j in 0..dy.cols {
                            dst.data[i * dst.cols + start + j] += dy.get(i, j);
                        }
                    }
                }
                Op::Gather(t, ids) => {
                    let tv = self.value(*t);
                    let dst = slot(&mut g, *t, tv);
                    for (k, &i) in ids.iter().enumerate() {
                        dst.row_mut(i).iter_mut().zip(dy.row(k)).for_each(|(o, d)| *o += d);
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let av = self.value(*a);
                    let d = Mat::from_vec(
                        av.rows,
                        av.cols,
                        av.data
                            .iter()
                            .zip(&dy.data)
                            .map(|(&x, &d)| if x < *lo || x > *hi { 0.0 } else { d })
                            .collect(),
                    );
                    acc(&mut g, *a, &d);
                }
                Op::L2NormalizeRows(a, norms) => {
                    let mut dx = Mat::zeros(y.rows, y.cols);
                    for i in 0..y.rows {
                        let (yr, dr) = (y.row(i), dy.row(i));
                        let dot: f64 = yr.iter().zip(dr).map(|(p, d)| p * d).sum();
                        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                            *o = (dr[j] - yr[j] * dot) / norms[i];
                        }
                    }
                    acc(&mut g, *a, &dx);
                }
                Op::SoftmaxCrossEntropy(a, targets, probs) => {
                    let n = targets.len().max(1) as f64;
                    let mut dx = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        dx.row_mut(i)[t] -= 1.0;
                    }
                    acc(&mut g, *a, &dx.scaled(dy.data[0] / n));
                }
                Op::Transpose(a) => acc(&mut g, *a, &dy.transpose()),
            }
        }
        (grads, input_grads)
    }
}

fn slot<'a>(g: &'a mut [Option<Mat>], v: Var, like: &Mat) -> &'a mut Mat {
    g[v.0].get_or_insert_with(|| Mat::zeros(like.rows, like.cols))
}

fn acc(g: &mut [Option<Mat>], v: Var, d: &Mat) {
    match &mut g[v.0] {
        Some(m) => m.add_assign(d),
        None => g[v.0] = Some(d.clone()),
    }
}

fn hadamard(a: &Mat, b: &Mat) -> Mat {
    Mat::from_vec(a.rows, a.cols, a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect())
}

fn col_sums(m: &Mat) -> Mat {
    let mut out = Mat::zeros(1, m.cols);
    for i in 0..m.rows {
        out.data.iter_mut().zip(m.row(i)).for_each(|(o, x)| *o += x);
    }
    out
}
