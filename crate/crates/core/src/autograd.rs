//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of a forward pass. [`Tape::backward`]
//! walks it in reverse and returns the gradient of a scalar node with respect
//! to every node that depends on a trainable leaf.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::conv::{self, BevLayout, ConvShape};
use crate::math;
use crate::matrix::{axpy, dot, outer_acc, Csr, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One supervised mask row: logits row `row`, evaluated at `points` with
/// binary `target` values.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskRow {
    pub row: usize,
    pub points: Vec<u32>,
    pub target: Vec<f64>,
}

/// Penalty-reduced focal loss settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub beta: f64,
    /// Probabilities are clamped to `[clamp, 1 - clamp]`.
    pub clamp: f64,
    /// The summed loss is divided by this.
    pub norm: f64,
}

pub const DICE_EPS: f64 = 1e-6;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<u32>),
    SparseMix(Var, Arc<Csr>),
    RowMax(Var, Vec<u32>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    MeanRows(Var),
    SumAll(Var),
    Conv2d(Var, Var, ConvShape),
    BevConv(Var, Var, Arc<BevLayout>),
    Focal {
        logits: Var,
        target: Arc<Matrix>,
        params: FocalParams,
    },
    BceDice(Var, Arc<Vec<MaskRow>>),
    CrossEntropy(Var, Arc<Vec<u32>>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Gradients indexed by [`Var`]; `None` where no gradient flows.
pub struct Gradients(Vec<Option<Matrix>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.0.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn grad_slot(grads: &mut [Option<Matrix>], v: Var, rows: usize, cols: usize) -> &mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(rows, cols))
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

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMulT(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(&[a]);
        self.push(out, Op::Transpose(a), ng)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        Matrix {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |p, q| p + q);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |p, q| p - q);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |p, q| p * q);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// `a + c` for a constant `c` of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Matrix) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), c.shape(), "add_const shape");
        let mut out = x.clone();
        out.add_assign(c);
        let ng = self.ng(&[a]);
        self.push(out, Op::AddConst(a), ng)
    }

    /// `a + b` with `b` (1 × n) broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (x, r) = (self.value(a), self.value(b));
        assert_eq!((1, x.cols), r.shape(), "add_row shape");
        let mut out = x.clone();
        for i in 0..out.rows {
            for (o, v) in out.row_mut(i).iter_mut().zip(&r.data) {
                *o += v;
            }
        }
        let ng = self.ng(&[a, b]);
        self.push(out, Op::AddRow(a, b), ng)
    }

    /// `a ⊙ g` with `g` (1 × n) broadcast over rows.
    pub fn mul_row(&mut self, a: Var, g: Var) -> Var {
        let (x, r) = (self.value(a), self.value(g));
        assert_eq!((1, x.cols), r.shape(), "mul_row shape");
        let mut out = x.clone();
        for i in 0..out.rows {
            for (o, v) in out.row_mut(i).iter_mut().zip(&r.data) {
                *o *= v;
            }
        }
        let ng = self.ng(&[a, g]);
        self.push(out, Op::MulRow(a, g), ng)
    }

    /// `a ⊙ s` with `s` (m × 1) broadcast over columns.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Var {
        let (x, c) = (self.value(a), self.value(s));
        assert_eq!((x.rows, 1), c.shape(), "mul_col shape");
        let mut out = x.clone();
        for i in 0..out.rows {
            let f = c.data[i];
            for o in out.row_mut(i) {
                *o *= f;
            }
        }
        let ng = self.ng(&[a, s]);
        self.push(out, Op::MulCol(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.ng(&[a]);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(math::sigmoid);
        let ng = self.ng(&[a]);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows {
            softmax_in_place(out.row_mut(i));
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Row-wise layer normalization with affine `gain`, `bias` (1 × n).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        assert_eq!(g.shape(), (1, xv.cols));
        assert_eq!(b.shape(), (1, xv.cols));
        let n = xv.cols as f64;
        let mut out = Matrix::zeros(xv.rows, xv.cols);
        let mut inv_std = Vec::with_capacity(xv.rows);
        for i in 0..xv.rows {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / math::sqrt(var + eps);
            inv_std.push(inv);
            for (c, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = (row[c] - mean) * inv * g.data[c] + b.data[c];
            }
        }
        let ng = self.ng(&[x, gain, bias]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
            },
            ng,
        )
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).gather_rows(idx);
        let ng = self.ng(&[a]);
        let idx = idx.iter().map(|&i| i as u32).collect();
        self.push(out, Op::GatherRows(a, idx), ng)
    }

    /// Weighted row mixing `out[i] = Σ w_ij · a[j]`.
    pub fn sparse_mix(&mut self, a: Var, csr: Arc<Csr>) -> Var {
        let out = csr.apply(self.value(a));
        let ng = self.ng(&[a]);
        self.push(out, Op::SparseMix(a, csr), ng)
    }

    /// Per-column max over each group of input rows. Every group must be
    /// non-empty; the first maximal row wins ties.
    pub fn group_max(&mut self, a: Var, groups: &Csr) -> Var {
        let x = self.value(a);
        let n = groups.n_rows();
        let mut out = Matrix::zeros(n, x.cols);
        let mut arg = vec![0u32; n * x.cols];
        for i in 0..n {
            let (idx, _) = groups.row(i);
            assert!(!idx.is_empty(), "group_max on an empty group");
            let first = idx[0];
            out.row_mut(i).copy_from_slice(x.row(first as usize));
            arg[i * x.cols..(i + 1) * x.cols].fill(first);
            for &j in &idx[1..] {
                let r = x.row(j as usize);
                for c in 0..x.cols {
                    if r[c] > out.data[i * x.cols + c] {
                        out.data[i * x.cols + c] = r[c];
                        arg[i * x.cols + c] = j;
                    }
                }
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::RowMax(a, arg), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "concat_rows width");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        let ng = self.ng(parts);
        self.push(Matrix { rows, cols, data }, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows, rows, "concat_cols height");
            for i in 0..rows {
                out.data[i * cols + off..i * cols + off + m.cols].copy_from_slice(m.row(i));
            }
            off += m.cols;
        }
        let ng = self.ng(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols);
        let out = Matrix::from_fn(x.rows, len, |r, c| x.get(r, start + c));
        let ng = self.ng(&[a]);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    /// Column means as a `1 × n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(1, x.cols);
        for i in 0..x.rows {
            axpy(1.0, x.row(i), &mut out.data);
        }
        let inv = 1.0 / x.rows.max(1) as f64;
        for v in &mut out.data {
            *v *= inv;
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::MeanRows(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let ng = self.ng(&[a]);
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::SumAll(a), ng)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, shape: ConvShape) -> Var {
        let out = conv::conv2d_forward(self.value(x), self.value(w), &shape);
        let ng = self.ng(&[x, w]);
        self.push(out, Op::Conv2d(x, w, shape), ng)
    }

    /// Height-stacked BEV projection of sparse voxel features fused with a 3×3
    /// convolution; see [`conv::bev_conv_forward`].
    pub fn bev_conv(&mut self, x: Var, w: Var, layout: Arc<BevLayout>) -> Var {
        let cout = self.value(w).cols;
        let out = conv::bev_conv_forward(self.value(x), self.value(w), &layout, cout);
        let ng = self.ng(&[x, w]);
        self.push(out, Op::BevConv(x, w, layout), ng)
    }

    /// Penalty-reduced focal loss on logits against a target in `[0, 1]`.
    /// Cells whose target equals 1 are positives.
    pub fn focal_loss(&mut self, logits: Var, target: Arc<Matrix>, params: FocalParams) -> Var {
        let x = self.value(logits);
        assert_eq!(x.shape(), target.shape(), "focal target shape");
        let (lo, hi) = focal_logit_bounds(params.clamp);
        let mut total = 0.0;
        for (&xv, &y) in x.data.iter().zip(&target.data) {
            let p = math::sigmoid(xv.clamp(lo, hi));
            total += if y == 1.0 {
                -math::pow(1.0 - p, params.alpha) * math::ln(p)
            } else {
                -math::pow(1.0 - y, params.beta) * math::pow(p, params.alpha) * math::ln(1.0 - p)
            };
        }
        let out = Matrix::from_vec(1, 1, vec![total / params.norm]);
        let ng = self.ng(&[logits]);
        self.push(
            out,
            Op::Focal {
                logits,
                target,
                params,
            },
            ng,
        )
    }

    /// Mean over `rows` of `BCE + Dice`, evaluated on each row's sampled points.
    pub fn bce_dice(&mut self, logits: Var, rows: Arc<Vec<MaskRow>>) -> Var {
        let x = self.value(logits);
        let mut total = 0.0;
        for r in rows.iter() {
            let (bce, dice) = bce_dice_row(x.row(r.row), r);
            total += bce + dice;
        }
        let n = rows.len().max(1) as f64;
        let out = Matrix::from_vec(1, 1, vec![total / n]);
        let ng = self.ng(&[logits]);
        self.push(out, Op::BceDice(logits, rows), ng)
    }

    /// Mean cross-entropy of row-wise logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<Vec<u32>>) -> Var {
        let x = self.value(logits);
        assert_eq!(x.rows, labels.len(), "cross entropy label count");
        let mut total = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = x.row(i);
            total += log_sum_exp(row) - row[l as usize];
        }
        let out = Matrix::from_vec(1, 1, vec![total / x.rows.max(1) as f64]);
        let ng = self.ng(&[logits]);
        self.push(out, Op::CrossEntropy(logits, labels), ng)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients(grads)
    }

    fn backprop_node(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if ng(*a) {
                    accumulate(grads, *a, g.matmul_t(bv));
                }
                if ng(*b) {
                    let db = grad_slot(grads, *b, bv.rows, bv.cols);
                    let pairs: Vec<(usize, usize)> = (0..av.rows).map(|i| (i, i)).collect();
                    outer_acc(av, g, &pairs, &mut db.data);
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if ng(*a) {
                    accumulate(grads, *a, g.matmul(bv));
                }
                if ng(*b) {
                    let db = grad_slot(grads, *b, bv.rows, bv.cols);
                    let pairs: Vec<(usize, usize)> = (0..av.rows).map(|i| (i, i)).collect();
                    outer_acc(g, av, &pairs, &mut db.data);
                }
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                if ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if ng(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if ng(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if ng(*a) {
                    let d = Matrix {
                        rows: g.rows,
                        cols: g.cols,
                        data: g.data.iter().zip(&bv.data).map(|(p, q)| p * q).collect(),
                    };
                    accumulate(grads, *a, d);
                }
                if ng(*b) {
                    let d = Matrix {
                        rows: g.rows,
                        cols: g.cols,
                        data: g.data.iter().zip(&av.data).map(|(p, q)| p * q).collect(),
                    };
                    accumulate(grads, *b, d);
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|v| v * s)),
            Op::AddConst(a) => accumulate(grads, *a, g.clone()),
            Op::AddRow(a, b) => {
                if ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if ng(*b) {
                    let db = grad_slot(grads, *b, 1, g.cols);
                    for i in 0..g.rows {
                        axpy(1.0, g.row(i), &mut db.data);
                    }
                }
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (self.value(*a), self.value(*r));
                if ng(*a) {
                    let mut d = g.clone();
                    for i in 0..d.rows {
                        for (o, f) in d.row_mut(i).iter_mut().zip(&rv.data) {
                            *o *= f;
                        }
                    }
                    accumulate(grads, *a, d);
                }
                if ng(*r) {
                    let dr = grad_slot(grads, *r, 1, g.cols);
                    for i in 0..g.rows {
                        for ((o, gv), xv) in dr.data.iter_mut().zip(g.row(i)).zip(av.row(i)) {
                            *o += gv * xv;
                        }
                    }
                }
            }
            Op::MulCol(a, s) => {
                let (av, sv) = (self.value(*a), self.value(*s));
                if ng(*a) {
                    let mut d = g.clone();
                    for i in 0..d.rows {
                        let f = sv.data[i];
                        for o in d.row_mut(i) {
                            *o *= f;
                        }
                    }
                    accumulate(grads, *a, d);
                }
                if ng(*s) {
                    let ds = Matrix::from_fn(g.rows, 1, |i, _| dot(g.row(i), av.row(i)));
                    accumulate(grads, *s, ds);
                }
            }
            Op::Relu(a) => {
                let d = Matrix {
                    rows: g.rows,
                    cols: g.cols,
                    data: g
                        .data
                        .iter()
                        .zip(&y.data)
                        .map(|(&gv, &yv)| if yv > 0.0 { gv } else { 0.0 })
                        .collect(),
                };
                accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = Matrix {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().zip(&y.data).map(|(&gv, &s)| gv * s * (1.0 - s)).collect(),
                };
                accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = Matrix::zeros(g.rows, g.cols);
                for i in 0..g.rows {
                    let (gi, yi) = (g.row(i), y.row(i));
                    let s = dot(gi, yi);
                    for ((o, &gv), &yv) in d.row_mut(i).iter_mut().zip(gi).zip(yi) {
                        *o = yv * (gv - s);
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let n = xv.cols as f64;
                let mut dx = Matrix::zeros(xv.rows, xv.cols);
                let mut dg = vec![0.0; xv.cols];
                let mut db = vec![0.0; xv.cols];
                for i in 0..xv.rows {
                    let row = xv.row(i);
                    let mean = row.iter().sum::<f64>() / n;
                    let inv = inv_std[i];
                    let gi = g.row(i);
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for c in 0..xv.cols {
                        let h = (row[c] - mean) * inv;
                        let dh = gi[c] * gv.data[c];
                        sum_dh += dh;
                        sum_dh_h += dh * h;
                        dg[c] += gi[c] * h;
                        db[c] += gi[c];
                    }
                    let o = dx.row_mut(i);
                    for c in 0..xv.cols {
                        let h = (row[c] - mean) * inv;
                        let dh = gi[c] * gv.data[c];
                        o[c] = inv / n * (n * dh - sum_dh - h * sum_dh_h);
                    }
                }
                if ng(*x) {
                    accumulate(grads, *x, dx);
                }
                if ng(*gain) {
                    accumulate(grads, *gain, Matrix::from_vec(1, xv.cols, dg));
                }
                if ng(*bias) {
                    accumulate(grads, *bias, Matrix::from_vec(1, xv.cols, db));
                }
            }
            Op::GatherRows(a, idx) => {
                let av = self.value(*a);
                let da = grad_slot(grads, *a, av.rows, av.cols);
                for (i, &j) in idx.iter().enumerate() {
                    axpy(1.0, g.row(i), da.row_mut(j as usize));
                }
            }
            Op::SparseMix(a, csr) => {
                let av = self.value(*a);
                let da = grad_slot(grads, *a, av.rows, av.cols);
                for i in 0..csr.n_rows() {
                    let (idx, w) = csr.row(i);
                    for (&j, &wj) in idx.iter().zip(w) {
                        axpy(wj, g.row(i), da.row_mut(j as usize));
                    }
                }
            }
            Op::RowMax(a, arg) => {
                let av = self.value(*a);
                let cols = av.cols;
                let da = grad_slot(grads, *a, av.rows, cols);
                for (k, (&j, &gv)) in arg.iter().zip(&g.data).enumerate() {
                    da.data[j as usize * cols + k % cols] += gv;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.value(p).shape();
                    if ng(p) {
                        let d = Matrix::from_vec(r, c, g.data[off * c..(off + r) * c].to_vec());
                        accumulate(grads, p, d);
                    }
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.value(p).shape();
                    if ng(p) {
                        let d = Matrix::from_fn(r, c, |i, j| g.get(i, off + j));
                        accumulate(grads, p, d);
                    }
                    off += c;
                }
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let da = grad_slot(grads, *a, av.rows, av.cols);
                for i in 0..g.rows {
                    for c in 0..g.cols {
                        da.data[i * av.cols + start + c] += g.get(i, c);
                    }
                }
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let inv = 1.0 / av.rows.max(1) as f64;
                let da = grad_slot(grads, *a, av.rows, av.cols);
                for i in 0..av.rows {
                    axpy(inv, &g.data, da.row_mut(i));
                }
            }
            Op::SumAll(a) => {
                let av = self.value(*a);
                accumulate(grads, *a, Matrix::filled(av.rows, av.cols, g.data[0]));
            }
            Op::Conv2d(x, w, shape) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let mut dx = ng(*x).then(|| Matrix::zeros(xv.rows, xv.cols));
                let mut dw = ng(*w).then(|| Matrix::zeros(wv.rows, wv.cols));
                conv::conv2d_backward(xv, wv, g, shape, dx.as_mut(), dw.as_mut());
                if let Some(d) = dx {
                    accumulate(grads, *x, d);
                }
                if let Some(d) = dw {
                    accumulate(grads, *w, d);
                }
            }
            Op::BevConv(x, w, layout) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let mut dx = ng(*x).then(|| Matrix::zeros(xv.rows, xv.cols));
                let mut dw = ng(*w).then(|| Matrix::zeros(wv.rows, wv.cols));
                conv::bev_conv_backward(xv, wv, g, layout, dx.as_mut(), dw.as_mut());
                if let Some(d) = dx {
                    accumulate(grads, *x, d);
                }
                if let Some(d) = dw {
                    accumulate(grads, *w, d);
                }
            }
            Op::Focal {
                logits,
                target,
                params,
            } => {
                let xv = self.value(*logits);
                let (lo, hi) = focal_logit_bounds(params.clamp);
                let scale = g.data[0] / params.norm;
                let (a, b) = (params.alpha, params.beta);
                let d = Matrix {
                    rows: xv.rows,
                    cols: xv.cols,
                    data: xv
                        .data
                        .iter()
                        .zip(&target.data)
                        .map(|(&x, &t)| {
                            if x < lo || x > hi {
                                return 0.0;
                            }
                            let p = math::sigmoid(x);
                            let dl = if t == 1.0 {
                                a * math::pow(1.0 - p, a) * p * math::ln(p) - math::pow(1.0 - p, a + 1.0)
                            } else {
                                let w = math::pow(1.0 - t, b);
                                -w * (a * math::pow(p, a) * (1.0 - p) * math::ln(1.0 - p)
                                    - math::pow(p, a + 1.0))
                            };
                            dl * scale
                        })
                        .collect(),
                };
                accumulate(grads, *logits, d);
            }
            Op::BceDice(logits, rows) => {
                let xv = self.value(*logits);
                let scale = g.data[0] / rows.len().max(1) as f64;
                let dl = grad_slot(grads, *logits, xv.rows, xv.cols);
                for r in rows.iter() {
                    let xrow = xv.row(r.row);
                    let n = r.points.len() as f64;
                    let mut sp = 0.0;
                    let mut sy = 0.0;
                    let mut spy = 0.0;
                    for (&j, &t) in r.points.iter().zip(&r.target) {
                        let p = math::sigmoid(xrow[j as usize]);
                        sp += p;
                        sy += t;
                        spy += p * t;
                    }
                    let s = sp + sy + DICE_EPS;
                    let drow = dl.row_mut(r.row);
                    for (&j, &t) in r.points.iter().zip(&r.target) {
                        let p = math::sigmoid(xrow[j as usize]);
                        let d_bce = (p - t) / n;
                        let d_dice_dp = -(2.0 * t * s - 2.0 * spy) / (s * s);
                        drow[j as usize] += scale * (d_bce + d_dice_dp * p * (1.0 - p));
                    }
                }
            }
            Op::CrossEntropy(logits, labels) => {
                let xv = self.value(*logits);
                let scale = g.data[0] / xv.rows.max(1) as f64;
                let mut d = xv.clone();
                for (i, &l) in labels.iter().enumerate() {
                    let row = d.row_mut(i);
                    softmax_in_place(row);
                    row[l as usize] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                accumulate(grads, *logits, d);
            }
        }
    }
}

/// Logit range equivalent to clamping probabilities to `[clamp, 1 - clamp]`.
pub fn focal_logit_bounds(clamp: f64) -> (f64, f64) {
    let hi = math::logit(1.0 - clamp);
    (-hi, hi)
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = math::exp(*v - m);
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + math::ln(row.iter().map(|&v| math::exp(v - m)).sum::<f64>())
}

/// `(BCE, Dice)` of one sampled mask row given its logits.
pub fn bce_dice_row(logits: &[f64], r: &MaskRow) -> (f64, f64) {
    let mut bce = 0.0;
    let mut sp = 0.0;
    let mut sy = 0.0;
    let mut spy = 0.0;
    for (&j, &t) in r.points.iter().zip(&r.target) {
        let x = logits[j as usize];
        bce += math::softplus(x) - t * x;
        let p = math::sigmoid(x);
        sp += p;
        sy += t;
        spy += p * t;
    }
    let n = r.points.len().max(1) as f64;
    (bce / n, 1.0 - 2.0 * spy / (sp + sy + DICE_EPS))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_chain_gradient() {
        let mut t = Tape::new();
        let a = t.param(Matrix::from_vec(1, 2, vec![1.0, 2.0]));
        let b = t.param(Matrix::from_vec(2, 1, vec![3.0, -1.0]));
        let c = t.matmul(a, b);
        let l = t.sum_all(c);
        let g = t.backward(l);
        assert_eq!(g.get(a).unwrap().data, vec![3.0, -1.0]);
        assert_eq!(g.get(b).unwrap().data, vec![1.0, 2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::filled(2, 2, 1.0));
        let b = t.param(Matrix::filled(2, 2, 2.0));
        let c = t.mul(a, b);
        let l = t.sum_all(c);
        let g = t.backward(l);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().data, vec![1.0; 4]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1e9, 0.0, 0.0]));
        let s = t.softmax_rows(a);
        let v = t.value(s);
        for i in 0..2 {
            assert!((v.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(v.get(1, 0), 0.0);
    }
}
