//! Dense row-major matrices and the small set of kernels the model needs.

use alloc::vec;
use alloc::vec::Vec;

/// Row-major `rows × cols` matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, other.cols);
        if other.cols == 0 {
            return out;
        }
        for i in 0..self.rows {
            gemv_acc(self.row(i), &other.data, &mut out.data[i * other.cols..(i + 1) * other.cols]);
        }
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_t inner dimension");
        self.matmul(&other.transpose())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
    }

    /// Rows selected by `idx`, in order.
    pub fn gather_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

/// `y += Σ_k a[k] · x[k]`, the inner step of the blocked kernels below.
#[inline(always)]
fn axpy4(a: [f64; 4], x: [&[f64]; 4], y: &mut [f64]) {
    let n = y.len();
    let (x0, x1, x2, x3) = (&x[0][..n], &x[1][..n], &x[2][..n], &x[3][..n]);
    for j in 0..n {
        y[j] += (a[0] * x0[j] + a[1] * x1[j]) + (a[2] * x2[j] + a[3] * x3[j]);
    }
}

/// `out += a · W` where `W` holds `a.len()` rows of width `out.len()`
/// stored contiguously. Blocks of four zero coefficients are skipped.
pub fn gemv_acc(a: &[f64], w: &[f64], out: &mut [f64]) {
    let n = out.len();
    let k = a.len();
    assert_eq!(w.len(), k * n, "gemv weight size");
    let mut i = 0;
    while i + 4 <= k {
        let c = [a[i], a[i + 1], a[i + 2], a[i + 3]];
        if c != [0.0; 4] {
            let r = |j: usize| &w[j * n..(j + 1) * n];
            axpy4(c, [r(i), r(i + 1), r(i + 2), r(i + 3)], out);
        }
        i += 4;
    }
    for j in i..k {
        if a[j] != 0.0 {
            axpy(a[j], &w[j * n..(j + 1) * n], out);
        }
    }
}

/// `out += Σ_i outer(a_i, b_i)` over paired rows, i.e. `out += Aᵀ · B` for
/// the rows listed in `pairs` (`(row of a, row of b)`). `out` is
/// `a.cols × b.cols`.
pub fn outer_acc(a: &Matrix, b: &Matrix, pairs: &[(usize, usize)], out: &mut [f64]) {
    let n = b.cols;
    assert_eq!(out.len(), a.cols * n, "outer product size");
    let mut chunks = pairs.chunks_exact(4);
    for ch in &mut chunks {
        let xs = [b.row(ch[0].1), b.row(ch[1].1), b.row(ch[2].1), b.row(ch[3].1)];
        for c in 0..a.cols {
            let k = [
                a.data[ch[0].0 * a.cols + c],
                a.data[ch[1].0 * a.cols + c],
                a.data[ch[2].0 * a.cols + c],
                a.data[ch[3].0 * a.cols + c],
            ];
            if k != [0.0; 4] {
                axpy4(k, xs, &mut out[c * n..(c + 1) * n]);
            }
        }
    }
    for &(i, j) in chunks.remainder() {
        let x = b.row(j);
        for c in 0..a.cols {
            let k = a.data[i * a.cols + c];
            if k != 0.0 {
                axpy(k, x, &mut out[c * n..(c + 1) * n]);
            }
        }
    }
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Dot product with a fixed lane split so the loop vectorizes and the
/// summation order is reproducible.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for k in 0..chunks {
        let aa = &a[k * 8..k * 8 + 8];
        let bb = &b[k * 8..k * 8 + 8];
        for l in 0..8 {
            acc[l] += aa[l] * bb[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Compressed sparse rows: row `i` mixes input rows `indices[offsets[i]..offsets[i+1]]`
/// with the matching `weights`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Csr {
    pub offsets: Vec<usize>,
    pub indices: Vec<u32>,
    pub weights: Vec<f64>,
}

impl Csr {
    pub fn from_groups(groups: &[Vec<(u32, f64)>]) -> Self {
        let mut offsets = Vec::with_capacity(groups.len() + 1);
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for g in groups {
            for &(j, w) in g {
                indices.push(j);
                weights.push(w);
            }
            offsets.push(indices.len());
        }
        Self {
            offsets,
            indices,
            weights,
        }
    }

    /// Each output row is the arithmetic mean of its group.
    pub fn mean_of(groups: &[Vec<usize>]) -> Self {
        let g: Vec<Vec<(u32, f64)>> = groups
            .iter()
            .map(|members| {
                let w = 1.0 / members.len() as f64;
                members.iter().map(|&m| (m as u32, w)).collect()
            })
            .collect();
        Self::from_groups(&g)
    }

    #[inline]
    pub fn n_rows(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    #[inline]
    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        (&self.indices[a..b], &self.weights[a..b])
    }

    /// `out[i] = Σ_k w_ik · x[j_ik]`.
    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.n_rows(), x.cols);
        for i in 0..self.n_rows() {
            let (idx, w) = self.row(i);
            let o = out.row_mut(i);
            for (&j, &wj) in idx.iter().zip(w) {
                axpy(wj, x.row(j as usize), o);
            }
        }
        out
    }
}
