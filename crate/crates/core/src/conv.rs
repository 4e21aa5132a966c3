//! 2D convolution kernels on pixel-major maps.
//!
//! A map with `H × W` pixels and `C` channels is stored as a `(H·W) × C`
//! matrix; pixel `(row, col)` lives at matrix row `row · W + col`. Kernels are
//! `(k·k·C_in) × C_out` matrices whose row `tap · C_in + ci` holds the weights
//! of input channel `ci` at tap `tap = (dy + r) · k + (dx + r)`, `r = k / 2`.
//! Padding is zero and the stride is one, so `out[y][x] = Σ_tap in[y+dy][x+dx] · W[tap]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::matrix::{gemv_acc, outer_acc, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub height: usize,
    pub width: usize,
    pub ksize: usize,
    pub cin: usize,
    pub cout: usize,
}

impl ConvShape {
    #[inline]
    fn taps(&self) -> impl Iterator<Item = (usize, isize, isize)> {
        let k = self.ksize;
        let r = (k / 2) as isize;
        (0..k * k).map(move |t| (t, (t / k) as isize - r, (t % k) as isize - r))
    }

    #[inline]
    fn shift(&self, y: usize, x: usize, dy: isize, dx: isize) -> Option<usize> {
        let yy = y as isize + dy;
        let xx = x as isize + dx;
        if yy < 0 || xx < 0 || yy >= self.height as isize || xx >= self.width as isize {
            None
        } else {
            Some(yy as usize * self.width + xx as usize)
        }
    }
}

pub fn conv2d_forward(x: &Matrix, w: &Matrix, s: &ConvShape) -> Matrix {
    assert_eq!(x.rows, s.height * s.width, "conv input pixels");
    assert_eq!(x.cols, s.cin, "conv input channels");
    assert_eq!(w.shape(), (s.ksize * s.ksize * s.cin, s.cout), "conv kernel shape");
    let mut out = Matrix::zeros(x.rows, s.cout);
    let block = s.cin * s.cout;
    for y in 0..s.height {
        for xc in 0..s.width {
            let p = y * s.width + xc;
            let o = &mut out.data[p * s.cout..(p + 1) * s.cout];
            for (t, dy, dx) in s.taps() {
                if let Some(q) = s.shift(y, xc, dy, dx) {
                    gemv_acc(x.row(q), &w.data[t * block..(t + 1) * block], o);
                }
            }
        }
    }
    out
}

/// Transposes each consecutive `rows × cols` block of `w`.
fn transpose_blocks(w: &Matrix, rows: usize) -> Vec<f64> {
    let cols = w.cols;
    let mut out = vec![0.0; w.data.len()];
    for b in 0..w.rows / rows {
        let base = b * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                out[base + c * rows + r] = w.data[base + r * cols + c];
            }
        }
    }
    out
}

/// Accumulates input and kernel gradients for [`conv2d_forward`].
pub fn conv2d_backward(
    x: &Matrix,
    w: &Matrix,
    dy: &Matrix,
    s: &ConvShape,
    dx: Option<&mut Matrix>,
    dw: Option<&mut Matrix>,
) {
    let block = s.cin * s.cout;
    let live: Vec<bool> = (0..dy.rows).map(|p| dy.row(p).iter().any(|&v| v != 0.0)).collect();
    let mut pairs: Vec<Vec<(usize, usize)>> = vec![Vec::new(); s.ksize * s.ksize];
    for y in 0..s.height {
        for xc in 0..s.width {
            let p = y * s.width + xc;
            if !live[p] {
                continue;
            }
            for (t, ddy, ddx) in s.taps() {
                if let Some(q) = s.shift(y, xc, ddy, ddx) {
                    pairs[t].push((q, p));
                }
            }
        }
    }
    if let Some(dx) = dx {
        let wt = transpose_blocks(w, s.cin);
        for (t, list) in pairs.iter().enumerate() {
            let wt_t = &wt[t * block..(t + 1) * block];
            for &(q, p) in list {
                gemv_acc(dy.row(p), wt_t, dx.row_mut(q));
            }
        }
    }
    if let Some(dw) = dw {
        for (t, list) in pairs.iter().enumerate() {
            outer_acc(x, dy, list, &mut dw.data[t * block..(t + 1) * block]);
        }
    }
}

/// Placement of sparse voxels in a BEV plane: voxel `i` sits at pixel
/// `(h, w)` and height slice `d`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct BevLayout {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub cells: Vec<[u32; 3]>,
}

/// 3×3 convolution applied directly to the height-stacked BEV volume of a
/// sparse voxel grid, without materializing it. Voxel features are `N_v × C`;
/// the dense input channel of voxel feature `ci` at slice `d` is `d · C + ci`,
/// so the kernel is `(9 · D · C) × C_out`.
pub fn bev_conv_forward(x: &Matrix, w: &Matrix, layout: &BevLayout, cout: usize) -> Matrix {
    let c = x.cols;
    let cin = layout.depth * c;
    assert_eq!(w.shape(), (9 * cin, cout), "bev kernel shape");
    assert_eq!(x.rows, layout.cells.len(), "bev voxel count");
    let s = bev_shape(layout, cin, cout);
    let mut out = Matrix::zeros(layout.height * layout.width, cout);
    for (i, &[h, wc, d]) in layout.cells.iter().enumerate() {
        let xin = x.row(i);
        for (t, dy, dx) in s.taps() {
            // voxel at (h, w) feeds output (h - dy, w - dx)
            let Some(p) = s.shift(h as usize, wc as usize, -dy, -dx) else {
                continue;
            };
            let base = (t * cin + d as usize * c) * cout;
            gemv_acc(xin, &w.data[base..base + c * cout], &mut out.data[p * cout..(p + 1) * cout]);
        }
    }
    out
}

fn bev_shape(layout: &BevLayout, cin: usize, cout: usize) -> ConvShape {
    ConvShape {
        height: layout.height,
        width: layout.width,
        ksize: 3,
        cin,
        cout,
    }
}

pub fn bev_conv_backward(
    x: &Matrix,
    w: &Matrix,
    dy: &Matrix,
    layout: &BevLayout,
    dx: Option<&mut Matrix>,
    dw: Option<&mut Matrix>,
) {
    let c = x.cols;
    let cout = dy.cols;
    let cin = layout.depth * c;
    let s = bev_shape(layout, cin, cout);
    let block = c * cout;
    // one list of (voxel, pixel) pairs per kernel block (tap, slice)
    let mut pairs: Vec<Vec<(usize, usize)>> = vec![Vec::new(); 9 * layout.depth];
    for (i, &[h, wc, d]) in layout.cells.iter().enumerate() {
        for (t, ddy, ddx) in s.taps() {
            if let Some(p) = s.shift(h as usize, wc as usize, -ddy, -ddx) {
                pairs[t * layout.depth + d as usize].push((i, p));
            }
        }
    }
    if let Some(dx) = dx {
        let wt = transpose_blocks(w, c);
        for (b, list) in pairs.iter().enumerate() {
            let wt_b = &wt[b * block..(b + 1) * block];
            for &(i, p) in list {
                gemv_acc(dy.row(p), wt_b, dx.row_mut(i));
            }
        }
    }
    if let Some(dw) = dw {
        for (b, list) in pairs.iter().enumerate() {
            outer_acc(x, dy, list, &mut dw.data[b * block..(b + 1) * block]);
        }
    }
}
