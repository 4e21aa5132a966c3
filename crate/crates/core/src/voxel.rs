//! Grid voxelization, per-point input features, voxel→point interpolation
//! (V2P) and voxel→BEV projection (V2B).

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cloud::LabeledPointCloud;
use crate::error::{Error, Result};
use crate::math;
use crate::matrix::{Csr, Matrix};

/// Inverse-distance weighting offset used by V2P.
pub const V2P_EPS: f64 = 1e-8;
/// Point feature width with the range feature enabled.
pub const POINT_FEATURES: usize = 8;

/// Dense voxel grid at full resolution plus the ordered list of level scales.
/// Level `i` has dims `dims · level_scales[i]`; the last level is full resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelGridSpec {
    pub origin: [f64; 3],
    pub voxel_size: [f64; 3],
    pub dims: [usize; 3],
    pub level_scales: Vec<f64>,
}

impl Default for VoxelGridSpec {
    fn default() -> Self {
        Self {
            origin: [-12.8, -12.8, -1.0],
            voxel_size: [0.1, 0.1, 0.1],
            dims: [256, 256, 48],
            level_scales: vec![0.125, 0.25, 0.5, 1.0],
        }
    }
}

impl VoxelGridSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.voxel_size.iter().any(|&s| !(s > 0.0)) {
            return fail("voxel_size must be positive on every axis");
        }
        if self.origin.iter().any(|v| !v.is_finite()) {
            return fail("origin must be finite");
        }
        if self.dims.iter().any(|&d| d == 0 || d > (1 << 20)) {
            return fail("dims must lie in [1, 2^20]");
        }
        if self.level_scales.is_empty() || *self.level_scales.last().unwrap() != 1.0 {
            return fail("level_scales must end with full resolution (1.0)");
        }
        let mut prev = 0u32;
        for (i, &s) in self.level_scales.iter().enumerate() {
            let shift = scale_shift(s).ok_or_else(|| {
                Error::Config(format!("level scale {s} is not 1/2^k"))
            })?;
            if i > 0 && shift >= prev {
                return fail("level_scales must increase strictly");
            }
            prev = shift;
            if self.dims.iter().any(|&d| d % (1 << shift) != 0) {
                return Err(Error::Config(format!(
                    "level scale {s} does not divide dims {:?} to integers",
                    self.dims
                )));
            }
        }
        Ok(())
    }

    pub fn n_levels(&self) -> usize {
        self.level_scales.len()
    }

    pub fn finest_level(&self) -> usize {
        self.level_scales.len() - 1
    }

    /// Number of halvings between full resolution and `level`.
    pub fn level_shift(&self, level: usize) -> u32 {
        scale_shift(self.level_scales[level]).expect("validated scale")
    }

    pub fn level_dims(&self, level: usize) -> [usize; 3] {
        let s = self.level_shift(level);
        self.dims.map(|d| d >> s)
    }

    pub fn level_voxel_size(&self, level: usize) -> [f64; 3] {
        let f = (1u64 << self.level_shift(level)) as f64;
        self.voxel_size.map(|v| v * f)
    }

    /// Full-resolution voxel index, or `None` outside `[origin, origin + dims · size)`.
    pub fn full_index(&self, p: [f64; 3]) -> Option<[u32; 3]> {
        let mut idx = [0u32; 3];
        for a in 0..3 {
            let u = math::floor((p[a] - self.origin[a]) / self.voxel_size[a]);
            if !(u >= 0.0 && u < self.dims[a] as f64) {
                return None;
            }
            idx[a] = u as u32;
        }
        Some(idx)
    }

    pub fn level_index(&self, p: [f64; 3], level: usize) -> Option<[u32; 3]> {
        let s = self.level_shift(level);
        self.full_index(p).map(|i| i.map(|v| v >> s))
    }

    /// Half-extent of the grid in the xy plane.
    pub fn range_xy(&self) -> f64 {
        0.5 * f64::max(
            self.dims[0] as f64 * self.voxel_size[0],
            self.dims[1] as f64 * self.voxel_size[1],
        )
    }
}

fn scale_shift(s: f64) -> Option<u32> {
    (0..20).find(|&k| s == 1.0 / (1u64 << k) as f64)
}

/// Occupied voxels of one level with optional per-voxel features.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseVoxelGrid {
    pub level: usize,
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    pub voxel_size: [f64; 3],
    /// Lexicographically sorted, unique.
    pub coords: Vec<[u32; 3]>,
    /// `N_v × C`; `C = 0` before features are attached.
    pub features: Matrix,
    /// Row of each input point's voxel, or -1 when the point is out of range.
    pub point_to_voxel: Vec<i32>,
}

impl SparseVoxelGrid {
    pub fn n_voxels(&self) -> usize {
        self.coords.len()
    }

    pub fn find(&self, c: [u32; 3]) -> Option<usize> {
        self.coords.binary_search(&c).ok()
    }

    pub fn center(&self, row: usize) -> [f64; 3] {
        voxel_center(self.origin, self.voxel_size, self.coords[row])
    }

    pub fn with_features(mut self, features: Matrix) -> Self {
        assert_eq!(features.rows, self.coords.len(), "feature rows must match voxels");
        self.features = features;
        self
    }

    /// Member point rows of every voxel.
    pub fn members(&self) -> Csr {
        let mut groups: Vec<Vec<(u32, f64)>> = vec![Vec::new(); self.coords.len()];
        for (p, &v) in self.point_to_voxel.iter().enumerate() {
            if v >= 0 {
                groups[v as usize].push((p as u32, 1.0));
            }
        }
        Csr::from_groups(&groups)
    }
}

#[inline]
pub fn voxel_center(origin: [f64; 3], size: [f64; 3], idx: [u32; 3]) -> [f64; 3] {
    [
        origin[0] + (idx[0] as f64 + 0.5) * size[0],
        origin[1] + (idx[1] as f64 + 0.5) * size[1],
        origin[2] + (idx[2] as f64 + 0.5) * size[2],
    ]
}

pub fn voxelize(cloud: &LabeledPointCloud, spec: &VoxelGridSpec, level: usize) -> SparseVoxelGrid {
    voxelize_points(&cloud.positions_f64(), spec, level)
}

pub fn voxelize_points(points: &[[f64; 3]], spec: &VoxelGridSpec, level: usize) -> SparseVoxelGrid {
    let idx: Vec<Option<[u32; 3]>> = points.iter().map(|&p| spec.level_index(p, level)).collect();
    let mut coords: Vec<[u32; 3]> = idx.iter().flatten().copied().collect();
    coords.sort_unstable();
    coords.dedup();
    let point_to_voxel = idx
        .iter()
        .map(|c| match c {
            Some(c) => coords.binary_search(c).expect("coord inserted above") as i32,
            None => -1,
        })
        .collect();
    SparseVoxelGrid {
        level,
        dims: spec.level_dims(level),
        origin: spec.origin,
        voxel_size: spec.level_voxel_size(level),
        features: Matrix::zeros(coords.len(), 0),
        coords,
        point_to_voxel,
    }
}

/// Per-point input rows `[x, y, z, intensity, dx, dy, dz, range]` where the
/// offsets are measured from the voxel center and the range is
/// `‖(x, y)‖ / range_xy`. Out-of-range points get zero offsets. With
/// `with_range = false` the last column is omitted.
pub fn point_representation(
    points: &[[f64; 3]],
    intensity: &[f32],
    grid: &SparseVoxelGrid,
    range_xy: f64,
    with_range: bool,
) -> Result<Matrix> {
    if points.len() != grid.point_to_voxel.len() || points.len() != intensity.len() {
        return Err(Error::Contract(format!(
            "point count {} does not match grid ({}) or intensity ({})",
            points.len(),
            grid.point_to_voxel.len(),
            intensity.len()
        )));
    }
    let width = if with_range { POINT_FEATURES } else { POINT_FEATURES - 1 };
    let mut out = Matrix::zeros(points.len(), width);
    for (i, p) in points.iter().enumerate() {
        let row = out.row_mut(i);
        row[..3].copy_from_slice(p);
        row[3] = intensity[i] as f64;
        let v = grid.point_to_voxel[i];
        if v >= 0 {
            let c = grid.center(v as usize);
            for a in 0..3 {
                row[4 + a] = p[a] - c[a];
            }
        }
        if with_range {
            row[7] = math::sqrt(p[0] * p[0] + p[1] * p[1]) / range_xy;
        }
    }
    Ok(out)
}

pub fn cloud_representation(
    cloud: &LabeledPointCloud,
    grid: &SparseVoxelGrid,
    range_xy: f64,
    with_range: bool,
) -> Result<Matrix> {
    point_representation(&cloud.positions_f64(), &cloud.intensity, grid, range_xy, with_range)
}

/// Componentwise max of the member points' features in every voxel.
pub fn pool_voxel_features(point_feats: &Matrix, grid: &SparseVoxelGrid) -> Result<Matrix> {
    if point_feats.rows != grid.point_to_voxel.len() {
        return Err(Error::Contract("feature rows differ from point count".to_string()));
    }
    let mut out = Matrix::filled(grid.n_voxels(), point_feats.cols, f64::NEG_INFINITY);
    for (p, &v) in grid.point_to_voxel.iter().enumerate() {
        if v < 0 {
            continue;
        }
        let src = point_feats.row(p);
        for (o, &s) in out.row_mut(v as usize).iter_mut().zip(src) {
            if s > *o {
                *o = s;
            }
        }
    }
    Ok(out)
}

/// The `k` voxel centers nearest to `p` as `(row, distance)`, ordered by
/// distance then row. Exact: a ring search over the lattice falls back to a
/// full scan when the neighborhood is sparse.
pub fn knn_voxels(grid: &SparseVoxelGrid, p: [f64; 3], k: usize) -> Vec<(usize, f64)> {
    let n = grid.n_voxels();
    let k = k.min(n);
    if k == 0 {
        return Vec::new();
    }
    let dist = |row: usize| {
        let c = grid.center(row);
        let d = [c[0] - p[0], c[1] - p[1], c[2] - p[2]];
        math::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
    };
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    let offer = |best: &mut Vec<(f64, usize)>, row: usize| {
        let d = dist(row);
        let key = (d, row);
        if best.len() == k {
            let last = best[k - 1];
            if (key.0, key.1) >= (last.0, last.1) {
                return;
            }
            best.pop();
        }
        let pos = best.partition_point(|&(bd, br)| (bd, br) < (key.0, key.1));
        best.insert(pos, key);
    };

    const MAX_RING: i64 = 4;
    let cell: [i64; 3] = core::array::from_fn(|a| {
        math::floor((p[a] - grid.origin[a]) / grid.voxel_size[a]) as i64
    });
    let inside = (0..3).all(|a| cell[a] >= 0 && cell[a] < grid.dims[a] as i64);
    let min_size = grid.voxel_size.iter().copied().fold(f64::INFINITY, f64::min);
    if inside && n > 27 {
        for r in 0..=MAX_RING {
            for dh in -r..=r {
                for dw in -r..=r {
                    for dd in -r..=r {
                        if dh.abs().max(dw.abs()).max(dd.abs()) != r {
                            continue;
                        }
                        let c = [cell[0] + dh, cell[1] + dw, cell[2] + dd];
                        if (0..3).any(|a| c[a] < 0 || c[a] >= grid.dims[a] as i64) {
                            continue;
                        }
                        if let Some(row) = grid.find([c[0] as u32, c[1] as u32, c[2] as u32]) {
                            offer(&mut best, row);
                        }
                    }
                }
            }
            // anything outside the scanned cube is farther than (r + 0.5) · min_size
            if best.len() == k && best[k - 1].0 < (r as f64 + 0.5) * min_size {
                return best.into_iter().map(|(d, r)| (r, d)).collect();
            }
        }
        best.clear();
    }
    for row in 0..n {
        offer(&mut best, row);
    }
    best.into_iter().map(|(d, r)| (r, d)).collect()
}

/// Inverse-distance weights `(1/(d_j+ε)) / Σ_l 1/(d_l+ε)` over the k nearest voxels.
pub fn v2p_weights(grid: &SparseVoxelGrid, points: &[[f64; 3]], k: usize) -> Result<Csr> {
    if grid.n_voxels() == 0 {
        return Err(Error::Contract("V2P on an empty grid".to_string()));
    }
    if k == 0 {
        return Err(Error::Contract("V2P needs k >= 1".to_string()));
    }
    let groups: Vec<Vec<(u32, f64)>> = points
        .iter()
        .map(|&p| {
            let nn = knn_voxels(grid, p, k);
            let inv: Vec<f64> = nn.iter().map(|&(_, d)| 1.0 / (d + V2P_EPS)).collect();
            let total: f64 = inv.iter().sum();
            nn.iter().zip(&inv).map(|(&(r, _), &w)| (r as u32, w / total)).collect()
        })
        .collect();
    Ok(Csr::from_groups(&groups))
}

pub fn v2p_interpolate(grid: &SparseVoxelGrid, points: &[[f64; 3]], k: usize) -> Result<Matrix> {
    if grid.features.rows != grid.n_voxels() {
        return Err(Error::Contract("grid has no features".to_string()));
    }
    Ok(v2p_weights(grid, points, k)?.apply(&grid.features))
}

/// Dense height-stacked BEV volume: a `(C·D) × (H·W)` matrix whose row
/// `d · C + c` is channel `c` of height slice `d`, and whose column
/// `h · W + w` is the pixel.
pub fn v2b_project(grid: &SparseVoxelGrid) -> Matrix {
    let c = grid.features.cols;
    let [h, w, d] = grid.dims;
    let mut out = Matrix::zeros(c * d, h * w);
    for (row, &[vh, vw, vd]) in grid.coords.iter().enumerate() {
        let pix = vh as usize * w + vw as usize;
        for ch in 0..c {
            out.set(vd as usize * c + ch, pix, grid.features.get(row, ch));
        }
    }
    out
}

/// 27-neighborhood (including the voxel itself) of every voxel.
pub fn neighbor_groups(grid: &SparseVoxelGrid) -> Csr {
    let groups: Vec<Vec<(u32, f64)>> = grid
        .coords
        .iter()
        .map(|&[h, w, d]| {
            let mut g = Vec::with_capacity(27);
            for dh in -1i64..=1 {
                for dw in -1i64..=1 {
                    for dd in -1i64..=1 {
                        let c = [h as i64 + dh, w as i64 + dw, d as i64 + dd];
                        if c.iter().any(|&v| v < 0) {
                            continue;
                        }
                        if let Some(r) = grid.find([c[0] as u32, c[1] as u32, c[2] as u32]) {
                            g.push((r as u32, 1.0));
                        }
                    }
                }
            }
            g
        })
        .collect();
    Csr::from_groups(&groups)
}

/// Row in `coarse` of each voxel of `fine` (one level apart).
pub fn parent_rows(fine: &SparseVoxelGrid, coarse: &SparseVoxelGrid) -> Result<Vec<usize>> {
    let shift = (fine.voxel_size[0] / coarse.voxel_size[0]).recip();
    if shift != 2.0 {
        return Err(Error::Contract("parent_rows expects adjacent levels".to_string()));
    }
    fine.coords
        .iter()
        .map(|c| {
            coarse
                .find(c.map(|v| v >> 1))
                .ok_or_else(|| Error::Contract("coarse grid misses a parent voxel".to_string()))
        })
        .collect()
}
