//! Training targets: Gaussian center heatmaps, stuff occupancy maps, ground
//! truth segments and query matching.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::cloud::{LabeledPointCloud, VOID_LABEL};
use crate::math;
use crate::matrix::Matrix;
use crate::query::{QueryKind, QuerySet};
use crate::voxel::VoxelGridSpec;

/// One ground-truth segment: a thing instance or a whole stuff class.
#[derive(Clone, Debug, PartialEq)]
pub struct GtSegment {
    pub class: u16,
    /// Instance id; 0 for stuff.
    pub instance: u32,
    /// Mean BEV position of the member points.
    pub center: [f64; 2],
    /// Largest BEV distance of a member point from `center`.
    pub radius: f64,
    /// Sorted member point indices.
    pub points: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub n_points: usize,
    /// Thing instances (ascending id), then stuff classes (ascending class).
    pub segments: Vec<GtSegment>,
    /// Points that take part in the losses.
    pub valid: Vec<u32>,
    pub semantic: Vec<u16>,
}

impl GroundTruth {
    pub fn from_cloud(cloud: &LabeledPointCloud) -> Self {
        let mut things: BTreeMap<u32, (u16, Vec<u32>)> = BTreeMap::new();
        let mut stuff: BTreeMap<u16, Vec<u32>> = BTreeMap::new();
        let mut valid = Vec::new();
        for (i, (&sem, &inst)) in cloud.semantic.iter().zip(&cloud.instance).enumerate() {
            if sem == VOID_LABEL {
                continue;
            }
            valid.push(i as u32);
            if inst > 0 {
                things.entry(inst).or_insert((sem, Vec::new())).1.push(i as u32);
            } else if !cloud.is_thing(sem) {
                stuff.entry(sem).or_default().push(i as u32);
            }
        }
        let seg = |class, instance, points: Vec<u32>| {
            let n = points.len() as f64;
            let mut c = [0.0; 2];
            for &p in &points {
                c[0] += cloud.positions[p as usize][0] as f64 / n;
                c[1] += cloud.positions[p as usize][1] as f64 / n;
            }
            let radius = points
                .iter()
                .map(|&p| {
                    let q = cloud.positions[p as usize];
                    let (dx, dy) = (q[0] as f64 - c[0], q[1] as f64 - c[1]);
                    math::sqrt(dx * dx + dy * dy)
                })
                .fold(0.0, f64::max);
            GtSegment {
                class,
                instance,
                center: c,
                radius,
                points,
            }
        };
        let mut segments: Vec<GtSegment> = things.into_iter().map(|(id, (c, pts))| seg(c, id, pts)).collect();
        segments.extend(stuff.into_iter().map(|(c, pts)| seg(c, 0, pts)));
        Self {
            n_points: cloud.len(),
            segments,
            valid,
            semantic: cloud.semantic.clone(),
        }
    }

    pub fn things(&self) -> impl Iterator<Item = (usize, &GtSegment)> {
        self.segments.iter().enumerate().filter(|(_, s)| s.instance > 0)
    }
}

/// Pixel of metric BEV position `p` at `level`, if inside the grid.
pub fn bev_cell(spec: &VoxelGridSpec, level: usize, p: [f64; 2]) -> Option<(usize, usize)> {
    let size = spec.level_voxel_size(level);
    let dims = spec.level_dims(level);
    let r = math::floor((p[0] - spec.origin[0]) / size[0]);
    let c = math::floor((p[1] - spec.origin[1]) / size[1]);
    if r < 0.0 || c < 0.0 || r >= dims[0] as f64 || c >= dims[1] as f64 {
        None
    } else {
        Some((r as usize, c as usize))
    }
}

/// Gaussian center targets `(H·W) × N_th` at `level`. Each instance splats
/// `exp(−(Δr² + Δc²) / 2σ²)` around its center cell into its class channel,
/// `σ = max(1, radius_cells / 3)`; overlaps keep the maximum.
pub fn build_center_targets(gt: &GroundTruth, spec: &VoxelGridSpec, level: usize, n_things: usize) -> Matrix {
    let [h, w, _] = spec.level_dims(level);
    let size = spec.level_voxel_size(level);
    let mut y = Matrix::zeros(h * w, n_things);
    for (_, s) in gt.things() {
        let Some((r0, c0)) = bev_cell(spec, level, s.center) else {
            continue;
        };
        let radius_cells = s.radius / size[0].min(size[1]);
        let sigma = f64::max(1.0, radius_cells / 3.0);
        let reach = math::ceil(3.0 * sigma) as i64;
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                let (r, c) = (r0 as i64 + dr, c0 as i64 + dc);
                if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
                    continue;
                }
                let v = math::exp(-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma));
                let idx = (r as usize * w + c as usize) * n_things + s.class as usize;
                if v > y.data[idx] {
                    y.data[idx] = v;
                }
            }
        }
    }
    y
}

/// Stuff occupancy `(H·W) × N_st` at `level`: full-resolution BEV one-hot
/// occupancy averaged over each level pixel's footprint.
pub fn build_stuff_targets(cloud: &LabeledPointCloud, spec: &VoxelGridSpec, level: usize) -> Matrix {
    let n_things = cloud.n_thing_classes as usize;
    let n_stuff = cloud.n_stuff_classes as usize;
    let [fh, fw, _] = spec.dims;
    let mut occ = vec![false; fh * fw * n_stuff];
    for (p, &sem) in cloud.positions.iter().zip(&cloud.semantic) {
        let s = sem as usize;
        if sem == VOID_LABEL || s < n_things || s >= n_things + n_stuff {
            continue;
        }
        if let Some([r, c, _]) = spec.full_index([p[0] as f64, p[1] as f64, p[2] as f64]) {
            occ[(r as usize * fw + c as usize) * n_stuff + s - n_things] = true;
        }
    }
    let shift = spec.level_shift(level);
    let f = 1usize << shift;
    let [h, w, _] = spec.level_dims(level);
    let inv = 1.0 / (f * f) as f64;
    let mut y = Matrix::zeros(h * w, n_stuff);
    for r in 0..fh {
        for c in 0..fw {
            let src = (r * fw + c) * n_stuff;
            let dst = ((r >> shift) * w + (c >> shift)) * n_stuff;
            for k in 0..n_stuff {
                if occ[src + k] {
                    y.data[dst + k] += inv;
                }
            }
        }
    }
    y
}

/// Ground-truth segment for every query: a thing query takes the nearest
/// same-class instance center within `r_match` (several queries may share
/// one instance), a stuff query takes its class segment when it exists.
pub fn match_predictions(queries: &QuerySet, gt: &GroundTruth, r_match: f64) -> Vec<Option<usize>> {
    queries
        .iter()
        .map(|q| match q.kind {
            QueryKind::Thing => {
                let pos = q.pos?;
                let mut best: Option<(f64, usize)> = None;
                for (i, s) in gt.things() {
                    if s.class != q.class {
                        continue;
                    }
                    let (dx, dy) = (s.center[0] - pos[0], s.center[1] - pos[1]);
                    let d = math::sqrt(dx * dx + dy * dy);
                    if d <= r_match && best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, i));
                    }
                }
                best.map(|(_, i)| i)
            }
            QueryKind::Stuff => gt.segments.iter().position(|s| s.instance == 0 && s.class == q.class),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::Query;

    fn spec() -> VoxelGridSpec {
        VoxelGridSpec {
            origin: [0.0, 0.0, 0.0],
            voxel_size: [1.0; 3],
            dims: [16, 16, 2],
            level_scales: vec![0.5, 1.0],
        }
    }

    fn cloud(points: &[([f32; 3], u16, u32)]) -> LabeledPointCloud {
        LabeledPointCloud {
            positions: points.iter().map(|p| p.0).collect(),
            intensity: vec![0.5; points.len()],
            semantic: points.iter().map(|p| p.1).collect(),
            instance: points.iter().map(|p| p.2).collect(),
            n_thing_classes: 2,
            n_stuff_classes: 2,
        }
    }

    #[test]
    fn no_instances_zero_target() {
        let c = cloud(&[([1.0, 1.0, 0.5], 2, 0)]);
        let y = build_center_targets(&GroundTruth::from_cloud(&c), &spec(), 1, 2);
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_instance_has_one_peak() {
        let c = cloud(&[([4.5, 6.5, 0.5], 1, 1)]);
        let y = build_center_targets(&GroundTruth::from_cloud(&c), &spec(), 1, 2);
        let ones: Vec<usize> = (0..y.data.len()).filter(|&i| y.data[i] == 1.0).collect();
        assert_eq!(ones, vec![(4 * 16 + 6) * 2 + 1]);
    }

    #[test]
    fn overlapping_splats_keep_max() {
        let c = cloud(&[([4.5, 6.5, 0.5], 0, 1), ([5.5, 6.5, 0.5], 0, 2)]);
        let y = build_center_targets(&GroundTruth::from_cloud(&c), &spec(), 1, 2);
        assert_eq!(y.get(4 * 16 + 6, 0), 1.0);
        assert_eq!(y.get(5 * 16 + 6, 0), 1.0);
        let e = math::exp(-0.5);
        assert!((y.get(3 * 16 + 6, 0) - e).abs() < 1e-15);
    }

    #[test]
    fn stuff_targets_average_down() {
        // occupied full-res columns (0,0) and (0,1) of the 2×2 block -> 0.5
        let c = cloud(&[([0.5, 0.5, 0.5], 2, 0), ([0.5, 1.5, 0.5], 2, 0)]);
        let full = build_stuff_targets(&c, &spec(), 1);
        assert_eq!(full.get(0, 0), 1.0);
        assert_eq!(full.get(1, 0), 1.0);
        assert_eq!(full.get(16, 0), 0.0);
        assert!((0..full.rows).all(|r| full.get(r, 1) == 0.0));
        let half = build_stuff_targets(&c, &spec(), 0);
        assert_eq!(half.get(0, 0), 0.5);
    }

    fn thing(class: u16, pos: [f64; 2]) -> Query {
        Query {
            embedding: vec![0.0],
            class,
            kind: QueryKind::Thing,
            pos: Some(pos),
            score: 1.0,
        }
    }

    #[test]
    fn matching_rules() {
        let c = cloud(&[
            ([4.0, 4.0, 0.5], 0, 1),
            ([9.0, 9.0, 0.5], 1, 2),
            ([1.0, 1.0, 0.5], 2, 0),
        ]);
        let gt = GroundTruth::from_cloud(&c);
        let qs = QuerySet {
            things: vec![
                thing(0, [4.0, 4.0]),
                thing(0, [4.3, 4.0]),
                thing(1, [4.0, 4.0]),
                thing(0, [14.0, 14.0]),
            ],
            stuff: vec![
                Query {
                    embedding: vec![0.0],
                    class: 2,
                    kind: QueryKind::Stuff,
                    pos: None,
                    score: 1.0,
                },
                Query {
                    embedding: vec![0.0],
                    class: 3,
                    kind: QueryKind::Stuff,
                    pos: None,
                    score: 1.0,
                },
            ],
        };
        let m = match_predictions(&qs, &gt, 2.0);
        assert_eq!(m, vec![Some(0), Some(0), None, None, Some(2), None]);
    }
}
