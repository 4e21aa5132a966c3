//! Per-scene geometry that does not depend on weights: voxel grids at every
//! level, neighborhoods, parent links, V2P weights and BEV layouts. Built
//! once per scene and reused across training steps.

use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::cloud::LabeledPointCloud;
use crate::conv::BevLayout;
use crate::decoder::positional_encoding;
use crate::error::{Error, Result};
use crate::matrix::{Csr, Matrix};
use crate::voxel::{self, SparseVoxelGrid, VoxelGridSpec};

#[derive(Clone, Debug)]
pub struct LevelGeometry {
    /// Occupied voxels; features left empty.
    pub grid: SparseVoxelGrid,
    /// 27-neighborhood of every voxel.
    pub neighbors: Csr,
    /// For every voxel, its children one level finer. `None` at the finest level.
    pub children: Option<Csr>,
    /// For every voxel, its parent one level coarser. `None` at the coarsest level.
    pub parent: Option<Arc<Csr>>,
    /// Point ← voxel inverse-distance weights.
    pub v2p: Arc<Csr>,
    pub bev: Arc<BevLayout>,
}

impl LevelGeometry {
    pub fn pixels(&self) -> usize {
        self.bev.height * self.bev.width
    }
}

#[derive(Clone, Debug)]
pub struct SceneGeometry {
    pub positions: Vec<[f64; 3]>,
    /// Per-point input representation.
    pub point_features: Matrix,
    /// For every finest-level voxel, its member points.
    pub stem: Csr,
    /// Coarsest level first.
    pub levels: Vec<LevelGeometry>,
    /// Point-wise positional encoding.
    pub positional: Matrix,
}

impl SceneGeometry {
    pub fn n_points(&self) -> usize {
        self.positions.len()
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn finest(&self) -> &LevelGeometry {
        self.levels.last().expect("at least one level")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometryOptions {
    pub knn: usize,
    pub range_feature: bool,
    pub embed_dim: usize,
}

pub fn prepare_scene(
    cloud: &LabeledPointCloud,
    spec: &VoxelGridSpec,
    opts: GeometryOptions,
) -> Result<SceneGeometry> {
    spec.validate()?;
    let positions = cloud.positions_f64();
    prepare_points(&positions, &cloud.intensity, spec, opts)
}

pub fn prepare_points(
    positions: &[[f64; 3]],
    intensity: &[f32],
    spec: &VoxelGridSpec,
    opts: GeometryOptions,
) -> Result<SceneGeometry> {
    let n_levels = spec.n_levels();
    let grids: Vec<SparseVoxelGrid> = (0..n_levels)
        .map(|l| voxel::voxelize_points(positions, spec, l))
        .collect();
    if grids[0].n_voxels() == 0 {
        return Err(Error::EmptyScene);
    }
    let finest = &grids[n_levels - 1];
    let point_features =
        voxel::point_representation(positions, intensity, finest, spec.range_xy(), opts.range_feature)?;
    let stem = finest.members();

    let mut levels = Vec::with_capacity(n_levels);
    for (l, grid) in grids.iter().enumerate() {
        let children = if l + 1 < n_levels {
            let parents = voxel::parent_rows(&grids[l + 1], grid)?;
            let mut groups: Vec<Vec<(u32, f64)>> = alloc::vec![Vec::new(); grid.n_voxels()];
            for (child, &p) in parents.iter().enumerate() {
                groups[p].push((child as u32, 1.0));
            }
            Some(Csr::from_groups(&groups))
        } else {
            None
        };
        let parent = if l > 0 {
            let parents = voxel::parent_rows(grid, &grids[l - 1])?;
            let groups: Vec<Vec<(u32, f64)>> =
                parents.iter().map(|&p| alloc::vec![(p as u32, 1.0)]).collect();
            Some(Arc::new(Csr::from_groups(&groups)))
        } else {
            None
        };
        let bev = BevLayout {
            height: grid.dims[0],
            width: grid.dims[1],
            depth: grid.dims[2],
            cells: grid.coords.clone(),
        };
        levels.push(LevelGeometry {
            neighbors: voxel::neighbor_groups(grid),
            children,
            parent,
            v2p: Arc::new(voxel::v2p_weights(grid, positions, opts.knn)?),
            bev: Arc::new(bev),
            grid: grid.clone(),
        });
    }
    Ok(SceneGeometry {
        positions: positions.to_vec(),
        point_features,
        stem,
        levels,
        positional: positional_encoding(positions, opts.embed_dim, spec.range_xy()),
    })
}
