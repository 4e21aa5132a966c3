//! Multi-scale sparse voxel encoder.
//!
//! A shared point MLP is max-pooled into the finest voxels. Each level then
//! runs a block (per-voxel MLP, max over the 3×3×3 voxel neighborhood, mixing
//! layer). The down path max-merges children into parents; the up path copies
//! parent features to children and adds the skip connection. A per-level
//! linear head projects to the embedding width, and V2P interpolation yields
//! point embeddings.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::geometry::{LevelGeometry, SceneGeometry};
use crate::params::{Bound, Linear, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderShape {
    pub point_features: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub n_levels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Block {
    pre: Linear,
    post: Linear,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        Self {
            pre: Linear::new(store, &format!("{name}.pre"), c, c, true),
            post: Linear::new(store, &format!("{name}.post"), 2 * c, c, true),
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, level: &LevelGeometry) -> Var {
        let h = self.pre.forward(tape, p, x);
        let h = tape.relu(h);
        let agg = tape.group_max(h, &level.neighbors);
        let cat = tape.concat_cols(&[x, agg]);
        let y = self.post.forward(tape, p, cat);
        tape.relu(y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub shape: EncoderShape,
    point1: Linear,
    point2: Linear,
    down: Vec<Block>,
    up: Vec<Block>,
    heads: Vec<Linear>,
}

/// Encoder outputs, coarsest level first.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `F_i^v`: `N_v,i × C_e`.
    pub voxel: Vec<Var>,
    /// `F_i^p`: `N_p × C_e`.
    pub point: Vec<Var>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, shape: EncoderShape) -> Self {
        let c = shape.channels;
        let point1 = Linear::new(store, "enc.point1", shape.point_features, c, true);
        let point2 = Linear::new(store, "enc.point2", c, c, true);
        let down = (0..shape.n_levels)
            .map(|l| Block::new(store, &format!("enc.down{l}"), c))
            .collect();
        // no up block at the coarsest level: its down output is reused
        let up = (1..shape.n_levels)
            .map(|l| Block::new(store, &format!("enc.up{l}"), c))
            .collect();
        let heads = (0..shape.n_levels)
            .map(|l| Linear::new(store, &format!("enc.head{l}"), c, shape.embed_dim, true))
            .collect();
        Self {
            shape,
            point1,
            point2,
            down,
            up,
            heads,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, geo: &SceneGeometry) -> EncoderOutput {
        let n = geo.n_levels();
        assert_eq!(n, self.shape.n_levels, "level count");
        let x = tape.constant(geo.point_features.clone());
        let h = self.point1.forward(tape, p, x);
        let h = tape.relu(h);
        let h = self.point2.forward(tape, p, h);
        let h = tape.relu(h);
        let mut x = tape.group_max(h, &geo.stem);

        let mut skips: Vec<Var> = alloc::vec![x; n];
        for l in (0..n).rev() {
            if l + 1 < n {
                let children = geo.levels[l].children.as_ref().expect("children below finest");
                x = tape.group_max(x, children);
            }
            x = self.down[l].forward(tape, p, x, &geo.levels[l]);
            skips[l] = x;
        }

        let mut feats = Vec::with_capacity(n);
        feats.push(skips[0]);
        for l in 1..n {
            let parent = geo.levels[l].parent.clone().expect("parent above coarsest");
            let copied = tape.sparse_mix(feats[l - 1], parent);
            let sum = tape.add(copied, skips[l]);
            feats.push(self.up[l - 1].forward(tape, p, sum, &geo.levels[l]));
        }

        let mut voxel = Vec::with_capacity(n);
        let mut point = Vec::with_capacity(n);
        for l in 0..n {
            let v = self.heads[l].forward(tape, p, feats[l]);
            point.push(tape.sparse_mix(v, geo.levels[l].v2p.clone()));
            voxel.push(v);
        }
        EncoderOutput { voxel, point }
    }
}
