//! Decoupled query generation: BEV embeddings, the object-center and
//! stuff-region heads, proposal extraction and multi-level fusion.
//!
//! BEV maps are pixel-major: an `H × W` map with `C` channels is an
//! `(H·W) × C` matrix and pixel `(row, col)` is matrix row `row · W + col`.
//! Rows run along x and columns along y.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::conv::ConvShape;
use crate::geometry::LevelGeometry;
use crate::math;
use crate::matrix::{dot, Matrix};
use crate::params::{Bound, Linear, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum QueryKind {
    Thing,
    Stuff,
}

/// Values of one level's BEV outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct BevMaps {
    pub level: usize,
    pub height: usize,
    pub width: usize,
    /// Metric position of the corner of pixel `(0, 0)`.
    pub origin: [f64; 2],
    /// Metric pixel size along rows (x) and columns (y).
    pub cell: [f64; 2],
    /// `F^bev`: `(H·W) × C_e`.
    pub embedding: Matrix,
    /// `M^th` probabilities: `(H·W) × N_th`.
    pub center: Matrix,
    /// `M^st` probabilities: `(H·W) × N_st`.
    pub stuff: Matrix,
}

impl BevMaps {
    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.origin[0] + (row as f64 + 0.5) * self.cell[0],
            self.origin[1] + (col as f64 + 0.5) * self.cell[1],
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryProposal {
    pub embedding: Vec<f64>,
    pub class: u16,
    pub kind: QueryKind,
    pub level: usize,
    /// `(row, col)` at `level`; things only.
    pub cell: Option<(usize, usize)>,
    /// Metric BEV position; things only.
    pub pos: Option<[f64; 2]>,
    pub score: f64,
}

/// One query after fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub embedding: Vec<f64>,
    /// Global class id.
    pub class: u16,
    pub kind: QueryKind,
    pub pos: Option<[f64; 2]>,
    pub score: f64,
}

/// Things first, then stuff.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct QuerySet {
    pub things: Vec<Query>,
    pub stuff: Vec<Query>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.things.len() + self.stuff.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Query> {
        self.things.iter().chain(&self.stuff)
    }

    pub fn get(&self, i: usize) -> &Query {
        if i < self.things.len() {
            &self.things[i]
        } else {
            &self.stuff[i - self.things.len()]
        }
    }

    pub fn embeddings(&self, dim: usize) -> Matrix {
        let mut m = Matrix::zeros(self.len(), dim);
        for (i, q) in self.iter().enumerate() {
            m.row_mut(i).copy_from_slice(&q.embedding);
        }
        m
    }
}

/// Peaks of a pixel-major heatmap ranked jointly over channels by score,
/// ties broken by `(channel, row, col)`. With `local_max` only cells that
/// are ≥ all 8 neighbors of the same channel are candidates. Candidates
/// below `min_score` are dropped; at most `n_q` are returned.
pub fn select_thing_proposals(maps: &BevMaps, n_q: usize, local_max: bool, min_score: f64) -> Vec<QueryProposal> {
    let (h, w) = (maps.height, maps.width);
    let heat = &maps.center;
    let channels = heat.cols;
    let mut cands: Vec<(f64, usize, usize, usize)> = Vec::new();
    for ch in 0..channels {
        for r in 0..h {
            for c in 0..w {
                let v = heat.get(r * w + c, ch);
                if v < min_score {
                    continue;
                }
                if local_max && !is_local_max(heat, h, w, ch, r, c) {
                    continue;
                }
                cands.push((v, ch, r, c));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
    cands.truncate(n_q);
    cands
        .into_iter()
        .map(|(score, ch, r, c)| QueryProposal {
            embedding: maps.embedding.row(r * w + c).to_vec(),
            class: ch as u16,
            kind: QueryKind::Thing,
            level: maps.level,
            cell: Some((r, c)),
            pos: Some(maps.cell_center(r, c)),
            score,
        })
        .collect()
}

fn is_local_max(heat: &Matrix, h: usize, w: usize, ch: usize, r: usize, c: usize) -> bool {
    let v = heat.get(r * w + c, ch);
    for dr in -1i64..=1 {
        for dc in -1i64..=1 {
            let (rr, cc) = (r as i64 + dr, c as i64 + dc);
            if (dr, dc) == (0, 0) || rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                continue;
            }
            if heat.get(rr as usize * w + cc as usize, ch) > v {
                return false;
            }
        }
    }
    true
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = math::sqrt(dot(a, a));
    let nb = math::sqrt(dot(b, b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Fused thing query together with the proposals it averages.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedThing {
    pub members: Vec<usize>,
    pub query: Query,
}

fn merges(seed: &[f64], other: &[f64], theta: f64) -> bool {
    if theta > 1.0 {
        return false;
    }
    let same = seed.len() == other.len() && seed.iter().zip(other).all(|(a, b)| a.to_bits() == b.to_bits());
    if same {
        return true;
    }
    theta < 1.0 && cosine(seed, other) >= theta
}

/// Buckets proposals by `(class, ⌊x/window⌋, ⌊y/window⌋)` and greedily groups
/// them highest score first: each seed absorbs the remaining proposals whose
/// cosine similarity to it is at least `theta`. `theta > 1` disables fusion;
/// `theta = 1` merges bitwise-identical embeddings only.
pub fn fuse_thing_proposals(proposals: &[QueryProposal], theta: f64, window_m: f64) -> Vec<FusedThing> {
    let mut buckets: BTreeMap<(u16, i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in proposals.iter().enumerate() {
        let pos = p.pos.expect("thing proposal carries a position");
        let key = (
            p.class,
            math::floor(pos[0] / window_m) as i64,
            math::floor(pos[1] / window_m) as i64,
        );
        buckets.entry(key).or_default().push(i);
    }
    let mut out = Vec::new();
    for (_, mut idx) in buckets {
        idx.sort_by(|&a, &b| proposals[b].score.total_cmp(&proposals[a].score).then(a.cmp(&b)));
        let mut taken = vec![false; idx.len()];
        for s in 0..idx.len() {
            if taken[s] {
                continue;
            }
            taken[s] = true;
            let seed = &proposals[idx[s]];
            let mut members = vec![idx[s]];
            for o in s + 1..idx.len() {
                if !taken[o] && merges(&seed.embedding, &proposals[idx[o]].embedding, theta) {
                    taken[o] = true;
                    members.push(idx[o]);
                }
            }
            out.push(fuse_group(proposals, members));
        }
    }
    out.sort_by(|a, b| {
        b.query
            .score
            .total_cmp(&a.query.score)
            .then(a.members[0].cmp(&b.members[0]))
    });
    out
}

fn fuse_group(proposals: &[QueryProposal], members: Vec<usize>) -> FusedThing {
    let dim = proposals[members[0]].embedding.len();
    let n = members.len() as f64;
    let mut emb = vec![0.0; dim];
    let mut pos = [0.0; 2];
    let mut plain = [0.0; 2];
    let mut wsum = 0.0;
    let mut score = f64::NEG_INFINITY;
    for &m in &members {
        let p = &proposals[m];
        for (e, v) in emb.iter_mut().zip(&p.embedding) {
            *e += v / n;
        }
        let q = p.pos.expect("thing position");
        for a in 0..2 {
            pos[a] += p.score * q[a];
            plain[a] += q[a] / n;
        }
        wsum += p.score;
        score = score.max(p.score);
    }
    let pos = if wsum > 0.0 { [pos[0] / wsum, pos[1] / wsum] } else { plain };
    if members.len() == 1 {
        emb.clone_from(&proposals[members[0]].embedding);
    }
    FusedThing {
        query: Query {
            embedding: emb,
            class: proposals[members[0]].class,
            kind: QueryKind::Thing,
            pos: Some(pos),
            score,
        },
        members,
    }
}

/// Stuff classes (indices into the stuff list) whose map reaches `theta`
/// at any level and pixel, ascending.
pub fn existing_stuff(stuff_maps: &[&Matrix], n_stuff: usize, theta: f64) -> Vec<usize> {
    (0..n_stuff)
        .filter(|&c| {
            stuff_maps
                .iter()
                .any(|m| (0..m.rows).any(|r| m.get(r, c) >= theta))
        })
        .collect()
}

/// Mean over levels of the per-level stuff queries for every existing class.
pub fn fuse_stuff_proposals(
    level_queries: &[&Matrix],
    stuff_maps: &[&Matrix],
    theta: f64,
    n_things: usize,
) -> Vec<Query> {
    let n_stuff = level_queries.first().map_or(0, |m| m.rows);
    existing_stuff(stuff_maps, n_stuff, theta)
        .into_iter()
        .map(|c| {
            let dim = level_queries[0].cols;
            let mut emb = vec![0.0; dim];
            for q in level_queries {
                for (e, v) in emb.iter_mut().zip(q.row(c)) {
                    *e += v / level_queries.len() as f64;
                }
            }
            let score = stuff_maps
                .iter()
                .flat_map(|m| (0..m.rows).map(move |r| m.get(r, c)))
                .fold(0.0, f64::max);
            Query {
                embedding: emb,
                class: (n_things + c) as u16,
                kind: QueryKind::Stuff,
                pos: None,
                score,
            }
        })
        .collect()
}

/// Trainable BEV embedding, center head and stuff head.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryHeads {
    embed_dim: usize,
    n_things: usize,
    n_stuff: usize,
    conv1: Vec<ParamId>,
    conv2: Vec<ParamId>,
    gate1: Vec<ParamId>,
    gate2: Vec<ParamId>,
    spatial: Vec<ParamId>,
    center_hidden: Linear,
    center_out: Linear,
    learn: ParamId,
    phi_q: Linear,
    phi_k: Linear,
    phi_v: Linear,
    phi_query: Linear,
    map_gain: ParamId,
    map_bias: ParamId,
}

/// Tape handles of one level's BEV outputs.
#[derive(Clone, Copy, Debug)]
pub struct LevelVars {
    pub embedding: Var,
    pub center_logits: Var,
    pub stuff_logits: Var,
    pub stuff_queries: Var,
}

/// Prior probability of the center heatmap at initialization.
pub const CENTER_PRIOR: f64 = 0.01;

impl QueryHeads {
    /// `depths[l]` is the voxel depth `D_l` of level `l`.
    pub fn new(
        store: &mut ParamStore,
        depths: &[usize],
        embed_dim: usize,
        head_hidden: usize,
        n_things: usize,
        n_stuff: usize,
    ) -> Self {
        let c = embed_dim;
        let gate_hidden = (c / 4).max(1);
        let mut conv1 = Vec::new();
        let mut conv2 = Vec::new();
        let mut gate1 = Vec::new();
        let mut gate2 = Vec::new();
        let mut spatial = Vec::new();
        for (l, &d) in depths.iter().enumerate() {
            conv1.push(store.uniform(&format!("bev{l}.conv1"), 9 * d * c, c, 9 * d * c));
            conv2.push(store.uniform(&format!("bev{l}.conv2"), 9 * c, c, 9 * c));
            gate1.push(store.uniform(&format!("bev{l}.gate1"), c, gate_hidden, c));
            gate2.push(store.uniform(&format!("bev{l}.gate2"), gate_hidden, c, gate_hidden));
            spatial.push(store.uniform(&format!("bev{l}.spatial"), c, 1, c));
        }
        let center_hidden = Linear::new(store, "center.hidden", c, head_hidden, true);
        let center_out = Linear::new(store, "center.out", head_hidden, n_things, true);
        let prior = math::logit(CENTER_PRIOR);
        store
            .get_mut(center_out.bias.expect("center bias"))
            .data
            .fill(prior);
        Self {
            embed_dim,
            n_things,
            n_stuff,
            conv1,
            conv2,
            gate1,
            gate2,
            spatial,
            center_hidden,
            center_out,
            learn: store.uniform("stuff.learn", n_stuff, c, 1),
            phi_q: Linear::new(store, "stuff.phi_q", c, c, true),
            phi_k: Linear::new(store, "stuff.phi_k", c, c, true),
            phi_v: Linear::new(store, "stuff.phi_v", c, c, true),
            phi_query: Linear::new(store, "stuff.phi_query", c, c, true),
            map_gain: store.filled("stuff.map_gain", 1, n_stuff, 1.0),
            map_bias: store.filled("stuff.map_bias", 1, n_stuff, 0.0),
        }
    }

    /// V2B projection fused with the first 3×3 convolution, a second 3×3
    /// convolution, then channel and spatial gates. No biases, so an
    /// all-zero input yields an all-zero embedding.
    pub fn bev_embed(&self, tape: &mut Tape, p: &Bound, voxel: Var, level: usize, geo: &LevelGeometry) -> Var {
        let c = self.embed_dim;
        let x = tape.bev_conv(voxel, p.var(self.conv1[level]), geo.bev.clone());
        let x = tape.relu(x);
        let shape = ConvShape {
            height: geo.bev.height,
            width: geo.bev.width,
            ksize: 3,
            cin: c,
            cout: c,
        };
        let x = tape.conv2d(x, p.var(self.conv2[level]), shape);
        let pooled = tape.mean_rows(x);
        let g = tape.matmul(pooled, p.var(self.gate1[level]));
        let g = tape.relu(g);
        let g = tape.matmul(g, p.var(self.gate2[level]));
        let g = tape.sigmoid(g);
        let x = tape.mul_row(x, g);
        let s = tape.matmul(x, p.var(self.spatial[level]));
        let s = tape.sigmoid(s);
        tape.mul_col(x, s)
    }

    /// Center heatmap logits, `(H·W) × N_th`.
    /// Per-pixel 1×1 convolutions; spatial context comes from the embedding.
    pub fn center_head(&self, tape: &mut Tape, p: &Bound, emb: Var) -> Var {
        let h = self.center_hidden.forward(tape, p, emb);
        let h = tape.relu(h);
        self.center_out.forward(tape, p, h)
    }

    /// Stuff-region logits `(H·W) × N_st` and stuff queries `N_st × C_e`.
    pub fn stuff_head(&self, tape: &mut Tape, p: &Bound, emb: Var) -> (Var, Var) {
        let learn = p.var(self.learn);
        let q = self.phi_q.forward(tape, p, learn);
        let k = self.phi_k.forward(tape, p, emb);
        let v = self.phi_v.forward(tape, p, emb);
        let at = tape.matmul_t(k, q);
        let at = tape.scale(at, 1.0 / math::sqrt(self.embed_dim as f64));
        let logits = tape.mul_row(at, p.var(self.map_gain));
        let logits = tape.add_row(logits, p.var(self.map_bias));
        let a = tape.transpose(at);
        let attn = tape.softmax_rows(a);
        let pooled = tape.matmul(attn, v);
        let queries = self.phi_query.forward(tape, p, pooled);
        (logits, queries)
    }

    pub fn level(&self, tape: &mut Tape, p: &Bound, voxel: Var, level: usize, geo: &LevelGeometry) -> LevelVars {
        let embedding = self.bev_embed(tape, p, voxel, level, geo);
        let center_logits = self.center_head(tape, p, embedding);
        let (stuff_logits, stuff_queries) = self.stuff_head(tape, p, embedding);
        LevelVars {
            embedding,
            center_logits,
            stuff_logits,
            stuff_queries,
        }
    }

    pub fn n_things(&self) -> usize {
        self.n_things
    }

    pub fn n_stuff(&self) -> usize {
        self.n_stuff
    }
}
