//! The full network: encoder, query generator, mask decoder and the
//! auxiliary semantic head, with training and inference forward passes.

use alloc::string::ToString;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::decoder::{Decoder, DecoderOutput, PointFeatures};
use crate::encoder::{Encoder, EncoderOutput, EncoderShape};
use crate::error::{Error, Result};
use crate::geometry::{GeometryOptions, SceneGeometry};
use crate::math;
use crate::matrix::{Csr, Matrix};
use crate::panoptic::{self, PanopticLabeling};
use crate::params::{Bound, Linear, ParamStore};
use crate::query::{self, BevMaps, LevelVars, Query, QueryKind, QueryProposal, QuerySet};
use crate::targets::{self, GroundTruth};
use crate::voxel::{VoxelGridSpec, POINT_FEATURES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid: VoxelGridSpec,
    pub n_things: usize,
    pub n_stuff: usize,
    /// Encoder width.
    pub base_channels: usize,
    /// Query / point embedding width `C_e`.
    pub embed_dim: usize,
    /// Hidden width of the center head.
    pub head_hidden: usize,
    /// Proposals taken per level.
    pub n_queries: usize,
    pub theta_th: f64,
    pub theta_st: f64,
    pub window_m: f64,
    pub n_blocks: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub knn: usize,
    pub range_feature: bool,
    pub local_max: bool,
    pub masked_attention: bool,
    /// Minimum center score of an inference proposal.
    pub score_thresh: f64,
    pub iou_thresh: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: VoxelGridSpec::default(),
            n_things: 3,
            n_stuff: 3,
            base_channels: 32,
            embed_dim: 64,
            head_hidden: 32,
            n_queries: 150,
            theta_th: 0.85,
            theta_st: 0.5,
            window_m: 1.0,
            n_blocks: 3,
            heads: 1,
            ffn_hidden: 256,
            knn: 3,
            range_feature: true,
            local_max: true,
            masked_attention: true,
            score_thresh: 0.3,
            iou_thresh: 0.5,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.grid.n_levels() < 2 {
            return fail("at least two grid levels are needed");
        }
        if self.n_things == 0 || self.n_stuff == 0 {
            return fail("need at least one thing and one stuff class");
        }
        if self.embed_dim < 8 {
            return fail("embed_dim must be at least 8");
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail("heads must divide embed_dim");
        }
        if self.n_queries == 0 || self.n_blocks == 0 || self.knn == 0 {
            return fail("n_queries, n_blocks and knn must be positive");
        }
        if self.base_channels == 0 || self.head_hidden == 0 || self.ffn_hidden == 0 {
            return fail("layer widths must be positive");
        }
        if !(self.theta_th > 0.0) {
            return fail("theta_th must be positive (values above 1 disable fusion)");
        }
        if !(self.theta_st > 0.0 && self.theta_st < 1.0) {
            return fail("theta_st must lie in (0, 1)");
        }
        if !(self.window_m > 0.0) {
            return fail("window_m must be positive");
        }
        if !(self.iou_thresh > 0.0 && self.iou_thresh <= 1.0) {
            return fail("iou_thresh must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.score_thresh) {
            return fail("score_thresh must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn geometry_options(&self) -> GeometryOptions {
        GeometryOptions {
            knn: self.knn,
            range_feature: self.range_feature,
            embed_dim: self.embed_dim,
        }
    }

    /// Point-embedding level read by decoder block `i`: the levels coarser
    /// than full resolution in order, the last one repeated if needed.
    pub fn block_level(&self, i: usize) -> usize {
        i.min(self.grid.n_levels() - 2)
    }
}

/// How the thing queries of a forward pass are chosen.
#[derive(Clone, Copy, Debug)]
pub enum QueryMode<'a> {
    /// Score-thresholded proposals and existing stuff classes.
    Inference,
    /// Proposals plus one seed per ground-truth center and level; only thing
    /// queries that match the ground truth are decoded; every stuff class is
    /// decoded. At most `per_object` thing queries (highest score first) are
    /// kept per ground-truth instance; 0 keeps all.
    Training {
        gt: &'a GroundTruth,
        r_match: f64,
        per_object: usize,
    },
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub encoder: EncoderOutput,
    pub levels: Vec<LevelVars>,
    pub maps: Vec<BevMaps>,
    pub queries: QuerySet,
    /// `None` when no query survived.
    pub decoder: Option<DecoderOutput>,
    pub semantic_logits: Var,
    /// Ground-truth segment of every decoded query (training only).
    pub matches: Vec<Option<usize>>,
}

/// Inference result with the soft masks of every decoder stage.
#[derive(Clone, Debug)]
pub struct Inference {
    pub maps: Vec<BevMaps>,
    pub queries: QuerySet,
    /// Index 0 from the initial queries, then one per block; rows follow
    /// `queries` (things, then stuff).
    pub masks: Vec<Matrix>,
    /// Most likely stuff class of every point.
    pub fallback: Vec<u16>,
}

impl Inference {
    /// Panoptic labels from the masks of `stage` (default: last block).
    pub fn labeling(&self, stage: Option<usize>, iou_thresh: f64, fuse: bool) -> PanopticLabeling {
        let qs: Vec<Query> = self.queries.iter().cloned().collect();
        if qs.is_empty() {
            return panoptic::assemble(&Matrix::zeros(0, self.fallback.len()), &qs, &self.fallback);
        }
        let m = &self.masks[stage.unwrap_or(self.masks.len() - 1)];
        if fuse {
            let (fm, fq) = panoptic::fuse_masks(m, &qs, iou_thresh);
            panoptic::assemble(&fm, &fq, &self.fallback)
        } else {
            panoptic::assemble(m, &qs, &self.fallback)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    encoder: Encoder,
    heads: query::QueryHeads,
    decoder: Decoder,
    sem1: Linear,
    sem2: Linear,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(config.init_seed);
        let n_levels = config.grid.n_levels();
        let point_features = if config.range_feature {
            POINT_FEATURES
        } else {
            POINT_FEATURES - 1
        };
        let encoder = Encoder::new(
            &mut params,
            EncoderShape {
                point_features,
                channels: config.base_channels,
                embed_dim: config.embed_dim,
                n_levels,
            },
        );
        let depths: Vec<usize> = (0..n_levels).map(|l| config.grid.level_dims(l)[2]).collect();
        let heads = query::QueryHeads::new(
            &mut params,
            &depths,
            config.embed_dim,
            config.head_hidden,
            config.n_things,
            config.n_stuff,
        );
        let decoder = Decoder::new(
            &mut params,
            config.embed_dim,
            config.n_blocks,
            config.heads,
            config.ffn_hidden,
        );
        let n_classes = config.n_things + config.n_stuff;
        let sem1 = Linear::new(&mut params, "sem.hidden", config.embed_dim, config.embed_dim, true);
        let sem2 = Linear::new(&mut params, "sem.out", config.embed_dim, n_classes, true);
        Ok(Self {
            config,
            params,
            encoder,
            heads,
            decoder,
            sem1,
            sem2,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, geo: &SceneGeometry, mode: QueryMode<'_>) -> Result<ForwardPass> {
        let cfg = &self.config;
        let enc = self.encoder.forward(tape, p, geo);
        let n_levels = geo.n_levels();
        let mut levels = Vec::with_capacity(n_levels);
        let mut maps = Vec::with_capacity(n_levels);
        for l in 0..n_levels {
            let lv = self.heads.level(tape, p, enc.voxel[l], l, &geo.levels[l]);
            let size = cfg.grid.level_voxel_size(l);
            maps.push(BevMaps {
                level: l,
                height: geo.levels[l].bev.height,
                width: geo.levels[l].bev.width,
                origin: [cfg.grid.origin[0], cfg.grid.origin[1]],
                cell: [size[0], size[1]],
                embedding: tape.value(lv.embedding).clone(),
                center: tape.value(lv.center_logits).map(math::sigmoid),
                stuff: tape.value(lv.stuff_logits).map(math::sigmoid),
            });
            levels.push(lv);
        }

        // thing proposals
        let min_score = match mode {
            QueryMode::Inference => cfg.score_thresh,
            QueryMode::Training { .. } => 0.0,
        };
        let mut proposals: Vec<QueryProposal> = Vec::new();
        for m in &maps {
            proposals.extend(query::select_thing_proposals(m, cfg.n_queries, cfg.local_max, min_score));
        }
        if let QueryMode::Training { gt, .. } = mode {
            for (_, s) in gt.things() {
                for m in &maps {
                    let Some((r, c)) = targets::bev_cell(&cfg.grid, m.level, s.center) else {
                        continue;
                    };
                    let pix = r * m.width + c;
                    proposals.push(QueryProposal {
                        embedding: m.embedding.row(pix).to_vec(),
                        class: s.class,
                        kind: QueryKind::Thing,
                        level: m.level,
                        cell: Some((r, c)),
                        pos: Some(s.center),
                        score: m.center.get(pix, s.class as usize),
                    });
                }
            }
        }
        let mut fused = query::fuse_thing_proposals(&proposals, cfg.theta_th, cfg.window_m);

        let mut matches = Vec::new();
        let stuff_classes: Vec<usize> = match mode {
            QueryMode::Inference => {
                let st: Vec<&Matrix> = maps.iter().map(|m| &m.stuff).collect();
                query::existing_stuff(&st, cfg.n_stuff, cfg.theta_st)
            }
            QueryMode::Training { gt, r_match, per_object } => {
                let probe = QuerySet {
                    things: fused.iter().map(|f| f.query.clone()).collect(),
                    stuff: Vec::new(),
                };
                let m = targets::match_predictions(&probe, gt, r_match);
                // fused queries come sorted by score
                let mut taken = vec![0usize; gt.segments.len()];
                let mut keep = Vec::new();
                for (f, mm) in fused.into_iter().zip(m) {
                    let Some(g) = mm else { continue };
                    if per_object > 0 && taken[g] >= per_object {
                        continue;
                    }
                    taken[g] += 1;
                    matches.push(mm);
                    keep.push(f);
                }
                fused = keep;
                (0..cfg.n_stuff).collect()
            }
        };

        // thing query embeddings: gather proposal pixels, then average groups
        let mut parts = Vec::new();
        let mut thing_var = None;
        if !fused.is_empty() {
            let mut by_level: Vec<Vec<usize>> = vec![Vec::new(); n_levels];
            let mut row_of = vec![(0usize, 0usize); proposals.len()];
            for (i, pr) in proposals.iter().enumerate() {
                let (r, c) = pr.cell.expect("thing cell");
                row_of[i] = (pr.level, by_level[pr.level].len());
                by_level[pr.level].push(r * maps[pr.level].width + c);
            }
            let mut offsets = vec![0usize; n_levels];
            let mut gathered = Vec::new();
            let mut total = 0;
            for l in 0..n_levels {
                offsets[l] = total;
                if !by_level[l].is_empty() {
                    gathered.push(tape.gather_rows(levels[l].embedding, &by_level[l]));
                    total += by_level[l].len();
                }
            }
            let all = if gathered.len() == 1 { gathered[0] } else { tape.concat_rows(&gathered) };
            let groups: Vec<Vec<(u32, f64)>> = fused
                .iter()
                .map(|f| {
                    let w = 1.0 / f.members.len() as f64;
                    f.members
                        .iter()
                        .map(|&m| {
                            let (l, k) = row_of[m];
                            ((offsets[l] + k) as u32, w)
                        })
                        .collect()
                })
                .collect();
            let v = tape.sparse_mix(all, Arc::new(Csr::from_groups(&groups)));
            thing_var = Some(v);
            parts.push(v);
        }
        if !stuff_classes.is_empty() {
            let stacked = if n_levels == 1 {
                levels[0].stuff_queries
            } else {
                let sq: Vec<Var> = levels.iter().map(|l| l.stuff_queries).collect();
                tape.concat_rows(&sq)
            };
            let w = 1.0 / n_levels as f64;
            let groups: Vec<Vec<(u32, f64)>> = stuff_classes
                .iter()
                .map(|&c| (0..n_levels).map(|l| ((l * cfg.n_stuff + c) as u32, w)).collect())
                .collect();
            parts.push(tape.sparse_mix(stacked, Arc::new(Csr::from_groups(&groups))));
        }

        let mut queries = QuerySet::default();
        if let Some(v) = thing_var {
            let vals = tape.value(v);
            for (i, f) in fused.iter().enumerate() {
                let mut q = f.query.clone();
                q.embedding = vals.row(i).to_vec();
                queries.things.push(q);
            }
        }
        if !stuff_classes.is_empty() {
            let vals = tape.value(*parts.last().expect("stuff part"));
            for (i, &c) in stuff_classes.iter().enumerate() {
                let score = maps
                    .iter()
                    .flat_map(|m| (0..m.stuff.rows).map(move |r| m.stuff.get(r, c)))
                    .fold(0.0, f64::max);
                queries.stuff.push(Query {
                    embedding: vals.row(i).to_vec(),
                    class: (cfg.n_things + c) as u16,
                    kind: QueryKind::Stuff,
                    pos: None,
                    score,
                });
            }
        }
        if let QueryMode::Training { gt, r_match, .. } = mode {
            let stuff_only = QuerySet {
                things: Vec::new(),
                stuff: queries.stuff.clone(),
            };
            matches.extend(targets::match_predictions(&stuff_only, gt, r_match));
        }

        let finest = enc.point[n_levels - 1];
        let embedding = tape.add_const(finest, &geo.positional);
        let decoder = if parts.is_empty() {
            None
        } else {
            let q0 = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) };
            let feats: Vec<PointFeatures> = (0..cfg.n_blocks)
                .map(|i| {
                    let l = cfg.block_level(i);
                    PointFeatures::Voxels(enc.voxel[l], geo.levels[l].v2p.clone())
                })
                .collect();
            Some(self.decoder.forward(tape, p, q0, &feats, embedding, cfg.masked_attention)?)
        };

        let h = self.sem1.forward(tape, p, finest);
        let h = tape.relu(h);
        let semantic_logits = self.sem2.forward(tape, p, h);

        Ok(ForwardPass {
            encoder: enc,
            levels,
            maps,
            queries,
            decoder,
            semantic_logits,
            matches,
        })
    }

    pub fn infer(&self, geo: &SceneGeometry) -> Result<Inference> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let fwd = self.forward(&mut tape, &p, geo, QueryMode::Inference)?;
        let masks = match &fwd.decoder {
            Some(d) => d
                .mask_logits
                .iter()
                .map(|&v| tape.value(v).map(math::sigmoid))
                .collect(),
            None => Vec::new(),
        };
        let sem = tape.value(fwd.semantic_logits);
        let nt = self.config.n_things;
        let fallback = (0..sem.rows)
            .map(|r| {
                let row = &sem.row(r)[nt..];
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                (nt + best) as u16
            })
            .collect();
        Ok(Inference {
            maps: fwd.maps,
            queries: fwd.queries,
            masks,
            fallback,
        })
    }
}
