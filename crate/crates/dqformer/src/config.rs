//! Flat run configuration: every tunable of synthesis, model and training as
//! one `key = value` table, loadable from TOML with `key=value` overrides.

use std::fmt::Write as _;
use std::path::Path;

use dqformer_core::cloud::LabelTaxonomy;
use dqformer_core::model::ModelConfig;
use dqformer_core::optim::AdamWConfig;
use dqformer_core::synth::{SceneRecipe, ThingRecipe};
use dqformer_core::train::{Augmentation, TrainConfig};
use dqformer_core::voxel::VoxelGridSpec;
use serde::{Deserialize, Serialize};

use crate::error::{read_file, write_file, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,

    pub thing_classes: Vec<String>,
    pub stuff_classes: Vec<String>,

    pub grid_origin: [f64; 3],
    pub voxel_size: [f64; 3],
    pub grid_dims: [usize; 3],
    pub level_scales: Vec<f64>,

    pub base_channels: usize,
    pub embed_dim: usize,
    pub head_hidden: usize,
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
    pub score_thresh: f64,
    pub iou_thresh: f64,

    pub epochs: usize,
    pub lr: f64,
    pub lr_drop_at: f64,
    pub lr_drop: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub s_th: usize,
    pub s_all: usize,
    pub r_match: f64,
    pub queries_per_object: usize,
    pub w_hm: f64,
    pub w_mask: f64,
    pub w_sem: f64,
    pub focal_alpha: f64,
    pub focal_beta: f64,
    pub supervise_initial: bool,
    /// Train-set PQ is evaluated every this many epochs (0 = never) to pick
    /// the best checkpoint.
    pub eval_every: usize,

    pub aug_rotation: bool,
    pub aug_scale: [f64; 2],
    pub aug_flip: bool,

    pub range_xy: f64,
    pub things: Vec<ThingRecipe>,
    pub stuff_density: f64,
    pub walls: [u32; 2],
    pub vegetation: [u32; 2],
    pub dropout: f64,
    pub noise_sigma: f64,
    pub min_gap: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let tax = LabelTaxonomy::synthetic();
        let grid = VoxelGridSpec::default();
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let a = Augmentation::default();
        let r = SceneRecipe::default();
        Self {
            seed: 0,
            thing_classes: tax.thing_classes().to_vec(),
            stuff_classes: tax.stuff_classes().to_vec(),
            grid_origin: grid.origin,
            voxel_size: grid.voxel_size,
            grid_dims: grid.dims,
            level_scales: grid.level_scales,
            base_channels: m.base_channels,
            embed_dim: m.embed_dim,
            head_hidden: m.head_hidden,
            n_queries: m.n_queries,
            theta_th: m.theta_th,
            theta_st: m.theta_st,
            window_m: m.window_m,
            n_blocks: m.n_blocks,
            heads: m.heads,
            ffn_hidden: m.ffn_hidden,
            knn: m.knn,
            range_feature: m.range_feature,
            local_max: m.local_max,
            masked_attention: m.masked_attention,
            score_thresh: m.score_thresh,
            iou_thresh: m.iou_thresh,
            epochs: t.epochs,
            lr: t.lr,
            lr_drop_at: t.lr_drop_at,
            lr_drop: t.lr_drop,
            adam_beta1: t.adam.beta1,
            adam_beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            weight_decay: t.adam.weight_decay,
            s_th: t.s_th,
            s_all: t.s_all,
            r_match: t.r_match,
            queries_per_object: t.queries_per_object,
            w_hm: t.w_hm,
            w_mask: t.w_mask,
            w_sem: t.w_sem,
            focal_alpha: t.focal_alpha,
            focal_beta: t.focal_beta,
            supervise_initial: t.supervise_initial,
            eval_every: 10,
            aug_rotation: a.rotation,
            aug_scale: a.scale,
            aug_flip: a.flip,
            range_xy: r.range_xy,
            things: r.things,
            stuff_density: r.stuff_density,
            walls: r.walls,
            vegetation: r.vegetation,
            dropout: r.dropout,
            noise_sigma: r.noise_sigma,
            min_gap: r.min_gap,
        }
    }
}

/// Named random streams derived from the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init,
    Data,
    Sampling,
    Augment,
}

/// Seed of `stream` at `epoch` (splitmix64 finalizer over the inputs).
pub fn stream_seed(seed: u64, stream: Stream, epoch: u64) -> u64 {
    let mut z = seed
        .wrapping_add((stream as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(epoch.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or the defaults when `None`) and applies `key=value`
    /// overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let table: toml::Table = match path {
            Some(p) => {
                let bytes = read_file(p)?;
                let text = String::from_utf8(bytes).map_err(|_| Error::format(p, 0, "config is not UTF-8"))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        Self::from_table(table, overrides)
    }

    /// Copy of `self` with `key=value` overrides applied.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        Self::from_table(toml::Table::try_from(self).expect("config serializes"), overrides)
    }

    /// Values are parsed as TOML, falling back to a bare string; integers
    /// given for float keys are widened.
    fn from_table(mut table: toml::Table, overrides: &[String]) -> Result<Self> {
        let defaults = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let key = key.trim();
            let raw = raw.trim();
            let mut value = raw
                .parse::<toml::Value>()
                .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
            if let (Some(toml::Value::Float(_)), toml::Value::Integer(i)) = (defaults.get(key), &value) {
                value = toml::Value::Float(*i as f64);
            }
            table.insert(key.to_string(), value);
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// One `key = value` line per field; [`RunConfig::from_toml`] reads it back
    /// to an equal config.
    pub fn dump(&self) -> String {
        let table = toml::Table::try_from(self).expect("config serializes");
        let mut out = String::new();
        for (k, v) in &table {
            writeln!(out, "{k} = {v}").expect("write to string");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.dump().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let tax = self.taxonomy()?;
        self.model_config()?.validate()?;
        self.train_config().validate()?;
        self.augmentation().validate()?;
        self.recipe(self.seed).validate(&tax)?;
        Ok(())
    }

    pub fn taxonomy(&self) -> Result<LabelTaxonomy> {
        Ok(LabelTaxonomy::new(self.thing_classes.clone(), self.stuff_classes.clone())?)
    }

    pub fn grid(&self) -> VoxelGridSpec {
        VoxelGridSpec {
            origin: self.grid_origin,
            voxel_size: self.voxel_size,
            dims: self.grid_dims,
            level_scales: self.level_scales.clone(),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            grid: self.grid(),
            n_things: self.thing_classes.len(),
            n_stuff: self.stuff_classes.len(),
            base_channels: self.base_channels,
            embed_dim: self.embed_dim,
            head_hidden: self.head_hidden,
            n_queries: self.n_queries,
            theta_th: self.theta_th,
            theta_st: self.theta_st,
            window_m: self.window_m,
            n_blocks: self.n_blocks,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            knn: self.knn,
            range_feature: self.range_feature,
            local_max: self.local_max,
            masked_attention: self.masked_attention,
            score_thresh: self.score_thresh,
            iou_thresh: self.iou_thresh,
            init_seed: stream_seed(self.seed, Stream::Init, 0),
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            lr_drop_at: self.lr_drop_at,
            lr_drop: self.lr_drop,
            adam: AdamWConfig {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
            },
            s_th: self.s_th,
            s_all: self.s_all,
            r_match: self.r_match,
            queries_per_object: self.queries_per_object,
            w_hm: self.w_hm,
            w_mask: self.w_mask,
            w_sem: self.w_sem,
            focal_alpha: self.focal_alpha,
            focal_beta: self.focal_beta,
            supervise_initial: self.supervise_initial,
            seed: stream_seed(self.seed, Stream::Sampling, 0),
        }
    }

    pub fn augmentation(&self) -> Augmentation {
        Augmentation {
            rotation: self.aug_rotation,
            scale: self.aug_scale,
            flip: self.aug_flip,
        }
    }

    /// Scene recipe with the given scene seed.
    pub fn recipe(&self, seed: u64) -> SceneRecipe {
        SceneRecipe {
            seed,
            range_xy: self.range_xy,
            things: self.things.clone(),
            stuff_density: self.stuff_density,
            walls: self.walls,
            vegetation: self.vegetation,
            dropout: self.dropout,
            noise_sigma: self.noise_sigma,
            min_gap: self.min_gap,
        }
    }
}
