//! Loss assembly and the optimization step.

use alloc::format;
use alloc::string::ToString;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::cloud::LabeledPointCloud;
use crate::error::{Error, Result};
use crate::geometry::{prepare_scene, SceneGeometry};
use crate::loss::{self, FocalSettings, LevelHeatmaps};
use crate::matrix::Matrix;
use crate::model::{Model, QueryMode};
use crate::optim::{AdamW, AdamWConfig};
use crate::targets::{build_center_targets, build_stuff_targets, GroundTruth};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Fraction of the epochs after which the learning rate is multiplied by `lr_drop`.
    pub lr_drop_at: f64,
    pub lr_drop: f64,
    pub adam: AdamWConfig,
    pub s_th: usize,
    pub s_all: usize,
    pub r_match: f64,
    /// Decoded thing queries per ground-truth instance (0 = all matches).
    pub queries_per_object: usize,
    pub w_hm: f64,
    pub w_mask: f64,
    pub w_sem: f64,
    pub focal_alpha: f64,
    pub focal_beta: f64,
    /// Also supervise the masks of the initial queries.
    pub supervise_initial: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            lr: 1e-4,
            lr_drop_at: 0.75,
            lr_drop: 0.1,
            adam: AdamWConfig::default(),
            s_th: 100,
            s_all: 2000,
            r_match: 1.0,
            queries_per_object: 2,
            w_hm: 1.0,
            w_mask: 1.0,
            w_sem: 1.0,
            focal_alpha: 2.0,
            focal_beta: 4.0,
            supervise_initial: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return fail("epochs must be positive");
        }
        if !(self.lr > 0.0) || !(self.lr_drop > 0.0) {
            return fail("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.lr_drop_at) {
            return fail("lr_drop_at must lie in [0, 1]");
        }
        if self.s_th == 0 || self.s_th > self.s_all {
            return fail("need 0 < s_th <= s_all");
        }
        if !(self.r_match > 0.0) {
            return fail("r_match must be positive");
        }
        Ok(())
    }

    /// Learning rate during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drop_epoch = crate::math::round(self.lr_drop_at * self.epochs as f64) as usize;
        if epoch >= drop_epoch {
            self.lr * self.lr_drop
        } else {
            self.lr
        }
    }

    pub fn focal(&self) -> FocalSettings {
        FocalSettings {
            alpha: self.focal_alpha,
            beta: self.focal_beta,
            ..Default::default()
        }
    }
}

/// Global scene augmentation: yaw rotation about the z axis, isotropic
/// scaling and a random flip of the y axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub rotation: bool,
    /// Inclusive scale range; `[1, 1]` disables scaling.
    pub scale: [f64; 2],
    pub flip: bool,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            rotation: false,
            scale: [1.0, 1.0],
            flip: false,
        }
    }
}

impl Augmentation {
    pub fn is_identity(&self) -> bool {
        !self.rotation && !self.flip && self.scale == [1.0, 1.0]
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config("augmentation scale needs 0 < min <= max".to_string()));
        }
        Ok(())
    }

    /// Transformed copy of `cloud`; labels are untouched.
    pub fn apply<R: Rng>(&self, cloud: &LabeledPointCloud, rng: &mut R) -> LabeledPointCloud {
        let yaw = if self.rotation {
            rng.random_range(0.0..2.0 * core::f64::consts::PI)
        } else {
            0.0
        };
        let [lo, hi] = self.scale;
        let s = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let flip = self.flip && rng.random_bool(0.5);
        let (sin, cos) = (crate::math::sin(yaw), crate::math::cos(yaw));
        let mut out = cloud.clone();
        for p in &mut out.positions {
            let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
            let y = if flip { -y } else { y };
            let (x, y) = (cos * x - sin * y, sin * x + cos * y);
            *p = [(s * x) as f32, (s * y) as f32, (s * z) as f32];
        }
        out
    }
}

/// Weight-independent training inputs of one scene.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub geometry: SceneGeometry,
    pub gt: GroundTruth,
    pub center_targets: Vec<Arc<Matrix>>,
    pub stuff_targets: Vec<Arc<Matrix>>,
}

impl PreparedScene {
    pub fn new(cloud: &LabeledPointCloud, model: &Model) -> Result<Self> {
        let cfg = &model.config;
        if cloud.n_thing_classes as usize != cfg.n_things || cloud.n_stuff_classes as usize != cfg.n_stuff {
            return Err(Error::Validation {
                index: 0,
                reason: format!(
                    "cloud has {}+{} classes, model expects {}+{}",
                    cloud.n_thing_classes, cloud.n_stuff_classes, cfg.n_things, cfg.n_stuff
                ),
            });
        }
        let geometry = prepare_scene(cloud, &cfg.grid, cfg.geometry_options())?;
        let gt = GroundTruth::from_cloud(cloud);
        let n = cfg.grid.n_levels();
        let center_targets = (0..n)
            .map(|l| Arc::new(build_center_targets(&gt, &cfg.grid, l, cfg.n_things)))
            .collect();
        let stuff_targets = (0..n).map(|l| Arc::new(build_stuff_targets(cloud, &cfg.grid, l))).collect();
        Ok(Self {
            geometry,
            gt,
            center_targets,
            stuff_targets,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub hm: f64,
    pub mask: f64,
    pub sem: f64,
    pub total: f64,
}

impl Losses {
    pub fn add(&mut self, o: &Losses) {
        self.hm += o.hm;
        self.mask += o.mask;
        self.sem += o.sem;
        self.total += o.total;
    }

    pub fn scale(&mut self, s: f64) {
        self.hm *= s;
        self.mask *= s;
        self.sem *= s;
        self.total *= s;
    }
}

/// Builds the weighted loss of one scene on `tape`; returns the loss node
/// and its component values.
pub fn scene_loss<R: Rng>(
    model: &Model,
    tape: &mut Tape,
    p: &crate::params::Bound,
    scene: &PreparedScene,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(crate::autograd::Var, Losses)> {
    let fwd = model.forward(
        tape,
        p,
        &scene.geometry,
        QueryMode::Training {
            gt: &scene.gt,
            r_match: cfg.r_match,
            per_object: cfg.queries_per_object,
        },
    )?;
    let levels: Vec<LevelHeatmaps> = fwd
        .levels
        .iter()
        .enumerate()
        .map(|(l, lv)| LevelHeatmaps {
            center_logits: lv.center_logits,
            center_target: scene.center_targets[l].clone(),
            stuff_logits: lv.stuff_logits,
            stuff_target: scene.stuff_targets[l].clone(),
        })
        .collect();
    let hm = loss::heatmap_loss(tape, &levels, model.config.n_queries, cfg.focal());
    let sem = loss::semantic_loss(tape, fwd.semantic_logits, &scene.gt);
    let mask = match &fwd.decoder {
        Some(d) => {
            let rows = loss::sample_mask_rows(&fwd.matches, &scene.gt, cfg.s_th, cfg.s_all, rng);
            let stages = if cfg.supervise_initial {
                &d.mask_logits[..]
            } else {
                &d.mask_logits[1..]
            };
            loss::mask_loss(tape, stages, Arc::new(rows))
        }
        None => None,
    };
    let mut values = Losses {
        hm: tape.scalar(hm),
        sem: tape.scalar(sem),
        mask: mask.map_or(0.0, |m| tape.scalar(m)),
        total: 0.0,
    };
    for (name, v) in [("heatmap", values.hm), ("semantic", values.sem), ("mask", values.mask)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} loss is not finite")));
        }
    }
    let mut terms = Vec::new();
    terms.push(tape.scale(hm, cfg.w_hm));
    terms.push(tape.scale(sem, cfg.w_sem));
    if let Some(m) = mask {
        terms.push(tape.scale(m, cfg.w_mask));
    }
    let total = loss::sum(tape, &terms);
    values.total = tape.scalar(total);
    Ok((total, values))
}

/// Optimizer state bundled with the model.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(config.adam, model.params.values());
        Ok(Self {
            model,
            optimizer,
            config,
        })
    }

    /// Forward, backward and one optimizer update on a single scene.
    pub fn step<R: Rng>(&mut self, scene: &PreparedScene, lr: f64, rng: &mut R) -> Result<Losses> {
        let mut tape = Tape::new();
        let p = self.model.params.bind(&mut tape, true);
        let (total, losses) = scene_loss(&self.model, &mut tape, &p, scene, &self.config, rng)?;
        let mut grads = tape.backward(total);
        let g: Vec<Option<Matrix>> = p.vars.iter().map(|&v| grads.take(v)).collect();
        if g.iter().flatten().any(|m| !m.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".to_string()));
        }
        self.optimizer.update(self.model.params.values_mut(), &g, lr);
        Ok(losses)
    }
}
