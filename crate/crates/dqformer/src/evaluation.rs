//! Inference over clouds and dataset-level panoptic evaluation.

use std::path::{Path, PathBuf};

use dqformer_core::cloud::{LabelTaxonomy, LabeledPointCloud};
use dqformer_core::geometry::prepare_scene;
use dqformer_core::metrics::{count_scene, PanopticCounts, PanopticReport};
use dqformer_core::model::{Inference, Model};
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::Manifest;
use crate::error::{write_file, Error, Result};
use crate::formats::{read_prediction, Prediction};

/// Which masks the panoptic output is assembled from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    /// Mask stage (0 = initial queries, `i` = decoder block `i`); `None` is the last block.
    pub stage: Option<usize>,
    pub fuse_masks: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            stage: None,
            fuse_masks: true,
        }
    }
}

/// Errors unless `cloud` uses the model's class counts.
pub fn check_taxonomy(model: &Model, cloud: &LabeledPointCloud, what: &str) -> Result<()> {
    let (t, s) = (model.config.n_things, model.config.n_stuff);
    if cloud.n_thing_classes as usize != t || cloud.n_stuff_classes as usize != s {
        return Err(Error::Validation(format!(
            "{what}: taxonomy has {}+{} classes, model expects {t}+{s}",
            cloud.n_thing_classes, cloud.n_stuff_classes
        )));
    }
    Ok(())
}

/// Runs the model on `cloud` and assembles its panoptic labels.
pub fn predict(model: &Model, cloud: &LabeledPointCloud, opts: EvalOptions) -> Result<(Inference, Prediction)> {
    let geo = prepare_scene(cloud, &model.config.grid, model.config.geometry_options())?;
    let inference = model.infer(&geo)?;
    if let Some(s) = opts.stage {
        if s >= inference.masks.len() && !inference.masks.is_empty() {
            return Err(Error::Config(format!(
                "mask stage {s} out of range (model has {} stages)",
                inference.masks.len()
            )));
        }
    }
    let lab = inference.labeling(opts.stage, model.config.iou_thresh, opts.fuse_masks);
    let prediction = Prediction {
        cloud: cloud.clone(),
        semantic: lab.semantic,
        instance: lab.instance,
    };
    Ok((inference, prediction))
}

/// Pooled counts of the model over `clouds` (scenes evaluated in parallel).
pub fn evaluate_model(model: &Model, clouds: &[LabeledPointCloud], opts: EvalOptions) -> Result<PanopticCounts> {
    let per_scene = clouds
        .par_iter()
        .map(|c| {
            let (_, p) = predict(model, c, opts)?;
            Ok(count_scene(&p.semantic, &p.instance, c)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(pool(model.config.n_things as u16, model.config.n_things + model.config.n_stuff, &per_scene))
}

fn pool(n_things: u16, n_classes: usize, scenes: &[PanopticCounts]) -> PanopticCounts {
    let mut total = PanopticCounts::new(n_things, n_classes);
    for s in scenes {
        total.merge(s);
    }
    total
}

/// Percentage rounded to one decimal.
fn pct(x: f64) -> f64 {
    (x * 1000.0).round() / 10.0
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassJson {
    pub class: u16,
    pub name: String,
    pub thing: bool,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub mean_iou: f64,
}

/// A [`PanopticReport`] in percent, one decimal.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportJson {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq_dagger: f64,
    pub pq_th: f64,
    pub pq_st: f64,
    pub sq_th: f64,
    pub sq_st: f64,
    pub rq_th: f64,
    pub rq_st: f64,
    pub classes: Vec<ClassJson>,
}

impl ReportJson {
    pub fn new(r: &PanopticReport, taxonomy: Option<&LabelTaxonomy>) -> Self {
        let classes = r
            .classes
            .iter()
            .map(|c| ClassJson {
                class: c.class,
                name: taxonomy
                    .and_then(|t| t.class_name(c.class))
                    .map_or_else(|| format!("class_{}", c.class), str::to_string),
                thing: c.thing,
                pq: pct(c.pq),
                sq: pct(c.sq),
                rq: pct(c.rq),
                tp: c.tp,
                fp: c.fp,
                fn_: c.fn_,
                mean_iou: pct(c.mean_iou),
            })
            .collect();
        Self {
            pq: pct(r.pq),
            sq: pct(r.sq),
            rq: pct(r.rq),
            pq_dagger: pct(r.pq_dagger),
            pq_th: pct(r.pq_th),
            pq_st: pct(r.pq_st),
            sq_th: pct(r.sq_th),
            sq_st: pct(r.sq_st),
            rq_th: pct(r.rq_th),
            rq_st: pct(r.rq_st),
            classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SceneJson {
    pub scene: String,
    pub report: ReportJson,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetReport {
    /// Exact pooled report (fractions); not serialized.
    #[serde(skip)]
    pub pooled: PanopticReport,
    pub overall: ReportJson,
    pub scenes: Vec<SceneJson>,
}

impl DatasetReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        write_file(path, text.as_bytes())
    }
}

/// Path of the prediction of manifest scene `i` inside `pred_dir`.
pub fn prediction_path(pred_dir: &Path, manifest: &Manifest, i: usize) -> PathBuf {
    pred_dir.join(format!("{}.dqpr", manifest.scene_name(i)))
}

/// Scores the `<scene>.dqpr` files of `pred_dir` against the manifest's
/// ground truth, pooling counts over scenes.
pub fn evaluate_dataset(
    pred_dir: &Path,
    manifest: &Manifest,
    taxonomy: Option<&LabelTaxonomy>,
) -> Result<DatasetReport> {
    let per_scene = (0..manifest.len())
        .into_par_iter()
        .map(|i| {
            let name = manifest.scene_name(i);
            let path = prediction_path(pred_dir, manifest, i);
            if !path.exists() {
                return Err(Error::Validation(format!(
                    "missing prediction for scene {name} ({})",
                    path.display()
                )));
            }
            let gt = crate::formats::read_cloud(&manifest.scene_path(i))?;
            let pred = read_prediction(&path)?;
            if pred.cloud.n_thing_classes != gt.n_thing_classes || pred.cloud.n_stuff_classes != gt.n_stuff_classes {
                return Err(Error::Validation(format!("scene {name}: prediction and ground truth taxonomies differ")));
            }
            if pred.cloud.len() != gt.len() {
                return Err(Error::Validation(format!(
                    "scene {name}: prediction has {} points, ground truth {}",
                    pred.cloud.len(),
                    gt.len()
                )));
            }
            let counts = count_scene(&pred.semantic, &pred.instance, &gt)?;
            Ok((name, counts))
        })
        .collect::<Result<Vec<_>>>()?;
    let first = &per_scene[0].1;
    if per_scene.iter().any(|(_, c)| c.classes.len() != first.classes.len() || c.n_things != first.n_things) {
        return Err(Error::Validation("scenes of the manifest use different taxonomies".to_string()));
    }
    let counts: Vec<PanopticCounts> = per_scene.iter().map(|(_, c)| c.clone()).collect();
    let pooled = pool(first.n_things, first.classes.len(), &counts).report();
    Ok(DatasetReport {
        overall: ReportJson::new(&pooled, taxonomy),
        pooled,
        scenes: per_scene
            .iter()
            .map(|(name, c)| SceneJson {
                scene: name.clone(),
                report: ReportJson::new(&c.report(), taxonomy),
            })
            .collect(),
    })
}
