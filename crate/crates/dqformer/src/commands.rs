//! The four pipeline commands, callable without the argument parser.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{synthesize_dataset, Manifest};
use crate::error::{Error, Result};
use crate::evaluation::{check_taxonomy, evaluate_dataset, predict, prediction_path, DatasetReport, EvalOptions};
use crate::formats::{read_cloud, write_prediction};
use crate::plots::write_scene_heatmaps;
use crate::training::{train, TrainOutcome};

pub const REPORT_FILE: &str = "report.json";
pub const PREDICTIONS_DIR: &str = "predictions";
pub const PLOTS_DIR: &str = "plots";

/// Creates `dir` if missing; its parent must already exist.
fn ensure_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        return Ok(());
    }
    std::fs::create_dir(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `count` synthetic scenes (seeds `cfg.seed + i`) and their manifest.
pub fn cmd_synth(cfg: &RunConfig, count: usize, out_dir: &Path) -> Result<Manifest> {
    ensure_dir(out_dir)?;
    let manifest = synthesize_dataset(&cfg.recipe(cfg.seed), &cfg.taxonomy()?, count, out_dir)?;
    log::info!("wrote {} scenes to {}", manifest.len(), out_dir.display());
    Ok(manifest)
}

/// Trains on the scenes of `manifest`. With `resume`, the stored weights,
/// optimizer state and epoch counter are restored and `cfg` supplies the
/// remaining schedule.
pub fn cmd_train(cfg: &RunConfig, manifest: &Path, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    let manifest = Manifest::load(manifest)?;
    let clouds = manifest.read_clouds()?;
    ensure_dir(out_dir)?;
    let ck = resume.map(Checkpoint::load).transpose()?;
    if let Some(ck) = &ck {
        if ck.config.model_config()? != cfg.model_config()? {
            return Err(Error::Validation("resume config changes the model architecture".to_string()));
        }
    }
    let outcome = train(cfg, &clouds, out_dir, ck.as_ref())?;
    if let Some(r) = outcome.records.last() {
        log::info!("final loss {:.6} after epoch {}", r.l, r.epoch);
    }
    Ok(outcome)
}

/// Options of [`cmd_eval`] beyond the paths.
#[derive(Clone, Debug, Default)]
pub struct EvalCommand {
    /// Overrides applied to the checkpoint's config (inference settings such
    /// as `theta_th`, `score_thresh` or `iou_thresh`).
    pub overrides: Vec<String>,
    pub options: EvalOptions,
    pub plots: bool,
}

/// Predicts every manifest scene into `out_dir/predictions`, scores them and
/// writes `out_dir/report.json` (plus `out_dir/plots` on request).
pub fn cmd_eval(checkpoint: &Path, manifest: &Path, out_dir: &Path, opts: &EvalCommand) -> Result<DatasetReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = ck.config.with_overrides(&opts.overrides)?;
    let mut model = ck.model()?;
    model.config = cfg.model_config()?;
    if model.config != ck.config.model_config()? {
        log::info!("evaluating with overridden inference settings");
    }
    let taxonomy = cfg.taxonomy()?;
    let manifest_data = Manifest::load(manifest)?;
    ensure_dir(out_dir)?;
    let pred_dir = out_dir.join(PREDICTIONS_DIR);
    ensure_dir(&pred_dir)?;
    let plot_dir = out_dir.join(PLOTS_DIR);
    (0..manifest_data.len()).into_par_iter().try_for_each(|i| -> Result<()> {
        let name = manifest_data.scene_name(i);
        let cloud = read_cloud(&manifest_data.scene_path(i))?;
        check_taxonomy(&model, &cloud, &format!("scene {name}"))?;
        let (inference, prediction) = predict(&model, &cloud, opts.options)?;
        write_prediction(&prediction, &prediction_path(&pred_dir, &manifest_data, i))?;
        if opts.plots {
            write_scene_heatmaps(&inference.maps, &plot_dir, &name)?;
        }
        Ok(())
    })?;
    let report = evaluate_dataset(&pred_dir, &manifest_data, Some(&taxonomy))?;
    report.save(&out_dir.join(REPORT_FILE))?;
    log::info!(
        "PQ {:.1}  PQ_th {:.1}  PQ_st {:.1}  SQ {:.1}  RQ {:.1}",
        report.overall.pq,
        report.overall.pq_th,
        report.overall.pq_st,
        report.overall.sq,
        report.overall.rq
    );
    Ok(report)
}

/// Panoptic prediction of one cloud, written as DQPR.
pub fn cmd_infer(checkpoint: &Path, input: &Path, output: &Path, overrides: &[String]) -> Result<PathBuf> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = ck.config.with_overrides(overrides)?;
    let mut model = ck.model()?;
    model.config = cfg.model_config()?;
    let cloud = read_cloud(input)?;
    check_taxonomy(&model, &cloud, &input.display().to_string())?;
    let (_, prediction) = predict(&model, &cloud, EvalOptions::default())?;
    write_prediction(&prediction, output)?;
    Ok(output.to_path_buf())
}
