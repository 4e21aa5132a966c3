//! The epoch loop: seeded per-epoch streams, JSON-lines loss log, per-epoch
//! and best-PQ checkpoints, and exact resumption.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dqformer_core::cloud::LabeledPointCloud;
use dqformer_core::model::Model;
use dqformer_core::train::{Losses, PreparedScene, Trainer};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Progress};
use crate::config::{stream_seed, RunConfig, Stream};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_model, EvalOptions};

pub const LAST_CHECKPOINT: &str = "last.dqck";
pub const BEST_CHECKPOINT: &str = "best.dqck";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

/// One line of the training log: mean loss components over the epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_hm")]
    pub l_hm: f64,
    #[serde(rename = "L_mask")]
    pub l_mask: f64,
    #[serde(rename = "L_sem")]
    pub l_sem: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub lr: f64,
    /// Seconds since this run started.
    pub wall_time: f64,
    /// Pooled train-set PQ, on evaluation epochs only.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_pq: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub records: Vec<EpochRecord>,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub progress: Progress,
}

/// Trains on `clouds`, writing artifacts into `out_dir` (created if
/// missing). With `resume`, training continues after the checkpoint's last
/// completed epoch and the log is appended to.
pub fn train(
    cfg: &RunConfig,
    clouds: &[LabeledPointCloud],
    out_dir: &Path,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (mut trainer, mut progress) = match resume {
        Some(ck) => {
            let (mut t, p) = ck.trainer()?;
            t.config = cfg.train_config();
            t.config.validate()?;
            (t, p)
        }
        None => (
            Trainer::new(Model::new(cfg.model_config()?)?, cfg.train_config())?,
            Progress {
                epoch: 0,
                best_pq: -1.0,
            },
        ),
    };
    for (i, c) in clouds.iter().enumerate() {
        crate::evaluation::check_taxonomy(&trainer.model, c, &format!("scene {i}"))?;
    }
    cfg.save(&out_dir.join(CONFIG_FILE))?;

    let augment = cfg.augmentation();
    let fixed: Vec<Option<PreparedScene>> = if augment.is_identity() {
        clouds
            .par_iter()
            .enumerate()
            .map(|(i, c)| prepare(&trainer.model, c, i))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    if augment.is_identity() && fixed.iter().all(Option::is_none) {
        return Err(Error::Validation("every scene is empty".to_string()));
    }

    let log_path = out_dir.join(LOG_FILE);
    let mut log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let mut best = resume.is_some() && best_path.exists();
    let mut records = Vec::new();
    let start = Instant::now();
    let tc = trainer.config.clone();

    for epoch in progress.epoch..tc.epochs {
        let lr = tc.lr_at(epoch);
        let mut order: Vec<usize> = (0..clouds.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, Stream::Data, epoch as u64)));
        let mut sampling = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, Stream::Sampling, epoch as u64));
        let mut aug_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, Stream::Augment, epoch as u64));
        let mut sum = Losses::default();
        let mut n = 0usize;
        for &i in &order {
            let augmented;
            let scene = if augment.is_identity() {
                match &fixed[i] {
                    Some(s) => s,
                    None => continue,
                }
            } else {
                let c = augment.apply(&clouds[i], &mut aug_rng);
                match prepare(&trainer.model, &c, i)? {
                    Some(s) => {
                        augmented = s;
                        &augmented
                    }
                    None => continue,
                }
            };
            let l = trainer.step(scene, lr, &mut sampling).map_err(|e| match e {
                dqformer_core::Error::Numeric(m) => {
                    dqformer_core::Error::Numeric(format!("{m} (epoch {epoch}, scene {i})"))
                }
                e => e,
            })?;
            sum.add(&l);
            n += 1;
        }
        if n == 0 {
            return Err(Error::Validation("every scene is empty".to_string()));
        }
        sum.scale(1.0 / n as f64);
        progress.epoch = epoch + 1;

        let evaluate = cfg.eval_every > 0 && (progress.epoch % cfg.eval_every == 0 || progress.epoch == tc.epochs);
        let train_pq = if evaluate {
            Some(evaluate_model(&trainer.model, clouds, EvalOptions::default())?.report().pq)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            l_hm: sum.hm,
            l_mask: sum.mask,
            l_sem: sum.sem,
            l: sum.total,
            lr,
            wall_time: start.elapsed().as_secs_f64(),
            train_pq,
        };
        log::info!(
            "epoch {epoch}: L {:.4} (hm {:.4}, mask {:.4}, sem {:.4}){}",
            record.l,
            record.l_hm,
            record.l_mask,
            record.l_sem,
            train_pq.map_or(String::new(), |p| format!(", train PQ {:.3}", p))
        );
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e))?;
        records.push(record);

        if let Some(pq) = train_pq {
            if pq > progress.best_pq {
                progress.best_pq = pq;
                Checkpoint::from_trainer(cfg, &trainer, progress).save(&best_path)?;
                best = true;
            }
        }
        Checkpoint::from_trainer(cfg, &trainer, progress).save(&last_path)?;
    }
    log_file.flush().map_err(|e| Error::io(&log_path, e))?;
    if !last_path.exists() {
        Checkpoint::from_trainer(cfg, &trainer, progress).save(&last_path)?;
    }
    Ok(TrainOutcome {
        model: trainer.model,
        records,
        last_checkpoint: last_path,
        best_checkpoint: best.then_some(best_path),
        progress,
    })
}

/// Training inputs of one scene; `None` (with a warning) if no point falls
/// inside the grid.
fn prepare(model: &Model, cloud: &LabeledPointCloud, i: usize) -> Result<Option<PreparedScene>> {
    match PreparedScene::new(cloud, model) {
        Ok(s) => Ok(Some(s)),
        Err(dqformer_core::Error::EmptyScene) => {
            log::warn!("scene {i} has no point inside the grid; skipped");
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}
