//! DQCK checkpoints: magic, `u32` version, the flat config text, then named
//! `f32` blobs (`u32` name length, name, `u32` rank, `u32` dims, data). All
//! integers are little-endian.
//!
//! Model weights keep their parameter names. Optimizer moments are stored as
//! `adam.m/<name>` and `adam.v/<name>`, progress counters as `train.*` blobs.

use std::path::Path;

use dqformer_core::matrix::Matrix;
use dqformer_core::model::Model;
use dqformer_core::optim::AdamW;
use dqformer_core::train::Trainer;

use crate::config::RunConfig;
use crate::error::{read_file, write_file, Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DQCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const EPOCH: &str = "train.epoch";
const STEP: &str = "train.step";
const BEST_PQ: &str = "train.best_pq";

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl Blob {
    fn from_matrix(name: String, m: &Matrix) -> Self {
        Self {
            name,
            dims: vec![m.rows as u32, m.cols as u32],
            data: m.data.iter().map(|&x| x as f32).collect(),
        }
    }

    fn scalar(name: &str, v: f64) -> Self {
        Self {
            name: name.to_string(),
            dims: vec![],
            data: vec![v as f32],
        }
    }

    fn to_matrix(&self) -> Option<Matrix> {
        let [r, c] = self.dims[..] else { return None };
        Some(Matrix::from_vec(
            r as usize,
            c as usize,
            self.data.iter().map(|&x| x as f64).collect(),
        ))
    }
}

/// Training progress stored alongside the weights.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Progress {
    /// Completed epochs.
    pub epoch: usize,
    /// Best train-set PQ seen so far (negative before any evaluation).
    pub best_pq: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub blobs: Vec<Blob>,
}

impl Checkpoint {
    pub fn from_trainer(config: &RunConfig, trainer: &Trainer, progress: Progress) -> Self {
        let mut blobs = Vec::new();
        let params = &trainer.model.params;
        for (id, name, m) in params.iter() {
            blobs.push(Blob::from_matrix(name.to_string(), m));
            blobs.push(Blob::from_matrix(format!("adam.m/{name}"), &trainer.optimizer.m[id.0]));
            blobs.push(Blob::from_matrix(format!("adam.v/{name}"), &trainer.optimizer.v[id.0]));
        }
        blobs.push(Blob::scalar(EPOCH, progress.epoch as f64));
        blobs.push(Blob::scalar(STEP, trainer.optimizer.step as f64));
        blobs.push(Blob::scalar(BEST_PQ, progress.best_pq));
        Self {
            config: config.clone(),
            blobs,
        }
    }

    fn blob(&self, name: &str) -> Option<&Blob> {
        self.blobs.iter().find(|b| b.name == name)
    }

    fn matrix(&self, name: &str) -> Result<Matrix> {
        self.blob(name)
            .and_then(Blob::to_matrix)
            .ok_or_else(|| Error::Validation(format!("checkpoint lacks a 2-d blob {name:?}")))
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        match self.blob(name) {
            Some(b) if b.data.len() == 1 => Ok(b.data[0] as f64),
            _ => Err(Error::Validation(format!("checkpoint lacks scalar {name:?}"))),
        }
    }

    /// Model built from the stored config with the stored weights.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.model_config()?)?;
        let names: Vec<String> = model.params.iter().map(|(_, n, _)| n.to_string()).collect();
        for name in names {
            model.params.assign(&name, self.matrix(&name)?)?;
        }
        Ok(model)
    }

    /// Trainer with weights, optimizer moments and progress restored.
    pub fn trainer(&self) -> Result<(Trainer, Progress)> {
        let mut trainer = Trainer::new(self.model()?, self.config.train_config())?;
        let mut opt = AdamW::new(trainer.optimizer.config, trainer.model.params.values());
        for (id, name, _) in trainer.model.params.iter() {
            opt.m[id.0] = self.matrix(&format!("adam.m/{name}"))?;
            opt.v[id.0] = self.matrix(&format!("adam.v/{name}"))?;
        }
        opt.step = self.scalar(STEP)? as u64;
        trainer.optimizer = opt;
        let progress = Progress {
            epoch: self.scalar(EPOCH)? as usize,
            best_pq: self.scalar(BEST_PQ)?,
        };
        Ok((trainer, progress))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let text = self.config.dump();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for b in &self.blobs {
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.extend_from_slice(&(b.dims.len() as u32).to_le_bytes());
            for d in &b.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for x in &b.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<(usize, &[u8])> {
            let at = pos;
            let end = at.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| {
                Error::format(path, at, format!("truncated: needed {n} bytes, {} left", bytes.len() - at))
            })?;
            pos = end;
            Ok((at, &bytes[at..end]))
        };
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
        let (_, magic) = take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(path, 0, "bad magic, expected DQCK"));
        }
        let version = u32_at(take(4)?.1);
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = u32_at(take(4)?.1) as usize;
        let (at, text) = take(len)?;
        let text = std::str::from_utf8(text).map_err(|_| Error::format(path, at, "config text is not UTF-8"))?;
        let config = RunConfig::from_toml(text)?;
        let n = u32_at(take(4)?.1) as usize;
        let mut blobs = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = u32_at(take(4)?.1) as usize;
            let (at, name) = take(len)?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| Error::format(path, at, "blob name is not UTF-8"))?;
            let rank = u32_at(take(4)?.1) as usize;
            if rank > 8 {
                return Err(Error::format(path, at, format!("blob {name:?} has rank {rank}")));
            }
            let dims: Vec<u32> = (0..rank).map(|_| take(4).map(|(_, s)| u32_at(s))).collect::<Result<_>>()?;
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                .and_then(|c| c.checked_mul(4))
                .ok_or_else(|| Error::format(path, at, format!("blob {name:?} is too large")))?;
            let (_, raw) = take(count)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            blobs.push(Blob { name, dims, data });
        }
        if pos != bytes.len() {
            return Err(Error::format(path, pos, format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self { config, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> RunConfig {
        RunConfig {
            grid_dims: [32, 32, 8],
            voxel_size: [0.8, 0.8, 0.6],
            base_channels: 4,
            embed_dim: 8,
            head_hidden: 4,
            n_queries: 4,
            ffn_hidden: 8,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_restores_weights_and_progress() {
        let cfg = small_config();
        let model = Model::new(cfg.model_config().unwrap()).unwrap();
        let mut trainer = Trainer::new(model, cfg.train_config()).unwrap();
        trainer.optimizer.step = 17;
        trainer.optimizer.m[0].data[0] = 0.25;
        let progress = Progress { epoch: 3, best_pq: 0.5 };
        let ck = Checkpoint::from_trainer(&cfg, &trainer, progress);
        let back = Checkpoint::decode(&ck.encode(), Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        let (t2, p2) = back.trainer().unwrap();
        assert_eq!(p2, progress);
        assert_eq!(t2.optimizer.step, 17);
        assert_eq!(t2.optimizer.m[0].data[0], 0.25);
        for ((_, _, a), (_, _, b)) in trainer.model.params.iter().zip(t2.model.params.iter()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn corrupt_bytes_are_format_errors() {
        let cfg = small_config();
        let trainer = Trainer::new(Model::new(cfg.model_config().unwrap()).unwrap(), cfg.train_config()).unwrap();
        let bytes = Checkpoint::from_trainer(&cfg, &trainer, Progress::default()).encode();
        let e = Checkpoint::decode(&bytes[..bytes.len() - 3], Path::new("c")).unwrap_err();
        assert!(matches!(e, Error::Format { .. }), "{e}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad, Path::new("c")), Err(Error::Format { offset: 0, .. })));
        bad = bytes;
        bad[4] = 9;
        assert!(matches!(Checkpoint::decode(&bad, Path::new("c")), Err(Error::UnsupportedVersion { .. })));
    }
}
