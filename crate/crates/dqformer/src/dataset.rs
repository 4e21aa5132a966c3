//! Synthetic datasets on disk: one DQPC file per scene plus a JSON manifest.

use std::path::{Path, PathBuf};

use dqformer_core::cloud::{LabelTaxonomy, LabeledPointCloud};
use dqformer_core::synth::{synthesize_scene, SceneRecipe};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{read_file, write_file, Error, Result};
use crate::formats::{read_cloud, write_cloud};

pub const MANIFEST_FILE: &str = "manifest.json";

/// One scene of a manifest. `path` is relative to the manifest's directory
/// unless absolute.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub seed: u64,
    pub n_points: usize,
    pub n_instances: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    /// Directory that relative entry paths resolve against.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let entries: Vec<ManifestEntry> = serde_json::from_slice(&bytes).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        if entries.is_empty() {
            return Err(Error::Validation(format!("{}: manifest lists no scenes", path.display())));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&self.entries).expect("manifest serializes");
        text.push('\n');
        write_file(path, text.as_bytes())
    }

    pub fn scene_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].path)
    }

    /// File stem identifying scene `i` (used to name predictions and plots).
    pub fn scene_name(&self, i: usize) -> String {
        self.entries[i]
            .path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("scene_{i:04}"))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Reads every scene in parallel, in manifest order.
    pub fn read_clouds(&self) -> Result<Vec<LabeledPointCloud>> {
        (0..self.len()).into_par_iter().map(|i| read_cloud(&self.scene_path(i))).collect()
    }
}

/// Writes `count` scenes with seeds `seed + i` into `dir` (which must exist)
/// and returns the manifest, also saved as `dir/manifest.json`.
pub fn synthesize_dataset(
    recipe: &SceneRecipe,
    taxonomy: &LabelTaxonomy,
    count: usize,
    dir: &Path,
) -> Result<Manifest> {
    if count == 0 {
        return Err(Error::Validation("count must be at least 1".to_string()));
    }
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        ));
    }
    let entries = (0..count)
        .into_par_iter()
        .map(|i| {
            let seed = recipe.seed.wrapping_add(i as u64);
            let r = SceneRecipe {
                seed,
                ..recipe.clone()
            };
            let cloud = synthesize_scene(&r, taxonomy).map_err(|e| Error::Validation(format!("scene {i}: {e}")))?;
            let name = PathBuf::from(format!("scene_{i:04}.dqpc"));
            write_cloud(&cloud, &dir.join(&name))?;
            Ok(ManifestEntry {
                path: name,
                seed,
                n_points: cloud.len(),
                n_instances: cloud.instances().len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        root: dir.to_path_buf(),
        entries,
    };
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
