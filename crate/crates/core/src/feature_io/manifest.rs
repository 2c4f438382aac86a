use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::format::{read_feature_grid, read_mask, read_prompt_bank, write_atomic, PromptKind};
use super::{FeatureGrid, MaskGrid, PromptBank};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub features: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    pub image_label: u8,
}

/// A few-shot task description. Paths are stored relative to the manifest
/// file and resolved against [`TaskManifest::base_dir`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub support: Vec<PathBuf>,
    pub queries: Vec<QueryEntry>,
    pub prompt_bank: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub induced_prompts: Option<PathBuf>,
    pub resolution: (usize, usize),
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl TaskManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }

    /// Image identifier of a query: its feature file stem.
    pub fn query_id(&self, index: usize) -> String {
        let p = &self.queries[index].features;
        p.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("query_{index}"))
    }
}

fn manifest_err(msg: impl Into<String>) -> Error {
    Error::Manifest(msg.into())
}

fn existing(manifest: &TaskManifest, p: &Path) -> Result<PathBuf> {
    let full = manifest.resolve(p);
    if !full.is_file() {
        return Err(manifest_err(format!(
            "referenced file {} does not exist",
            full.display()
        )));
    }
    Ok(full)
}

/// Parses a manifest and validates every file it references.
pub fn load_manifest(path: &Path) -> Result<TaskManifest> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut manifest: TaskManifest = serde_json::from_slice(&bytes)
        .map_err(|e| manifest_err(format!("{}: {e}", path.display())))?;
    manifest.base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Task::<f32>::load(&manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct QueryData<T> {
    pub id: String,
    pub grid: FeatureGrid<T>,
    pub mask: Option<MaskGrid>,
    pub label: u8,
}

/// Every tensor referenced by a manifest, loaded and cross-checked.
#[derive(Debug, Clone)]
pub struct Task<T> {
    pub support: Vec<FeatureGrid<T>>,
    pub queries: Vec<QueryData<T>>,
    pub bank: PromptBank<T>,
    pub induced: Option<PromptBank<T>>,
    pub resolution: (usize, usize),
}

impl<T: Scalar> Task<T> {
    pub fn load(manifest: &TaskManifest) -> Result<Self> {
        if manifest.support.is_empty() {
            return Err(manifest_err("support set is empty"));
        }
        let (h, w) = manifest.resolution;
        if h == 0 || w == 0 {
            return Err(manifest_err("resolution must be positive"));
        }
        let mut dim: Option<(usize, String)> = None;
        let mut check_dim = |d: usize, what: &Path| -> Result<()> {
            match &dim {
                None => {
                    dim = Some((d, what.display().to_string()));
                    Ok(())
                }
                Some((d0, first)) if *d0 != d => Err(manifest_err(format!(
                    "dimension mismatch: {first} has d={d0}, {} has d={d}",
                    what.display()
                ))),
                _ => Ok(()),
            }
        };

        let mut support = Vec::with_capacity(manifest.support.len());
        for p in &manifest.support {
            let full = existing(manifest, p)?;
            let grid = read_feature_grid::<f32>(&full)?;
            check_dim(grid.dim(), &full)?;
            support.push(grid.cast());
        }

        let mut queries = Vec::with_capacity(manifest.queries.len());
        for (i, q) in manifest.queries.iter().enumerate() {
            if q.image_label > 1 {
                return Err(manifest_err(format!(
                    "query {i}: image_label must be 0 or 1"
                )));
            }
            let full = existing(manifest, &q.features)?;
            let grid = read_feature_grid::<f32>(&full)?;
            check_dim(grid.dim(), &full)?;
            let mask = match &q.mask {
                Some(mp) => {
                    let mfull = existing(manifest, mp)?;
                    let mask = read_mask(&mfull)?;
                    if mask.shape() != manifest.resolution {
                        return Err(manifest_err(format!(
                            "mask {} has shape {:?}, manifest resolution {:?}",
                            mfull.display(),
                            mask.shape(),
                            manifest.resolution
                        )));
                    }
                    if q.image_label == 1 && mask.is_empty() {
                        return Err(manifest_err(format!(
                            "query {i} is labeled anomalous but its mask is empty"
                        )));
                    }
                    Some(mask)
                }
                None => None,
            };
            queries.push(QueryData {
                id: manifest.query_id(i),
                grid: grid.cast(),
                mask,
                label: q.image_label,
            });
        }

        let bank_path = existing(manifest, &manifest.prompt_bank)?;
        let (bank, _) = read_prompt_bank::<f32>(&bank_path)?;
        check_dim(bank.dim(), &bank_path)?;

        let induced = match &manifest.induced_prompts {
            Some(p) => {
                let full = existing(manifest, p)?;
                let (bank, kind) = read_prompt_bank::<f32>(&full)?;
                if kind != PromptKind::Induced {
                    return Err(manifest_err(format!(
                        "{} is not an induced prompt file",
                        full.display()
                    )));
                }
                check_dim(bank.dim(), &full)?;
                Some(bank.cast())
            }
            None => None,
        };

        Ok(Task {
            support,
            queries,
            bank: bank.cast(),
            induced,
            resolution: manifest.resolution,
        })
    }

    pub fn dim(&self) -> usize {
        self.bank.dim()
    }

    /// Patch grid shared by the queries, if they all agree.
    pub fn query_grid(&self) -> Option<(usize, usize)> {
        let first = self.queries.first()?.grid.grid();
        self.queries
            .iter()
            .all(|q| q.grid.grid() == first)
            .then_some(first)
    }
}
