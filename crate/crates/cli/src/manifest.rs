//! Dataset manifest: a JSON index of binary image files in one directory.

use std::fs;
use std::path::{Path, PathBuf};

use feanet::field_image::{load_image, load_phase, Dataset, Material, PhysicsKind, Sample};
use feanet::reference_solver::LoadingSpec;
use feanet::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub seed: u64,
    /// Loading image, relative to the manifest directory.
    pub v: String,
    /// Response image, relative to the manifest directory.
    pub u: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub kind: PhysicsKind,
    pub n: usize,
    pub seed: u64,
    pub loading: LoadingSpec,
    pub material: Material,
    /// Phase image shared by every sample, relative to the manifest directory.
    #[serde(default)]
    pub phase: Option<String>,
    pub samples: Vec<SampleEntry>,
}

impl Manifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}

/// A manifest with its samples loaded.
pub struct LoadedDataset {
    pub manifest: Manifest,
    pub dataset: Dataset,
}

/// Accepts either the manifest file or the directory holding it.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn load_dataset(path: &Path) -> Result<LoadedDataset> {
    let file = manifest_path(path);
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&file)?)?;
    if manifest.schema_version != MANIFEST_SCHEMA {
        return Err(Error::Validation(format!(
            "{}: unsupported manifest schema {}",
            file.display(),
            manifest.schema_version
        )));
    }
    let dir = file.parent().unwrap_or(Path::new("."));
    let h = manifest.phase.as_ref().map(|p| load_phase(dir.join(p))).transpose()?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let v = load_image(dir.join(&entry.v))?;
        let u = load_image(dir.join(&entry.u))?;
        if v.kind() != manifest.kind || v.n() != manifest.n {
            return Err(Error::Validation(format!(
                "{}: image is {} n = {}, manifest declares {} n = {}",
                entry.v,
                v.kind(),
                v.n(),
                manifest.kind,
                manifest.n
            )));
        }
        samples.push(Sample::new(v, u, h.clone(), Some(manifest.material))?);
    }
    let dataset = Dataset::new(samples)?;
    Ok(LoadedDataset { manifest, dataset })
}
