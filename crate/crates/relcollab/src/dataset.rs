//! Dataset directories: a `manifest.json` plus one image (and optional
//! label) file per sample.

use std::fs;
use std::path::{Path, PathBuf};

use relcollab_core::data::{generate_phantom_dataset, Blob, DomainTag, PhantomConfig, Sample};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::volume;

pub const MANIFEST: &str = "manifest.json";
pub const CACHE_ENV: &str = "RELCOLLAB_CACHE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub tag: DomainTag,
    /// Path relative to the dataset directory.
    pub image: String,
    #[serde(default)]
    pub label: Option<String>,
    /// Overrides the spacing stored in the image file; required for PNG.
    #[serde(default)]
    pub spacing: Option<Vec<f64>>,
    #[serde(default)]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lesions: Vec<Blob>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub target_labeled: usize,
    pub target_unlabeled: usize,
    pub auxiliary: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub config_hash: Option<String>,
    #[serde(default)]
    pub config: Option<serde_json::Value>,
    pub counts: Counts,
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn ids(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.id.as_str()).collect()
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// SHA-256 of the compact JSON encoding.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config).map_err(|e| Error::Config(e.to_string()))?;
    Ok(sha256_hex(&bytes))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

/// Resolves a dataset path: used as given when it exists, otherwise looked
/// up under `$RELCOLLAB_CACHE`.
pub fn resolve_dataset(path: &Path) -> Result<PathBuf> {
    if path.join(MANIFEST).exists() {
        return Ok(path.to_path_buf());
    }
    if path.is_relative() {
        if let Some(cache) = std::env::var_os(CACHE_ENV) {
            let p = Path::new(&cache).join(path);
            if p.join(MANIFEST).exists() {
                return Ok(p);
            }
        }
    }
    Err(Error::DatasetMissing(path.to_path_buf()))
}

/// Generates the phantom and writes it as NIfTI files under `dir`.
pub fn write_phantom_dataset(dir: &Path, config: &PhantomConfig) -> Result<DatasetManifest> {
    let samples = generate_phantom_dataset(config)?;
    for sub in ["images", "labels"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    for s in &samples {
        let image = format!("images/{}.nii", s.id);
        volume::write_image_nifti(&dir.join(&image), &s.image, &s.spacing)?;
        let label = match s.supervised_label() {
            Some(m) => {
                let rel = format!("labels/{}.nii", s.id);
                volume::write_mask_nifti(&dir.join(&rel), m, &s.spacing)?;
                Some(rel)
            }
            None => None,
        };
        entries.push(SampleEntry {
            id: s.id.clone(),
            tag: s.tag,
            image,
            label,
            spacing: None,
            source: s.source.clone(),
            lesions: s.lesions.clone(),
        });
    }
    let c = config.counts;
    let manifest = DatasetManifest {
        format: "relcollab-dataset".into(),
        version: 1,
        seed: Some(config.seed),
        config_hash: Some(config_hash(config)?),
        config: Some(serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?),
        counts: Counts { target_labeled: c.target_labeled, target_unlabeled: c.target_unlabeled, auxiliary: c.auxiliary },
        samples: entries,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::DatasetMissing(dir.to_path_buf()));
    }
    read_json(&path)
}

/// Reads every sample listed in the manifest. Images are float intensities
/// as stored (no preprocessing).
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let manifest = load_manifest(dir)?;
    manifest
        .samples
        .iter()
        .map(|e| {
            let (image, spacing) = volume::read_image(&dir.join(&e.image), e.spacing.as_deref())?;
            let label = match (&e.label, e.tag) {
                (Some(rel), t) if t != DomainTag::TargetUnlabeled => Some(volume::read_mask(&dir.join(rel))?),
                _ => None,
            };
            let mut s = Sample::new(e.id.clone(), image, label, spacing, e.tag)?;
            s.source = e.source.clone();
            s.lesions = e.lesions.clone();
            Ok(s)
        })
        .collect()
}
