//! Layered JSON configuration: built-in defaults, then a config file, then
//! command-line overrides. Objects merge key by key; any other value
//! replaces what was there.

use std::path::{Path, PathBuf};

use relcollab_core::data::{FoldMode, PhantomConfig, PreprocessConfig};
use relcollab_core::network::ArchitectureSpec;
use relcollab_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::read_json;
use crate::error::{Error, Result};

/// A preset name (`tiny`, `standard-2d`, `standard-3d`) or a full layer table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchChoice {
    Preset(String),
    Custom(ArchitectureSpec),
}

impl ArchChoice {
    pub fn resolve(&self) -> Result<ArchitectureSpec> {
        match self {
            ArchChoice::Preset(name) => {
                ArchitectureSpec::preset(name).ok_or_else(|| Error::Config(format!("unknown architecture preset '{name}'")))
            }
            ArchChoice::Custom(spec) => Ok(spec.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub arch: ArchChoice,
    /// Dataset directory; relative paths fall back to `$RELCOLLAB_CACHE`.
    pub dataset: PathBuf,
    pub folds: usize,
    pub fold: usize,
    pub fold_mode: FoldMode,
    pub fold_seed: u64,
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
    /// Omits wall-clock timestamps from the run manifest.
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: ArchChoice::Preset("tiny".into()),
            dataset: PathBuf::from("phantom"),
            folds: 5,
            fold: 0,
            fold_mode: FoldMode::Conventional,
            fold_seed: 0,
            preprocess: PreprocessConfig::default(),
            train: TrainConfig { relation_every: 25, ..TrainConfig::default() },
            deterministic: false,
        }
    }
}

pub fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `defaults <- file <- overrides`, then deserialized into `T`.
pub fn layered<T>(defaults: &T, file: Option<&Path>, overrides: Value) -> Result<T>
where
    T: Serialize + serde::de::DeserializeOwned,
{
    let mut v = serde_json::to_value(defaults).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(path) = file {
        let from_file: Value = read_json(path)?;
        merge(&mut v, from_file);
    }
    merge(&mut v, overrides);
    serde_json::from_value(v).map_err(|e| Error::Config(format!("invalid configuration: {e}")))
}

pub fn run_config(file: Option<&Path>, overrides: Value) -> Result<RunConfig> {
    let c: RunConfig = layered(&RunConfig::default(), file, overrides)?;
    c.arch.resolve()?.validate()?;
    c.train.validate()?;
    Ok(c)
}

pub fn phantom_config(file: Option<&Path>, overrides: Value) -> Result<PhantomConfig> {
    let c: PhantomConfig = layered(&PhantomConfig::small_2d(0), file, overrides)?;
    c.validate()?;
    Ok(c)
}
