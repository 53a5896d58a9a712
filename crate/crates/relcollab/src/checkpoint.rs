//! Checkpoint directories.
//!
//! ```text
//! step_N/
//!   arch.json  train_config.json  state.json
//!   general_encoder/ target_encoder/ decoder/
//!     index.json  params.bin  momentum.bin
//! ```
//!
//! Binary files are little-endian `f64`, so a save/load round trip is exact.

use std::fs;
use std::path::{Path, PathBuf};

use relcollab_core::losses::LossBundle;
use relcollab_core::network::{ArchitectureSpec, DualEncoderNet, Group, ParamEntry};
use relcollab_core::trainer::{RngState, TrainConfig, TrainState};
use serde::{Deserialize, Serialize};

use crate::dataset::{read_json, write_json};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StateFile {
    step: u64,
    rng: RngState,
    history: Vec<LossBundle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GroupIndex {
    group: Group,
    len: usize,
    entries: Vec<ParamEntry>,
}

pub fn step_dir(root: &Path, step: u64) -> PathBuf {
    root.join(format!("step_{step}"))
}

fn write_f64s(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::format(path, "length is not a multiple of 8"));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

pub fn save(dir: &Path, state: &TrainState, config: &TrainConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("arch.json"), state.net.spec())?;
    write_json(&dir.join("train_config.json"), config)?;
    let file = StateFile { step: state.step, rng: RngState::capture(&state.rng), history: state.history.clone() };
    write_json(&dir.join("state.json"), &file)?;
    for g in Group::ALL {
        let gd = dir.join(g.key());
        fs::create_dir_all(&gd).map_err(|e| Error::io(&gd, e))?;
        let store = state.net.params(g);
        write_json(&gd.join("index.json"), &GroupIndex { group: g, len: store.len(), entries: store.entries().to_vec() })?;
        write_f64s(&gd.join("params.bin"), store.values())?;
        write_f64s(&gd.join("momentum.bin"), state.optimizer(g).velocity())?;
    }
    Ok(())
}

pub fn load_arch(dir: &Path) -> Result<ArchitectureSpec> {
    read_json(&dir.join("arch.json"))
}

/// Network parameters only.
pub fn load_net(dir: &Path) -> Result<DualEncoderNet> {
    if !dir.join("arch.json").exists() {
        return Err(Error::DatasetMissing(dir.to_path_buf()));
    }
    let spec = load_arch(dir)?;
    let mut net = DualEncoderNet::build_uninit(&spec)?;
    for g in Group::ALL {
        let gd = dir.join(g.key());
        let index: GroupIndex = read_json(&gd.join("index.json"))?;
        if index.entries != net.params(g).entries() {
            return Err(Error::format(gd.join("index.json"), "parameter layout does not match arch.json"));
        }
        net.params_mut(g).load(read_f64s(&gd.join("params.bin"))?)?;
    }
    Ok(net)
}

/// Full training state, including optimizer momentum and RNG position.
pub fn load(dir: &Path) -> Result<(TrainState, TrainConfig)> {
    let net = load_net(dir)?;
    let config: TrainConfig = read_json(&dir.join("train_config.json"))?;
    let file: StateFile = read_json(&dir.join("state.json"))?;
    let mut state = TrainState::from_net(net, &config);
    for g in Group::ALL {
        state.optimizer_mut(g).load_velocity(read_f64s(&dir.join(g.key()).join("momentum.bin"))?)?;
    }
    state.step = file.step;
    state.rng = file.rng.restore();
    state.history = file.history;
    Ok((state, config))
}

/// Checkpoint directories under `root`, sorted by step.
pub fn list(root: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    let Ok(rd) = fs::read_dir(root) else { return Ok(out) };
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name();
        if let Some(n) = name.to_str().and_then(|n| n.strip_prefix("step_")).and_then(|n| n.parse().ok()) {
            out.push((n, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}
