//! Relation matrix dumps: `relations/step_N/<name>.bin` (`C*C` little-endian
//! `f64`, row-major) with a JSON sidecar `<name>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use relcollab_core::relation::{Matrix, RelationMatrix};
use relcollab_core::trainer::{RelationSite, StepRelations};
use serde::{Deserialize, Serialize};

use crate::checkpoint::read_f64s;
use crate::dataset::{read_json, write_json};
use crate::error::{Error, Result};

/// File stems of the three matrices in a step directory.
pub const GENERAL_AUX: &str = "general_aux";
pub const GENERAL_TARGET: &str = "general_target";
pub const TARGET_TARGET: &str = "target_target";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub channels: usize,
    pub stage: String,
    pub step: u64,
    /// `general` or `target`.
    pub encoder: String,
    /// `auxiliary` or `target`.
    pub input: String,
}

pub fn site_name(site: RelationSite, levels: usize) -> String {
    match site {
        RelationSite::Bottleneck => format!("down{levels}"),
        RelationSite::Stage(l) => format!("conv{l}"),
    }
}

pub fn write_matrix(dir: &Path, stem: &str, m: &RelationMatrix, sidecar: &Sidecar) -> Result<()> {
    let path = dir.join(format!("{stem}.bin"));
    let bytes: Vec<u8> = m.values().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    write_json(&dir.join(format!("{stem}.json")), sidecar)
}

pub fn read_matrix(dir: &Path, stem: &str) -> Result<(RelationMatrix, Sidecar)> {
    let sidecar: Sidecar = read_json(&dir.join(format!("{stem}.json")))?;
    let path = dir.join(format!("{stem}.bin"));
    let values = read_f64s(&path)?;
    let c = sidecar.channels;
    let m = Matrix::new(c, c, values).map_err(|e| Error::format(&path, e))?;
    Ok((RelationMatrix::from_matrix(m)?, sidecar))
}

pub fn write_step(root: &Path, step: u64, rel: &StepRelations, stage: &str) -> Result<()> {
    let dir = root.join(format!("step_{step}"));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let c = rel.general_aux.channels();
    let side = |encoder: &str, input: &str| Sidecar {
        channels: c,
        stage: stage.into(),
        step,
        encoder: encoder.into(),
        input: input.into(),
    };
    write_matrix(&dir, GENERAL_AUX, &rel.general_aux, &side("general", "auxiliary"))?;
    write_matrix(&dir, GENERAL_TARGET, &rel.general_target, &side("general", "target"))?;
    write_matrix(&dir, TARGET_TARGET, &rel.target_target, &side("target", "target"))
}

pub fn read_step(root: &Path, step: u64) -> Result<StepRelations> {
    let dir = root.join(format!("step_{step}"));
    Ok(StepRelations {
        general_aux: read_matrix(&dir, GENERAL_AUX)?.0,
        general_target: read_matrix(&dir, GENERAL_TARGET)?.0,
        target_target: read_matrix(&dir, TARGET_TARGET)?.0,
    })
}

/// Steps with a dump directory under `root`, ascending.
pub fn list_steps(root: &Path) -> Vec<(u64, PathBuf)> {
    let mut out: Vec<(u64, PathBuf)> = fs::read_dir(root)
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| {
            let n = e.file_name().to_str()?.strip_prefix("step_")?.parse().ok()?;
            Some((n, e.path()))
        })
        .collect();
    out.sort();
    out
}
