//! Run directories.
//!
//! ```text
//! config.json  manifest.json  losses.jsonl
//! checkpoints/step_N/  relations/step_N/  eval/metrics.csv  eval/summary.json
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use relcollab_core::metrics::MetricReport;
use relcollab_core::trainer::{Observer, StepOutput, StepRelations, TrainConfig, TrainState};
use relcollab_core::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::write_json;
use crate::error::{Error, Result};
use crate::relations;

pub const CONFIG: &str = "config.json";
pub const MANIFEST: &str = "manifest.json";
pub const LOSSES: &str = "losses.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub train: u64,
    pub fold: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config: RunConfig,
    pub seeds: Seeds,
    pub toolkit_version: String,
    /// SHA-256 of input files, keyed by role.
    pub inputs: Vec<(String, String)>,
    pub started_unix: Option<u64>,
    pub finished_unix: Option<u64>,
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// One line of `losses.jsonl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub seg: f64,
    pub rc_general: f64,
    pub rc_target: f64,
    #[serde(rename = "lambda_G")]
    pub lambda_g: f64,
    #[serde(rename = "lambda_T")]
    pub lambda_t: f64,
}

pub fn read_losses(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e)))
        .collect()
}

pub fn write_report(dir: &Path, report: &MetricReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("metrics.csv");
    fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    write_json(&dir.join("summary.json"), &report.summary())
}

/// Training observer that persists everything into a run directory. IO
/// failures abort training; the original error is kept in `failure`.
pub struct RunWriter {
    dir: PathBuf,
    config: TrainConfig,
    stage: String,
    losses: BufWriter<File>,
    pub failure: Option<Error>,
}

impl RunWriter {
    pub fn create(dir: &Path, config: &TrainConfig, stage: String) -> Result<Self> {
        for sub in ["checkpoints", "relations", "eval"] {
            let p = dir.join(sub);
            if p.exists() {
                fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOSSES);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { dir: dir.to_path_buf(), config: config.clone(), stage, losses: BufWriter::new(file), failure: None })
    }

    fn keep(&mut self, r: Result<()>, what: &str, step: u64) -> Result<(), CoreError> {
        r.map_err(|e| {
            let msg = format!("{what} failed at step {step}; outputs up to the previous step are intact in {}: {e}", self.dir.display());
            self.failure = Some(e);
            CoreError::Invalid(msg)
        })
    }
}

impl Observer for RunWriter {
    fn on_step(&mut self, state: &TrainState, out: &StepOutput) -> Result<(), CoreError> {
        let l = out.losses;
        let rec = LossRecord {
            step: state.step,
            seg: l.seg,
            rc_general: l.rc_general,
            rc_target: l.rc_target,
            lambda_g: l.lambda_g,
            lambda_t: l.lambda_t,
        };
        let line = serde_json::to_string(&rec).expect("plain numbers serialize");
        let path = self.dir.join(LOSSES);
        let r = writeln!(self.losses, "{line}").and_then(|_| self.losses.flush()).map_err(|e| Error::io(path, e));
        self.keep(r, "writing losses", state.step)
    }

    fn on_relations(&mut self, step: u64, rel: &StepRelations) -> Result<(), CoreError> {
        let r = relations::write_step(&self.dir.join("relations"), step, rel, &self.stage);
        self.keep(r, "writing relations", step)
    }

    fn on_eval(&mut self, step: u64, report: &MetricReport) -> Result<(), CoreError> {
        let eval = self.dir.join("eval");
        let r = write_report(&eval, report).and_then(|_| {
            let path = eval.join("history.jsonl");
            let line = serde_json::json!({ "step": step, "summary": report.summary() });
            let mut f = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
        });
        self.keep(r, "writing evaluation", step)
    }

    fn on_checkpoint(&mut self, state: &TrainState) -> Result<(), CoreError> {
        let dir = checkpoint::step_dir(&self.dir.join("checkpoints"), state.step);
        let r = checkpoint::save(&dir, state, &self.config);
        self.keep(r, "writing checkpoint", state.step)
    }
}
