//! `relcollab` command-line verbs.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use image::Rgb;
use relcollab_core::data::{make_folds, preprocess, DomainTag, Sample};
use relcollab_core::trainer::{evaluate, train, Datasets, EvalConfig, Mode, TrainState};
use serde_json::{json, Value};

use crate::checkpoint;
use crate::config::{self, RunConfig};
use crate::dataset::{self, file_sha256, load_dataset, read_json, resolve_dataset, write_json, CACHE_ENV, MANIFEST};
use crate::error::{Error, Result};
use crate::plot;
use crate::relations;
use crate::run::{self, RunManifest, RunWriter, Seeds};

#[derive(Debug, Parser)]
#[command(name = "relcollab", version, about = "Dual-encoder lesion segmentation with relation consistency")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic two-domain phantom dataset.
    Synth(SynthArgs),
    /// Train on a dataset and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on labeled target samples.
    Eval(EvalArgs),
    /// Plot dumped relation matrices of a run.
    InspectRelations(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Phantom configuration (JSON), layered over built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to `$RELCOLLAB_CACHE/phantom`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// baseline, rcg, rct, full or semi.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Leave wall-clock time out of the run manifest.
    #[arg(long)]
    pub deterministic: bool,
    /// Overrides the dataset directory of the config.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Overrides `train.max_steps`.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    All,
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// A `checkpoints/step_N` directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the dataset of the run that wrote the checkpoint.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Which labeled target samples to score, by the run's fold.
    #[arg(long, value_enum, default_value = "all")]
    pub split: Split,
    /// Surface tolerance in mm.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Run directory.
    pub run: PathBuf,
    /// Steps to plot (comma separated); all dumped steps when omitted.
    #[arg(long, value_delimiter = ',')]
    pub steps: Vec<u64>,
    /// Defaults to `<run>/plots`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    let argv: Vec<String> = std::env::args().collect();
    match cli.command {
        Command::Synth(a) => cmd_synth(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a, argv).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::InspectRelations(a) => cmd_inspect_relations(&a).map(|_| ()),
    }
}

fn cache_dir() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).map(PathBuf::from)
}

pub fn cmd_synth(a: &SynthArgs) -> Result<PathBuf> {
    let mut overrides = json!({});
    if let Some(seed) = a.seed {
        overrides["seed"] = json!(seed);
    }
    let cfg = config::phantom_config(a.config.as_deref(), overrides)?;
    let out = match (&a.out, cache_dir()) {
        (Some(o), _) => o.clone(),
        (None, Some(c)) => c.join("phantom"),
        (None, None) => return Err(Error::Config(format!("--out not given and {CACHE_ENV} is unset"))),
    };
    let manifest = dataset::write_phantom_dataset(&out, &cfg)?;
    println!(
        "wrote {} samples ({} labeled target, {} unlabeled target, {} auxiliary) to {}",
        manifest.samples.len(),
        manifest.counts.target_labeled,
        manifest.counts.target_unlabeled,
        manifest.counts.auxiliary,
        out.display()
    );
    Ok(out)
}

/// Labeled target samples split into fold train/test, plus the rest.
pub struct Partition {
    pub target_train: Vec<Sample>,
    pub target_test: Vec<Sample>,
    pub auxiliary: Vec<Sample>,
}

pub fn partition(samples: Vec<Sample>, cfg: &RunConfig) -> Result<Partition> {
    let labeled: Vec<String> =
        samples.iter().filter(|s| s.tag == DomainTag::TargetLabeled).map(|s| s.id.clone()).collect();
    let splits = make_folds(&labeled, cfg.folds, cfg.fold_seed, cfg.fold_mode)?;
    let split = splits
        .get(cfg.fold)
        .ok_or_else(|| Error::Config(format!("fold {} outside 0..{}", cfg.fold, cfg.folds)))?;
    let train_ids: HashSet<&String> = split.train_ids.iter().collect();
    let semi = cfg.train.mode.is_semi();
    let mut p = Partition { target_train: Vec::new(), target_test: Vec::new(), auxiliary: Vec::new() };
    for s in samples {
        match s.tag {
            DomainTag::TargetLabeled if train_ids.contains(&s.id) => p.target_train.push(s),
            DomainTag::TargetLabeled => p.target_test.push(s),
            DomainTag::TargetUnlabeled if semi => p.target_train.push(s),
            DomainTag::TargetUnlabeled => {}
            DomainTag::Auxiliary => p.auxiliary.push(s),
        }
    }
    Ok(p)
}

fn load_preprocessed(dir: &Path, cfg: &RunConfig) -> Result<Vec<Sample>> {
    load_dataset(dir)?
        .iter()
        .map(|s| preprocess(s, &cfg.preprocess).map_err(Error::from))
        .collect()
}

pub fn cmd_train(a: &TrainArgs, argv: Vec<String>) -> Result<PathBuf> {
    let mut overrides = json!({ "train": {} });
    if let Some(m) = &a.mode {
        let mode: Mode = m.parse()?;
        overrides["train"]["mode"] = serde_json::to_value(mode).expect("enum");
    }
    if let Some(s) = a.seed {
        overrides["train"]["seed"] = json!(s);
    }
    if let Some(n) = a.steps {
        overrides["train"]["max_steps"] = json!(n);
    }
    if let Some(f) = a.fold {
        overrides["fold"] = json!(f);
    }
    if let Some(d) = &a.dataset {
        overrides["dataset"] = json!(d);
    }
    if a.deterministic {
        overrides["deterministic"] = json!(true);
    }
    let cfg = config::run_config(a.config.as_deref(), overrides)?;
    let spec = cfg.arch.resolve()?;
    let data_dir = resolve_dataset(&cfg.dataset)?;
    let part = partition(load_preprocessed(&data_dir, &cfg)?, &cfg)?;

    let out = &a.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join(run::CONFIG), &cfg)?;
    let mut manifest = RunManifest {
        command: argv,
        config: cfg.clone(),
        seeds: Seeds { train: cfg.train.seed, fold: cfg.fold_seed },
        toolkit_version: env!("CARGO_PKG_VERSION").into(),
        inputs: vec![("dataset_manifest".into(), file_sha256(&data_dir.join(MANIFEST))?)],
        started_unix: (!cfg.deterministic).then(run::unix_now),
        finished_unix: None,
    };
    write_json(&out.join(run::MANIFEST), &manifest)?;

    let stage = relations::site_name(cfg.train.relation_site, spec.levels());
    let mut writer = RunWriter::create(out, &cfg.train, stage)?;
    let mut state = TrainState::new(&spec, &cfg.train)?;
    let data = Datasets { target: &part.target_train, auxiliary: &part.auxiliary, eval: &part.target_test };
    let outcome = match train(&mut state, &cfg.train, &data, &mut writer) {
        Ok(o) => o,
        Err(e) => return Err(writer.failure.take().unwrap_or(Error::Core(e))),
    };
    manifest.finished_unix = (!cfg.deterministic).then(run::unix_now);
    write_json(&out.join(run::MANIFEST), &manifest)?;
    let dsc = outcome.final_report.as_ref().map(|r| r.summary().dsc.mean);
    println!(
        "trained {} steps (mode {}){}; run directory {}",
        outcome.steps,
        cfg.train.mode.name(),
        dsc.map(|d| format!(", held-out DSC {d:.4}")).unwrap_or_default(),
        out.display()
    );
    Ok(out.clone())
}

fn run_config_for_checkpoint(ckpt: &Path) -> Option<RunConfig> {
    let run_dir = ckpt.parent()?.parent()?;
    read_json(&run_dir.join(run::CONFIG)).ok()
}

pub fn cmd_eval(a: &EvalArgs) -> Result<PathBuf> {
    let net = checkpoint::load_net(&a.checkpoint)?;
    let run_cfg = run_config_for_checkpoint(&a.checkpoint);
    let cfg = run_cfg.clone().unwrap_or_default();
    let data_dir = match (&a.dataset, &run_cfg) {
        (Some(d), _) => resolve_dataset(d)?,
        (None, Some(c)) => resolve_dataset(&c.dataset)?,
        (None, None) => return Err(Error::Config("--dataset is required for checkpoints outside a run directory".into())),
    };
    let samples = load_preprocessed(&data_dir, &cfg)?;
    let selected: Vec<Sample> = match a.split {
        Split::All => samples.into_iter().filter(|s| s.tag == DomainTag::TargetLabeled).collect(),
        Split::Train => partition(samples, &cfg)?.target_train.into_iter().filter(|s| s.supervised_label().is_some()).collect(),
        Split::Test => partition(samples, &cfg)?.target_test,
    };
    let mut eval_cfg: EvalConfig = cfg.train.eval;
    if let Some(t) = a.tau {
        eval_cfg.nsd_tolerance = t;
    }
    let report = evaluate(&net, &selected, &eval_cfg)?;
    let out = a.out.clone().unwrap_or_else(|| a.checkpoint.join("eval"));
    run::write_report(&out, &report)?;
    let s = report.summary();
    println!(
        "{} cases: DSC {:.4}±{:.4} NSD {:.4}±{:.4} Sen {:.4} Spec {:.4} MAE {:.4}; wrote {}",
        s.cases,
        s.dsc.mean,
        s.dsc.std,
        s.nsd.mean,
        s.nsd.std,
        s.sen.mean,
        s.spec.mean,
        s.mae.mean,
        out.display()
    );
    Ok(out)
}

/// One row of `relation_curve.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub step: u64,
    /// `|R_G(aux) - R_G(target)|^2`
    pub cross_domain: f64,
    /// `|R_G(target) - R_T(target)|^2`
    pub cross_encoder: f64,
}

pub fn cmd_inspect_relations(a: &InspectArgs) -> Result<Vec<CurveRow>> {
    let root = a.run.join("relations");
    let available = relations::list_steps(&root);
    let wanted: Vec<u64> = if a.steps.is_empty() { available.iter().map(|(s, _)| *s).collect() } else { a.steps.clone() };
    let out = a.out.clone().unwrap_or_else(|| a.run.join("plots"));
    let mut rows = Vec::new();
    for step in wanted {
        let rel = match relations::read_step(&root, step) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("warning: skipping step {step}: {e}");
                continue;
            }
        };
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let cell = (256 / rel.general_aux.channels().max(1)).clamp(2, 16) as u32;
        let a_img = plot::relation_panels(rel.general_aux.matrix(), rel.general_target.matrix(), cell);
        plot::save(&a_img, &out.join(format!("cross_domain_step_{step}.png")))?;
        let b_img = plot::relation_panels(rel.general_target.matrix(), rel.target_target.matrix(), cell);
        plot::save(&b_img, &out.join(format!("cross_encoder_step_{step}.png")))?;
        rows.push(CurveRow {
            step,
            cross_domain: rel.general_aux.squared_distance(&rel.general_target)?,
            cross_encoder: rel.general_target.squared_distance(&rel.target_target)?,
        });
    }
    if rows.is_empty() {
        return Err(Error::NoRelations(root));
    }
    let mut csv = String::from("step,cross_domain,cross_encoder\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.step, r.cross_domain, r.cross_encoder));
    }
    let path = out.join("relation_curve.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    let xs: Vec<f64> = rows.iter().map(|r| r.step as f64).collect();
    let cd: Vec<f64> = rows.iter().map(|r| r.cross_domain).collect();
    let ce: Vec<f64> = rows.iter().map(|r| r.cross_encoder).collect();
    let img = plot::curve(&xs, &[(&cd, Rgb([31, 119, 180])), (&ce, Rgb([214, 39, 40]))], 480, 320);
    plot::save(&img, &out.join("relation_curve.png"))?;
    println!("plotted {} step(s) into {}", rows.len(), out.display());
    Ok(rows)
}

/// Renders `{"key": value}` override pairs given as `a.b=value` strings.
pub fn overrides_from_pairs(pairs: &[String]) -> Result<Value> {
    let mut v = json!({});
    for p in pairs {
        let (k, raw) = p.split_once('=').ok_or_else(|| Error::Config(format!("override '{p}' is not key=value")))?;
        let val: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
        let mut slot = &mut v;
        for part in k.split('.') {
            slot = &mut slot[part];
        }
        *slot = val;
    }
    Ok(v)
}
