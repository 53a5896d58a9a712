//! Paired-batch training with per-group gradient routing.
//!
//! One step computes three relation matrices from the encoders and up to
//! three losses, then routes gradients so that
//!
//! * the general encoder learns only from the general consistency term,
//! * the target encoder from segmentation plus the target consistency term,
//! * the decoder from segmentation only.
//!
//! Routing is structural: each term is backpropagated by hand into exactly
//! the groups it may update, and the general half of the decoder's fused
//! input gradient is dropped.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_batch_pair, tile_origins, BatchPair, Sample, SamplerConfig};
use crate::error::{shape_err, Error, Result};
use crate::grid::{Grid, Image, Mask};
use crate::losses::{self, ramp_lambda, LossBundle, RampForm, RampSchedule};
use crate::metrics::{CaseMetrics, MetricReport};
use crate::network::{ArchitectureSpec, DualEncoderNet, EncoderPass, Group};
use crate::optim::{OptimConfig, Sgd};
use crate::relation::{compute_relation_with, relation_backward, FeatureMap, Reduction, RelationMatrix};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Segmentation loss only.
    Baseline,
    #[serde(rename = "rcg")]
    RcGeneral,
    #[serde(rename = "rct")]
    RcTarget,
    #[default]
    Full,
    /// Full objective with unlabeled target samples in the batch.
    Semi,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Baseline, Mode::RcGeneral, Mode::RcTarget, Mode::Full, Mode::Semi];

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::RcGeneral => "rcg",
            Mode::RcTarget => "rct",
            Mode::Full => "full",
            Mode::Semi => "semi",
        }
    }

    pub fn uses_rc_general(&self) -> bool {
        matches!(self, Mode::RcGeneral | Mode::Full | Mode::Semi)
    }

    pub fn uses_rc_target(&self) -> bool {
        matches!(self, Mode::RcTarget | Mode::Full | Mode::Semi)
    }

    pub fn is_semi(&self) -> bool {
        matches!(self, Mode::Semi)
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode '{s}' (expected baseline, rcg, rct, full or semi)")))
    }
}

/// Encoder output the relation matrices are built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationSite {
    #[default]
    Bottleneck,
    /// Output of `conv{level}`.
    Stage(usize),
}

impl RelationSite {
    fn pick<'a>(&self, pass: &'a EncoderPass) -> &'a Tensor {
        match *self {
            RelationSite::Bottleneck => pass.bottleneck(),
            RelationSite::Stage(l) => pass.stage(l),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RampConfig {
    pub base: f64,
    pub form: RampForm,
}

impl Default for RampConfig {
    fn default() -> Self {
        Self { base: 0.1, form: RampForm::Gaussian }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub threshold: f64,
    /// Fractional overlap of sliding-window tiles.
    pub overlap: f64,
    /// Surface tolerance in mm.
    pub nsd_tolerance: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threshold: 0.5, overlap: 0.5, nsd_tolerance: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_steps: u64,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub lambda_g: RampConfig,
    pub lambda_t: RampConfig,
    pub mode: Mode,
    /// `(labeled, unlabeled)` target batch proportions in semi mode.
    pub semi_ratio: (usize, usize),
    pub seed: u64,
    pub relation_site: RelationSite,
    pub reduction: Reduction,
    /// Lower bound for the (negative) target consistency loss.
    pub rc_target_floor: Option<f64>,
    /// Steps between evaluations; 0 evaluates only at the end.
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub relation_every: u64,
    /// Evaluations without DSC improvement before stopping.
    pub patience: Option<u32>,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 200,
            batch_size: 2,
            optim: OptimConfig::default(),
            lambda_g: RampConfig::default(),
            lambda_t: RampConfig::default(),
            mode: Mode::Full,
            semi_ratio: (1, 1),
            seed: 0,
            relation_site: RelationSite::Bottleneck,
            reduction: Reduction::BatchMean,
            rc_target_floor: None,
            eval_every: 0,
            checkpoint_every: 0,
            relation_every: 0,
            patience: None,
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.optim.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.optim.lr)));
        }
        if !(0.0..1.0).contains(&self.optim.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.optim.momentum)));
        }
        if self.mode.is_semi() && self.semi_ratio.0 + self.semi_ratio.1 == 0 {
            return Err(Error::Config("semi ratio needs a positive total".into()));
        }
        Ok(())
    }

    pub fn sampler(&self, spec: &ArchitectureSpec) -> SamplerConfig {
        SamplerConfig {
            batch_size: self.batch_size,
            patch: spec.patch.clone(),
            target_ratio: self.mode.is_semi().then_some(self.semi_ratio),
        }
    }

    fn schedule(&self, r: RampConfig) -> RampSchedule {
        RampSchedule { base: r.base, t_max: self.max_steps, form: r.form }
    }

    /// Effective `(lambda_g, lambda_t)` for the 1-based step `step`; zero for
    /// terms the mode disables.
    pub fn lambdas(&self, step: u64) -> Result<(f64, f64)> {
        let g = if self.mode.uses_rc_general() { ramp_lambda(step, &self.schedule(self.lambda_g))? } else { 0.0 };
        let t = if self.mode.uses_rc_target() { ramp_lambda(step, &self.schedule(self.lambda_t))? } else { 0.0 };
        Ok((g, t))
    }
}

/// Per-term switches for gradient audits; all on in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TermSwitches {
    pub seg: bool,
    pub rc_general: bool,
    pub rc_target: bool,
}

impl Default for TermSwitches {
    fn default() -> Self {
        Self { seg: true, rc_general: true, rc_target: true }
    }
}

/// Relation matrices of one batch pair.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRelations {
    /// General encoder on auxiliary inputs.
    pub general_aux: RelationMatrix,
    /// General encoder on target inputs.
    pub general_target: RelationMatrix,
    /// Target encoder on target inputs.
    pub target_target: RelationMatrix,
}

/// Parameter gradients, one flat buffer per group.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub general: Vec<f64>,
    pub target: Vec<f64>,
    pub decoder: Vec<f64>,
}

impl Gradients {
    fn zeros(net: &DualEncoderNet) -> Self {
        Self {
            general: vec![0.0; net.params(Group::GeneralEncoder).len()],
            target: vec![0.0; net.params(Group::TargetEncoder).len()],
            decoder: vec![0.0; net.params(Group::Decoder).len()],
        }
    }

    pub fn group(&self, g: Group) -> &[f64] {
        match g {
            Group::GeneralEncoder => &self.general,
            Group::TargetEncoder => &self.target,
            Group::Decoder => &self.decoder,
        }
    }

    pub fn is_finite(&self) -> bool {
        Group::ALL.iter().all(|g| self.group(*g).iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepGradients {
    pub losses: LossBundle,
    pub grads: Gradients,
    pub relations: StepRelations,
}

pub fn image_tensor(image: &Image) -> Tensor {
    Tensor { channels: 1, dims: image.dims3(), data: image.data().to_vec() }
}

pub fn mask_tensor(mask: &Mask) -> Tensor {
    Tensor { channels: 1, dims: mask.dims3(), data: mask.data().iter().map(|&v| v as f64).collect() }
}

fn relation_of(passes: &[EncoderPass], site: RelationSite, reduction: Reduction) -> Result<(FeatureMap, RelationMatrix)> {
    let feats: Vec<&Tensor> = passes.iter().map(|p| site.pick(p)).collect();
    if feats.iter().any(|t| t.data.iter().any(|v| !v.is_finite())) {
        // Step is filled in by the caller that knows it.
        return Err(Error::NonFiniteLoss { step: 0, term: "relation" });
    }
    let fm = FeatureMap::from_samples(&feats)?;
    let r = compute_relation_with(&fm, reduction);
    Ok((fm, r))
}

/// Per-sample gradients arriving at encoder outputs.
struct EncoderSeeds {
    stages: Vec<Option<Tensor>>,
    bottleneck: Option<Tensor>,
}

impl EncoderSeeds {
    fn new(levels: usize) -> Self {
        Self { stages: vec![None; levels], bottleneck: None }
    }

    fn add_stage(&mut self, level: usize, d: Tensor) {
        match &mut self.stages[level - 1] {
            Some(t) => t.add_assign(&d),
            slot => *slot = Some(d),
        }
    }

    fn add_bottleneck(&mut self, d: Tensor) {
        match &mut self.bottleneck {
            Some(t) => t.add_assign(&d),
            slot => *slot = Some(d),
        }
    }

    fn add_at(&mut self, site: RelationSite, d: Tensor) {
        match site {
            RelationSite::Bottleneck => self.add_bottleneck(d),
            RelationSite::Stage(l) => self.add_stage(l, d),
        }
    }

    fn is_empty(&self) -> bool {
        self.bottleneck.is_none() && self.stages.iter().all(Option::is_none)
    }
}

/// Losses, relation matrices and routed gradients for one batch pair at
/// the given coefficients. Parameters are not touched.
pub fn compute_gradients(
    net: &DualEncoderNet,
    pair: &BatchPair,
    config: &TrainConfig,
    lambdas: (f64, f64),
    switches: TermSwitches,
) -> Result<StepGradients> {
    let spec = net.spec();
    let levels = spec.levels();
    if pair.target.is_empty() || pair.auxiliary.is_empty() {
        return Err(Error::EmptyPool("batch"));
    }
    if !config.mode.is_semi() {
        if let Some(s) = pair.target.iter().find(|s| s.supervised_label().is_none()) {
            return Err(Error::MissingLabel(s.id.clone()));
        }
    }
    if let RelationSite::Stage(l) = config.relation_site {
        if l == 0 || l > levels {
            return Err(Error::Config(format!("relation stage {l} outside 1..={levels}")));
        }
    }
    let mut target_passes = Vec::with_capacity(pair.target.len());
    let mut general_passes = Vec::with_capacity(pair.target.len());
    for s in &pair.target {
        let x = image_tensor(&s.image);
        general_passes.push(net.forward_general(&x)?);
        target_passes.push(net.target().forward(&x));
    }
    let mut aux_passes = Vec::with_capacity(pair.auxiliary.len());
    for s in &pair.auxiliary {
        aux_passes.push(net.forward_general(&image_tensor(&s.image))?);
    }

    let site = config.relation_site;
    let (fm_gn, r_gn) = relation_of(&aux_passes, site, config.reduction)?;
    let (fm_gc, r_gc) = relation_of(&general_passes, site, config.reduction)?;
    let (fm_tc, r_tc) = relation_of(&target_passes, site, config.reduction)?;

    let (lambda_g, lambda_t) = lambdas;
    let mut grads = Gradients::zeros(net);
    let mut losses = LossBundle { lambda_g, lambda_t, ..LossBundle::default() };
    let mut general_target_seeds: Vec<EncoderSeeds> = (0..pair.target.len()).map(|_| EncoderSeeds::new(levels)).collect();
    let mut target_seeds: Vec<EncoderSeeds> = (0..pair.target.len()).map(|_| EncoderSeeds::new(levels)).collect();

    if switches.rc_general && config.mode.uses_rc_general() {
        let (loss, d_aux, d_tgt) = losses::rc_general_grad(&r_gn, &r_gc, lambda_g)?;
        losses.rc_general = loss;
        let d_aux = relation_backward(&fm_gn, config.reduction, &d_aux)?.to_samples();
        for (pass, d) in aux_passes.iter().zip(d_aux) {
            let mut seeds = EncoderSeeds::new(levels);
            seeds.add_at(site, d);
            net.general().backward(pass, &seeds.stages, seeds.bottleneck.as_ref(), &mut grads.general);
        }
        let d_tgt = relation_backward(&fm_gc, config.reduction, &d_tgt)?.to_samples();
        for (seeds, d) in general_target_seeds.iter_mut().zip(d_tgt) {
            seeds.add_at(site, d);
        }
    }

    if switches.rc_target && config.mode.uses_rc_target() {
        // The general-side gradient is discarded: this term never reaches
        // the general encoder.
        let (loss, _, d_t) = losses::rc_target_grad(&r_gc, &r_tc, lambda_t, config.rc_target_floor)?;
        losses.rc_target = loss;
        let d_t = relation_backward(&fm_tc, config.reduction, &d_t)?.to_samples();
        for (seeds, d) in target_seeds.iter_mut().zip(d_t) {
            seeds.add_at(site, d);
        }
    }

    if switches.seg {
        let labeled: Vec<usize> = (0..pair.target.len()).filter(|&i| pair.target[i].supervised_label().is_some()).collect();
        let k = if labeled.is_empty() { 0.0 } else { 1.0 / labeled.len() as f64 };
        let cb = spec.bottleneck_channels();
        for &i in &labeled {
            let mask = mask_tensor(pair.target[i].supervised_label().expect("filtered"));
            let pass = net.decode(general_passes[i].bottleneck(), &target_passes[i])?;
            let (loss, mut d_out) = losses::seg_loss_grad(&pass.outputs, &mask)?;
            losses.seg += k * loss;
            d_out.iter_mut().for_each(|t| t.scale(k));
            let (d_fused, d_skips) = net.decoder().backward(&pass, &d_out, &mut grads.decoder);
            // First half feeds from the general encoder and is dropped.
            let d_target_bottleneck = d_fused.split(&[cb, cb]).pop().expect("two halves");
            let seeds = &mut target_seeds[i];
            seeds.add_bottleneck(d_target_bottleneck);
            for (l, d) in d_skips.into_iter().enumerate() {
                seeds.add_stage(l + 1, d);
            }
        }
    }

    for (pass, seeds) in general_passes.iter().zip(&general_target_seeds) {
        if !seeds.is_empty() {
            net.general().backward(pass, &seeds.stages, seeds.bottleneck.as_ref(), &mut grads.general);
        }
    }
    for (pass, seeds) in target_passes.iter().zip(&target_seeds) {
        if !seeds.is_empty() {
            net.target().backward(pass, &seeds.stages, seeds.bottleneck.as_ref(), &mut grads.target);
        }
    }

    Ok(StepGradients {
        losses,
        grads,
        relations: StepRelations { general_aux: r_gn, general_target: r_gc, target_target: r_tc },
    })
}

/// Relation matrices only (no gradients), e.g. for periodic dumps.
pub fn relations_for(net: &DualEncoderNet, pair: &BatchPair, config: &TrainConfig) -> Result<StepRelations> {
    let run = |samples: &[Sample], target: bool| -> Result<Vec<EncoderPass>> {
        samples
            .iter()
            .map(|s| {
                let x = image_tensor(&s.image);
                if target {
                    Ok(net.target().forward(&x))
                } else {
                    net.forward_general(&x)
                }
            })
            .collect()
    };
    let site = config.relation_site;
    Ok(StepRelations {
        general_aux: relation_of(&run(&pair.auxiliary, false)?, site, config.reduction)?.1,
        general_target: relation_of(&run(&pair.target, false)?, site, config.reduction)?.1,
        target_target: relation_of(&run(&pair.target, true)?, site, config.reduction)?.1,
    })
}

/// Serializable position of the training RNG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: DualEncoderNet,
    pub optimizers: [Sgd; 3],
    /// Completed updates.
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub history: Vec<LossBundle>,
}

/// Outcome of one applied update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub losses: LossBundle,
    pub relations: StepRelations,
}

impl TrainState {
    pub fn new(spec: &ArchitectureSpec, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = DualEncoderNet::build(spec, config.seed)?;
        Ok(Self::from_net(net, config))
    }

    pub fn from_net(net: DualEncoderNet, config: &TrainConfig) -> Self {
        let optimizers = Group::ALL.map(|g| Sgd::new(net.params(g).len(), config.optim.momentum));
        Self { net, optimizers, step: 0, rng: ChaCha8Rng::seed_from_u64(config.seed), history: Vec::new() }
    }

    pub fn optimizer(&self, g: Group) -> &Sgd {
        &self.optimizers[g as usize]
    }

    pub fn optimizer_mut(&mut self, g: Group) -> &mut Sgd {
        &mut self.optimizers[g as usize]
    }

    /// Applies routed gradients with the learning rate for the current step.
    pub fn apply(&mut self, grads: &Gradients, config: &TrainConfig) {
        let lr = config.optim.lr_at(self.step, config.max_steps);
        for g in Group::ALL {
            let params = self.net.params_mut(g).values_mut();
            self.optimizers[g as usize].step(params, grads.group(g), lr);
        }
    }

    /// Draws a batch pair with the state's RNG.
    pub fn sample_pair(&mut self, target: &[Sample], auxiliary: &[Sample], config: &TrainConfig) -> Result<BatchPair> {
        sample_batch_pair(target, auxiliary, &config.sampler(self.net.spec()), &mut self.rng)
    }
}

fn at_step(e: Error, step: u64) -> Error {
    match e {
        Error::NonFiniteLoss { term, .. } => Error::NonFiniteLoss { step, term },
        e => e,
    }
}

fn check_finite(losses: &LossBundle, grads: &Gradients, step: u64) -> Result<()> {
    for (term, v) in [("seg", losses.seg), ("rc_general", losses.rc_general), ("rc_target", losses.rc_target)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { step, term });
        }
    }
    if !grads.is_finite() {
        return Err(Error::NonFiniteLoss { step, term: "gradient" });
    }
    Ok(())
}

/// One update on `pair`. Semi-supervised batches go through the same path:
/// unlabeled samples only feed the relation terms.
pub fn train_step(state: &mut TrainState, pair: &BatchPair, config: &TrainConfig) -> Result<StepOutput> {
    if state.step >= config.max_steps {
        return Err(Error::Finished(state.step));
    }
    let step = state.step + 1;
    let lambdas = config.lambdas(step)?;
    let out = compute_gradients(&state.net, pair, config, lambdas, TermSwitches::default()).map_err(|e| at_step(e, step))?;
    check_finite(&out.losses, &out.grads, step)?;
    state.apply(&out.grads, config);
    state.step = step;
    state.history.push(out.losses);
    Ok(StepOutput { losses: out.losses, relations: out.relations })
}

/// [`train_step`] for batches that may hold unlabeled target samples.
pub fn semi_step(state: &mut TrainState, pair: &BatchPair, config: &TrainConfig) -> Result<StepOutput> {
    if !config.mode.is_semi() {
        return Err(Error::Config(format!("semi_step needs mode 'semi', got '{}'", config.mode.name())));
    }
    train_step(state, pair, config)
}

/// Sliding-window foreground probability over a whole image; overlapping
/// tiles are averaged.
pub fn predict_image(net: &DualEncoderNet, image: &Image, overlap: f64) -> Result<Image> {
    let patch = &net.spec().patch;
    if image.ndim() != patch.len() {
        return Err(shape_err(patch.len(), image.ndim()));
    }
    let fill = image.data().iter().copied().fold(f64::INFINITY, f64::min);
    let shape = image.shape().to_vec();
    let strides = image.strides();
    let mut sum = vec![0.0; image.len()];
    let mut count = vec![0u32; image.len()];
    let pstrides: Vec<usize> = (0..patch.len()).map(|a| patch[a + 1..].iter().product()).collect();
    let plen: usize = patch.iter().product();
    for origin in tile_origins(&shape, patch, overlap)? {
        let tile = image.window(&origin, patch, fill)?;
        let prob = net.predict(&image_tensor(&tile))?;
        'voxel: for (local, &p) in prob.data.iter().enumerate().take(plen) {
            let mut rem = local;
            let mut flat = 0;
            for a in 0..patch.len() {
                let i = (rem / pstrides[a]) as isize + origin[a];
                rem %= pstrides[a];
                if i < 0 || i >= shape[a] as isize {
                    continue 'voxel;
                }
                flat += i as usize * strides[a];
            }
            sum[flat] += p;
            count[flat] += 1;
        }
    }
    let data = sum.iter().zip(&count).map(|(s, &c)| s / c.max(1) as f64).collect();
    Grid::new(shape, data)
}

/// Per-case metrics on labeled samples; unlabeled ones are skipped.
pub fn evaluate(net: &DualEncoderNet, samples: &[Sample], config: &EvalConfig) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for s in samples {
        let Some(truth) = s.supervised_label() else { continue };
        let prob = predict_image(net, &s.image, config.overlap)?;
        report
            .cases
            .push(CaseMetrics::compute(&s.id, truth, &prob, &s.spacing, config.nsd_tolerance, config.threshold)?);
    }
    Ok(report)
}

/// Hooks the training loop calls; errors abort the run.
pub trait Observer {
    fn on_step(&mut self, _state: &TrainState, _out: &StepOutput) -> Result<()> {
        Ok(())
    }

    /// `step` counts completed updates (0 before training).
    fn on_relations(&mut self, _step: u64, _relations: &StepRelations) -> Result<()> {
        Ok(())
    }

    fn on_eval(&mut self, _step: u64, _report: &MetricReport) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

/// Observer that does nothing.
pub struct Silent;

impl Observer for Silent {}

pub struct Datasets<'a> {
    /// Target training pool (labeled and, in semi mode, unlabeled).
    pub target: &'a [Sample],
    pub auxiliary: &'a [Sample],
    /// Held-out labeled target samples.
    pub eval: &'a [Sample],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub steps: u64,
    pub stopped_early: bool,
    pub final_report: Option<MetricReport>,
}

/// Fixed batch pair used for relation dumps, drawn from its own RNG stream.
pub fn probe_pair(data: &Datasets, spec: &ArchitectureSpec, config: &TrainConfig) -> Result<BatchPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0x70);
    sample_batch_pair(data.target, data.auxiliary, &config.sampler(spec), &mut rng)
}

fn due(step: u64, every: u64) -> bool {
    every > 0 && step.is_multiple_of(every)
}

/// Runs until `max_steps` (or early stop), evaluating, checkpointing and
/// dumping relations at their cadences and once more at the end.
pub fn train(state: &mut TrainState, config: &TrainConfig, data: &Datasets, observer: &mut dyn Observer) -> Result<TrainOutcome> {
    config.validate()?;
    if !data.target.iter().any(|s| s.supervised_label().is_some()) {
        return Err(Error::EmptyPool("labeled target"));
    }
    let probe = probe_pair(data, state.net.spec(), config)?;
    if state.step == 0 && config.relation_every > 0 {
        observer.on_relations(0, &relations_for(&state.net, &probe, config)?)?;
    }
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0u32;
    let mut stopped_early = false;
    let mut final_report = None;
    while state.step < config.max_steps {
        let pair = state.sample_pair(data.target, data.auxiliary, config)?;
        let out = train_step(state, &pair, config)?;
        observer.on_step(state, &out)?;
        let step = state.step;
        let last = step == config.max_steps;
        if due(step, config.relation_every) || (last && config.relation_every > 0) {
            observer.on_relations(step, &relations_for(&state.net, &probe, config).map_err(|e| at_step(e, step))?)?;
        }
        if !data.eval.is_empty() && (due(step, config.eval_every) || last) {
            let report = evaluate(&state.net, data.eval, &config.eval)?;
            observer.on_eval(step, &report)?;
            let dsc = report.summary().dsc.mean;
            if dsc > best {
                best = dsc;
                stale = 0;
            } else {
                stale += 1;
            }
            final_report = Some(report);
            if let Some(p) = config.patience {
                if stale >= p && !last {
                    stopped_early = true;
                }
            }
        }
        if due(step, config.checkpoint_every) || last || stopped_early {
            observer.on_checkpoint(state)?;
        }
        if stopped_early {
            break;
        }
    }
    Ok(TrainOutcome { steps: state.step, stopped_early, final_report })
}
