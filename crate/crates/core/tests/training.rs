use relcollab_core::data::{generate_phantom_dataset, preprocess, BatchPair, DomainTag, PhantomConfig, PreprocessConfig, Sample};
use relcollab_core::metrics::MetricReport;
use relcollab_core::network::{ArchitectureSpec, Group};
use relcollab_core::trainer::{
    train, train_step, Datasets, Mode, Observer, RngState, StepOutput, StepRelations, TrainConfig, TrainState,
};
use relcollab_core::{Error, Result};

fn fixture() -> (Vec<Sample>, Vec<Sample>) {
    let mut cfg = PhantomConfig::small_2d(11);
    cfg.counts.target_labeled = 6;
    cfg.counts.auxiliary = 6;
    let all: Vec<Sample> = generate_phantom_dataset(&cfg)
        .unwrap()
        .iter()
        .map(|s| preprocess(s, &PreprocessConfig::default()).unwrap())
        .collect();
    let (t, a): (Vec<_>, Vec<_>) = all.into_iter().partition(|s| s.tag.is_target());
    (t, a)
}

#[derive(Default)]
struct Recorder {
    steps: Vec<u64>,
    relations: Vec<u64>,
    evals: Vec<u64>,
    checkpoints: Vec<u64>,
}

impl Observer for Recorder {
    fn on_step(&mut self, state: &TrainState, _: &StepOutput) -> Result<()> {
        self.steps.push(state.step);
        Ok(())
    }
    fn on_relations(&mut self, step: u64, _: &StepRelations) -> Result<()> {
        self.relations.push(step);
        Ok(())
    }
    fn on_eval(&mut self, step: u64, _: &MetricReport) -> Result<()> {
        self.evals.push(step);
        Ok(())
    }
    fn on_checkpoint(&mut self, state: &TrainState) -> Result<()> {
        self.checkpoints.push(state.step);
        Ok(())
    }
}

#[test]
fn observer_cadences() {
    let (target, aux) = fixture();
    let config = TrainConfig {
        max_steps: 7,
        eval_every: 3,
        checkpoint_every: 2,
        relation_every: 5,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&ArchitectureSpec::tiny(), &config).unwrap();
    let mut rec = Recorder::default();
    let data = Datasets { target: &target[..4], auxiliary: &aux, eval: &target[4..] };
    let out = train(&mut state, &config, &data, &mut rec).unwrap();
    assert_eq!(out.steps, 7);
    assert!(!out.stopped_early);
    assert_eq!(rec.steps, (1..=7).collect::<Vec<_>>());
    assert_eq!(rec.relations, [0, 5, 7]);
    assert_eq!(rec.evals, [3, 6, 7]);
    assert_eq!(rec.checkpoints, [2, 4, 6, 7]);
    assert_eq!(out.final_report.unwrap().cases.len(), 2);
    assert_eq!(state.history.len(), 7);
}

#[test]
fn finished_state_refuses_more_steps() {
    let (target, aux) = fixture();
    let config = TrainConfig { max_steps: 1, ..TrainConfig::default() };
    let mut state = TrainState::new(&ArchitectureSpec::tiny(), &config).unwrap();
    let pair = state.sample_pair(&target, &aux, &config).unwrap();
    train_step(&mut state, &pair, &config).unwrap();
    assert!(matches!(train_step(&mut state, &pair, &config), Err(Error::Finished(1))));
}

#[test]
fn corrupted_inputs_stop_with_non_finite_loss() {
    let (target, aux) = fixture();
    let config = TrainConfig { max_steps: 3, ..TrainConfig::default() };
    let mut state = TrainState::new(&ArchitectureSpec::tiny(), &config).unwrap();
    let mut pair = state.sample_pair(&target, &aux, &config).unwrap();
    // `Sample::new` rejects NaN, so corrupt the batch after sampling.
    pair.target[0].image.data_mut()[5] = f64::NAN;
    let before = state.net.clone();
    match train_step(&mut state, &pair, &config) {
        Err(Error::NonFiniteLoss { step: 1, .. }) => {}
        Err(e) => panic!("expected a non-finite loss, got {e}"),
        Ok(out) => panic!("expected a non-finite loss, got {:?}", out.losses),
    }
    assert_eq!(state.step, 0);
    for g in Group::ALL {
        assert_eq!(state.net.params(g).values(), before.params(g).values());
    }
}

#[test]
fn baseline_never_touches_the_general_encoder() {
    let (target, aux) = fixture();
    let config = TrainConfig { max_steps: 4, mode: Mode::Baseline, ..TrainConfig::default() };
    let mut state = TrainState::new(&ArchitectureSpec::tiny(), &config).unwrap();
    let init = state.net.params(Group::GeneralEncoder).values().to_vec();
    let data = Datasets { target: &target, auxiliary: &aux, eval: &[] };
    train(&mut state, &config, &data, &mut relcollab_core::trainer::Silent).unwrap();
    assert_eq!(state.net.params(Group::GeneralEncoder).values(), &init[..]);
    assert!(state.history.iter().all(|l| l.rc_general == 0.0 && l.rc_target == 0.0));
}

#[test]
fn restored_rng_draws_the_same_batches() {
    let (target, aux) = fixture();
    let config = TrainConfig::default();
    let mut a = TrainState::new(&ArchitectureSpec::tiny(), &config).unwrap();
    a.sample_pair(&target, &aux, &config).unwrap();
    let mut b = a.clone();
    b.rng = RngState::capture(&a.rng).restore();
    let ids = |p: &BatchPair| p.target.iter().chain(&p.auxiliary).map(|s| s.id.clone()).collect::<Vec<_>>();
    for _ in 0..3 {
        let (pa, pb) = (a.sample_pair(&target, &aux, &config).unwrap(), b.sample_pair(&target, &aux, &config).unwrap());
        assert_eq!(ids(&pa), ids(&pb));
        assert_eq!(pa, pb);
    }
}

#[test]
fn training_without_labeled_targets_is_rejected() {
    let (target, aux) = fixture();
    let unlabeled: Vec<Sample> = target
        .iter()
        .map(|s| Sample::new(s.id.clone(), s.image.clone(), None, s.spacing.clone(), DomainTag::TargetUnlabeled).unwrap())
        .collect();
    let config = TrainConfig { max_steps: 2, mode: Mode::Semi, ..TrainConfig::default() };
    let mut state = TrainState::new(&ArchitectureSpec::tiny(), &config).unwrap();
    let data = Datasets { target: &unlabeled, auxiliary: &aux, eval: &[] };
    assert!(matches!(
        train(&mut state, &config, &data, &mut relcollab_core::trainer::Silent),
        Err(Error::EmptyPool(_))
    ));
}
