//! Acceptance suite: one PASS/FAIL line per criterion, with the measured
//! quantity, the pinned tolerance and the runtime against its budget.
//!
//! Runs as a plain binary (`harness = false`) so the lines come out in
//! order and unbuffered. Exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relcollab_core::data::{
    generate_phantom_dataset, make_folds, preprocess, BatchPair, DomainTag, FoldMode, PhantomConfig, PreprocessConfig,
    Sample,
};
use relcollab_core::grid::{Grid, Mask};
use relcollab_core::losses::{
    cross_entropy_grad, cross_entropy_loss, dice_loss, dice_loss_grad, ramp_lambda, rc_general_grad, rc_general_loss,
    rc_target_grad, rc_target_loss, RampSchedule, DICE_EPS,
};
use relcollab_core::metrics::{dsc, extract_surface, nsd};
use relcollab_core::network::{ArchitectureSpec, DualEncoderNet, Group};
use relcollab_core::relation::{compute_relation, compute_relation_with, relation_backward, FeatureMap, Reduction};
use relcollab_core::trainer::{
    compute_gradients, evaluate, semi_step, train, Datasets, EvalConfig, Gradients, Mode, Silent, TermSwitches,
    TrainConfig, TrainState,
};
use relcollab_core::{Error, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- helpers

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `|a - n|_2 / max(|a|_2, |n|_2)`, 0 when both vanish.
fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale == 0.0 {
        0.0
    } else {
        norm(&d) / scale
    }
}

fn central_difference(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let keep = x[i];
            x[i] = keep + h;
            let up = f(&x);
            x[i] = keep - h;
            let down = f(&x);
            x[i] = keep;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn phantom(cfg: &PhantomConfig) -> Vec<Sample> {
    generate_phantom_dataset(cfg)
        .expect("phantom config is valid")
        .iter()
        .map(|s| preprocess(s, &PreprocessConfig::default()).expect("finite phantom"))
        .collect()
}

fn by_tag(samples: &[Sample], tag: DomainTag) -> Vec<Sample> {
    samples.iter().filter(|s| s.tag == tag).cloned().collect()
}

fn params_of(net: &DualEncoderNet, g: Group) -> Vec<f64> {
    net.params(g).values().to_vec()
}

/// Parameters after applying `grads` once from a fresh optimizer state.
fn updated(net: &DualEncoderNet, grads: &Gradients, config: &TrainConfig) -> TrainState {
    let mut st = TrainState::from_net(net.clone(), config);
    st.apply(grads, config);
    st
}

fn unchanged(before: &DualEncoderNet, after: &DualEncoderNet, g: Group) -> bool {
    before.params(g).values() == after.params(g).values()
}

// ------------------------------------------------------- 1. relation oracle

/// Straight-line relation: batch mean, `A A^T`, rows divided by their L2 norm.
fn oracle_relation(batch: usize, c: usize, n: usize, v: &[f64]) -> Vec<f64> {
    let mut a = vec![0.0; c * n];
    for b in 0..batch {
        for i in 0..c * n {
            a[i] += v[b * c * n + i];
        }
    }
    for x in a.iter_mut() {
        *x /= batch as f64;
    }
    let mut r = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            let mut s = 0.0;
            for k in 0..n {
                s += a[i * n + k] * a[j * n + k];
            }
            r[i * c + j] = s;
        }
    }
    for i in 0..c {
        let norm = (0..c).map(|j| r[i * c + j] * r[i * c + j]).sum::<f64>().sqrt();
        if norm > 0.0 {
            for j in 0..c {
                r[i * c + j] /= norm;
            }
        }
    }
    r
}

fn relation_oracle() -> Outcome {
    const TOL: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut err_oracle, mut err_scale, mut err_perm) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let batch = rng.gen_range(1..=3);
        let c = rng.gen_range(1..=8);
        let spatial: Vec<usize> = (0..3).map(|_| rng.gen_range(1..=6)).collect();
        let n: usize = spatial.iter().product();
        let values = uniform(&mut rng, batch * c * n);
        let fm = FeatureMap::new(batch, c, spatial.clone(), values.clone()).unwrap();
        let r = compute_relation(&fm);
        err_oracle = err_oracle.max(max_abs_diff(r.values(), &oracle_relation(batch, c, n, &values)));

        let k: f64 = rng.gen_range(0.05..20.0);
        let scaled: Vec<f64> = values.iter().map(|v| v * k).collect();
        let rs = compute_relation(&FeatureMap::new(batch, c, spatial.clone(), scaled).unwrap());
        err_scale = err_scale.max(max_abs_diff(r.values(), rs.values()));

        // Channel i of the permuted map is channel perm[i] of the original.
        let mut perm: Vec<usize> = (0..c).collect();
        for i in (1..c).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let mut pv = vec![0.0; values.len()];
        for b in 0..batch {
            for (i, &p) in perm.iter().enumerate() {
                let dst = (b * c + i) * n;
                let src = (b * c + p) * n;
                pv[dst..dst + n].copy_from_slice(&values[src..src + n]);
            }
        }
        let rp = compute_relation(&FeatureMap::new(batch, c, spatial, pv).unwrap());
        let mut conj = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                conj[i * c + j] = r.values()[perm[i] * c + perm[j]];
            }
        }
        err_perm = err_perm.max(max_abs_diff(rp.values(), &conj));
    }
    let pass = err_oracle <= TOL && err_scale <= TOL && err_perm <= TOL;
    outcome(
        pass,
        format!("100 maps: oracle {err_oracle:.1e}, scale {err_scale:.1e}, permutation {err_perm:.1e} (tol {TOL:.0e})"),
    )
}

// ------------------------------------------------------ 2. gradient checks

fn feature_map(rng: &mut ChaCha8Rng, batch: usize, c: usize, spatial: &[usize]) -> FeatureMap {
    let n: usize = spatial.iter().product();
    FeatureMap::new(batch, c, spatial.to_vec(), uniform(rng, batch * c * n)).unwrap()
}

fn with_values(fm: &FeatureMap, v: &[f64]) -> FeatureMap {
    FeatureMap::new(fm.batch(), fm.channels(), fm.spatial().to_vec(), v.to_vec()).unwrap()
}

fn gradient_checks() -> Outcome {
    const TOL: f64 = 1e-3;
    const H: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut rcg, mut rct, mut dice, mut ce) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for trial in 0..12 {
        let reduction = if trial % 2 == 0 { Reduction::BatchMean } else { Reduction::PerSampleGram };
        let c = rng.gen_range(2..=5);
        let spatial = [rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(2..=3)];
        let lambda = 0.1;
        let fa = feature_map(&mut rng, 2, c, &spatial);
        let ft = feature_map(&mut rng, 2, c, &spatial);
        let fg = feature_map(&mut rng, 2, c, &spatial);
        let rel = |f: &FeatureMap| compute_relation_with(f, reduction);

        // L_rc^G with respect to both of its feature maps.
        let (_, d_aux, d_tgt) = rc_general_grad(&rel(&fa), &rel(&ft), lambda).unwrap();
        let analytic = relation_backward(&fa, reduction, &d_aux).unwrap();
        let numeric = central_difference(fa.values(), H, |v| {
            rc_general_loss(&rel(&with_values(&fa, v)), &rel(&ft), lambda).unwrap()
        });
        rcg = rcg.max(rel_error(analytic.values(), &numeric));
        let analytic = relation_backward(&ft, reduction, &d_tgt).unwrap();
        let numeric = central_difference(ft.values(), H, |v| {
            rc_general_loss(&rel(&fa), &rel(&with_values(&ft, v)), lambda).unwrap()
        });
        rcg = rcg.max(rel_error(analytic.values(), &numeric));

        // L_rc^T with respect to the target encoder's map, and the general
        // side the trainer discards.
        let (_, d_g, d_t) = rc_target_grad(&rel(&fg), &rel(&ft), lambda, None).unwrap();
        let analytic = relation_backward(&ft, reduction, &d_t).unwrap();
        let numeric = central_difference(ft.values(), H, |v| {
            rc_target_loss(&rel(&fg), &rel(&with_values(&ft, v)), lambda).unwrap()
        });
        rct = rct.max(rel_error(analytic.values(), &numeric));
        let analytic = relation_backward(&fg, reduction, &d_g).unwrap();
        let numeric = central_difference(fg.values(), H, |v| {
            rc_target_loss(&rel(&with_values(&fg, v)), &rel(&ft), lambda).unwrap()
        });
        rct = rct.max(rel_error(analytic.values(), &numeric));

        // Dice and cross-entropy on probabilities away from the clamp.
        let n = rng.gen_range(4..=40);
        let prob: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
        let target: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let (_, g) = dice_loss_grad(&prob, &target, DICE_EPS).unwrap();
        let numeric = central_difference(&prob, H, |p| dice_loss(p, &target, DICE_EPS).unwrap());
        dice = dice.max(rel_error(&g, &numeric));
        let (_, g) = cross_entropy_grad(&prob, &target).unwrap();
        let numeric = central_difference(&prob, H, |p| cross_entropy_loss(p, &target).unwrap());
        ce = ce.max(rel_error(&g, &numeric));
    }
    let pass = [rcg, rct, dice, ce].iter().all(|&e| e <= TOL);
    outcome(
        pass,
        format!("max relative error: rc_G {rcg:.1e}, rc_T {rct:.1e}, dice {dice:.1e}, CE {ce:.1e} (tol {TOL:.0e})"),
    )
}

// --------------------------------------------------- 3. routing audit

fn audit_fixture(seed: u64) -> (Vec<Sample>, Vec<Sample>, Vec<Sample>) {
    let mut cfg = PhantomConfig::small_2d(seed);
    cfg.counts.target_labeled = 6;
    cfg.counts.target_unlabeled = 6;
    cfg.counts.auxiliary = 6;
    let all = phantom(&cfg);
    (
        by_tag(&all, DomainTag::TargetLabeled),
        by_tag(&all, DomainTag::TargetUnlabeled),
        by_tag(&all, DomainTag::Auxiliary),
    )
}

fn routing_audit() -> Outcome {
    let (labeled, _, aux) = audit_fixture(31);
    let spec = ArchitectureSpec::tiny();
    let config = TrainConfig { max_steps: 10, ..TrainConfig::default() };
    let lambdas = config.lambdas(config.max_steps).unwrap();
    let mut state = TrainState::new(&spec, &config).unwrap();
    let switch = |seg, rc_general, rc_target| TermSwitches { seg, rc_general, rc_target };
    let mut failures = Vec::new();
    for round in 0..3 {
        let pair = state.sample_pair(&labeled, &aux, &config).unwrap();
        let net = &state.net;
        let step = |s: TermSwitches| {
            let grads = compute_gradients(net, &pair, &config, lambdas, s).unwrap().grads;
            updated(net, &grads, &config).net
        };
        let no_seg = step(switch(false, true, true));
        let no_rcg = step(switch(true, false, true));
        let seg_only = step(switch(true, false, false));
        let rct_only = step(switch(false, false, true));
        let checks = [
            ("decoder frozen without L_seg", unchanged(net, &no_seg, Group::Decoder)),
            ("general frozen without L_rc^G", unchanged(net, &no_rcg, Group::GeneralEncoder)),
            ("target moves under L_seg", !unchanged(net, &seg_only, Group::TargetEncoder)),
            ("target moves under L_rc^T", !unchanged(net, &rct_only, Group::TargetEncoder)),
            ("general moves under L_rc^G", !unchanged(net, &no_seg, Group::GeneralEncoder)),
        ];
        for (what, ok) in checks {
            if !ok {
                failures.push(format!("round {round}: {what}"));
            }
        }
        // Move on to a trained state so later rounds audit non-initial weights.
        relcollab_core::trainer::train_step(&mut state, &pair, &config).unwrap();
    }
    if failures.is_empty() {
        outcome(true, "3 instrumented steps, 5 exact assertions each")
    } else {
        outcome(false, failures.join("; "))
    }
}

// ------------------------------------------------------- 4. metric oracles

fn surface_oracle(m: &[u8], dims: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = dims;
    let at = |z: isize, y: isize, x: isize| -> bool {
        if z < 0 || y < 0 || x < 0 || z >= d as isize || y >= h as isize || x >= w as isize {
            return false;
        }
        m[(z as usize * h + y as usize) * w + x as usize] != 0
    };
    let mut out = vec![false; m.len()];
    for z in 0..d as isize {
        for y in 0..h as isize {
            for x in 0..w as isize {
                if !at(z, y, x) {
                    continue;
                }
                let nb = [(z - 1, y, x), (z + 1, y, x), (z, y - 1, x), (z, y + 1, x), (z, y, x - 1), (z, y, x + 1)];
                out[(z as usize * h + y as usize) * w + x as usize] = nb.iter().any(|&(a, b, c)| !at(a, b, c));
            }
        }
    }
    out
}

/// NSD by all-pairs distances between the two surfaces. Squared distances
/// are summed last axis first.
fn nsd_oracle(a: &[u8], b: &[u8], dims: [usize; 3], spacing: [f64; 3], tau: f64) -> f64 {
    let coords = |s: &[bool]| -> Vec<[usize; 3]> {
        let [_, h, w] = dims;
        s.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| [i / (h * w), (i / w) % h, i % w]).collect()
    };
    let sa = coords(&surface_oracle(a, dims));
    let sb = coords(&surface_oracle(b, dims));
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    if sa.is_empty() || sb.is_empty() {
        return 0.0;
    }
    let d2 = |p: &[usize; 3], q: &[usize; 3]| {
        let mut s = 0.0;
        for ax in (0..3).rev() {
            let d = spacing[ax] * (p[ax] as f64 - q[ax] as f64);
            s += d * d;
        }
        s
    };
    let hits = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        from.iter().filter(|p| to.iter().map(|q| d2(p, q)).fold(f64::INFINITY, f64::min) <= tau * tau).count()
    };
    (hits(&sa, &sb) + hits(&sb, &sa)) as f64 / (sa.len() + sb.len()) as f64
}

fn metric_oracles() -> Outcome {
    // All 2^16 x 2^16 pairs of 4x4 masks against bit counting.
    let masks: Vec<Mask> = (0u32..1 << 16)
        .map(|bits| Grid::new(vec![4, 4], (0..16).map(|i| ((bits >> i) & 1) as u8).collect()).unwrap())
        .collect();
    let mut dsc_mismatch = 0u64;
    for a in 0u32..1 << 16 {
        for b in 0u32..1 << 16 {
            let (na, nb) = (a.count_ones(), b.count_ones());
            let expect = if na + nb == 0 { 1.0 } else { 2.0 * (a & b).count_ones() as f64 / (na + nb) as f64 };
            if dsc(&masks[a as usize], &masks[b as usize]).unwrap() != expect {
                dsc_mismatch += 1;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let dims = [8, 8, 8];
    let mut nsd_mismatch = 0u32;
    let mut surface_mismatch = 0u32;
    for i in 0..200 {
        let pa: f64 = rng.gen_range(0.05..0.7);
        let pb: f64 = rng.gen_range(0.05..0.7);
        let mut a: Vec<u8> = (0..512).map(|_| rng.gen_bool(pa) as u8).collect();
        let b: Vec<u8> = (0..512).map(|_| rng.gen_bool(pb) as u8).collect();
        if i % 50 == 0 {
            a.fill(0);
        }
        let spacing = [rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0)];
        let ga = Grid::new(dims.to_vec(), a.clone()).unwrap();
        let gb = Grid::new(dims.to_vec(), b.clone()).unwrap();
        let surf: Vec<bool> = extract_surface(&gb).data().iter().map(|&v| v != 0).collect();
        if surf != surface_oracle(&b, dims) {
            surface_mismatch += 1;
        }
        for tau in [1.0, 3.0, 5.0] {
            if nsd(&ga, &gb, &spacing, tau).unwrap() != nsd_oracle(&a, &b, dims, spacing, tau) {
                nsd_mismatch += 1;
            }
        }
    }
    let pass = dsc_mismatch == 0 && nsd_mismatch == 0 && surface_mismatch == 0;
    outcome(
        pass,
        format!(
            "dsc: {dsc_mismatch} mismatches over 2^32 pairs; nsd: {nsd_mismatch} of 600, surfaces: {surface_mismatch} of 200 (exact)"
        ),
    )
}

// ---------------------------------------------------------- 5. ramp schedule

fn ramp_schedule() -> Outcome {
    const TOL: f64 = 1e-9;
    let start = 0.1 * (-5.0f64).exp();
    let mut worst_start = 0.0f64;
    let mut end_exact = true;
    let mut monotone = true;
    for t_max in [1u64, 2, 7, 50, 200, 1000, 12_345] {
        let s = RampSchedule::new(0.1, t_max);
        end_exact &= ramp_lambda(t_max, &s).unwrap() == 0.1;
        worst_start = worst_start.max((ramp_lambda(0, &s).unwrap() - start).abs());
        let mut prev = f64::NEG_INFINITY;
        for step in 0..=t_max {
            let v = ramp_lambda(step, &s).unwrap();
            monotone &= v >= prev;
            prev = v;
        }
        let cfg = TrainConfig { max_steps: t_max, ..TrainConfig::default() };
        end_exact &= cfg.lambdas(t_max).unwrap() == (0.1, 0.1);
    }
    let pass = end_exact && worst_start <= TOL && monotone;
    outcome(
        pass,
        format!("lambda(T)=0.1 exact: {end_exact}; |lambda(0) - 0.1e^-5| = {worst_start:.1e} (tol {TOL:.0e}); monotone: {monotone}"),
    )
}

// ------------------------------------------------------ 6. overfit smoke

fn overfit_smoke() -> Outcome {
    const MIN_DSC: f64 = 0.90;
    let mut cfg = PhantomConfig::small_2d(0);
    cfg.counts.target_labeled = 20;
    cfg.counts.auxiliary = 20;
    let all = phantom(&cfg);
    let target = by_tag(&all, DomainTag::TargetLabeled);
    let aux = by_tag(&all, DomainTag::Auxiliary);
    let spec = ArchitectureSpec::tiny();
    let data = Datasets { target: &target, auxiliary: &aux, eval: &[] };

    let full = TrainConfig { max_steps: 200, mode: Mode::Full, ..TrainConfig::default() };
    let mut st = TrainState::new(&spec, &full).unwrap();
    train(&mut st, &full, &data, &mut Silent).unwrap();
    let train_dsc = evaluate(&st.net, &target, &EvalConfig::default()).unwrap().summary().dsc.mean;

    let base = TrainConfig { mode: Mode::Baseline, ..full.clone() };
    let mut sb = TrainState::new(&spec, &base).unwrap();
    let done = train(&mut sb, &base, &data, &mut Silent).unwrap();
    let zero = sb.history.iter().all(|l| l.rc_general == 0.0 && l.rc_target == 0.0 && l.lambda_g == 0.0 && l.lambda_t == 0.0);
    let pass = train_dsc >= MIN_DSC && done.steps == 200 && zero;
    outcome(
        pass,
        format!(
            "full: train DSC {train_dsc:.4} after 200 steps (need >= {MIN_DSC}); baseline: {} steps, rc terms exactly 0: {zero}",
            done.steps
        ),
    )
}

// --------------------------------------------------------- 7. ablation

/// Held-out target DSC for one seed: 20 labeled target cases split 4 train
/// / 16 test, 40 auxiliary cases, 200 steps.
fn ablation_run(seed: u64, mode: Mode) -> f64 {
    let mut cfg = ablation_phantom(seed);
    cfg.seed = 1000 + seed;
    let all = phantom(&cfg);
    let labeled = by_tag(&all, DomainTag::TargetLabeled);
    let aux = by_tag(&all, DomainTag::Auxiliary);
    let ids: Vec<String> = labeled.iter().map(|s| s.id.clone()).collect();
    let split = &make_folds(&ids, 5, seed, FoldMode::Inverted).unwrap()[0];
    let train_set: Vec<Sample> = labeled.iter().filter(|s| split.train_ids.contains(&s.id)).cloned().collect();
    let test_set: Vec<Sample> = labeled.iter().filter(|s| split.test_ids.contains(&s.id)).cloned().collect();
    assert_eq!((train_set.len(), test_set.len()), (4, 16));
    let config = TrainConfig { max_steps: 200, mode, seed, ..TrainConfig::default() };
    let mut st = TrainState::new(&ArchitectureSpec::tiny(), &config).unwrap();
    let data = Datasets { target: &train_set, auxiliary: &aux, eval: &test_set };
    let out = train(&mut st, &config, &data, &mut Silent).unwrap();
    out.final_report.expect("eval set is non-empty").summary().dsc.mean
}

/// Noisier, lower-contrast target lesions than the default phantom so the
/// four-case task is not saturated.
fn ablation_phantom(seed: u64) -> PhantomConfig {
    let mut cfg = PhantomConfig::small_2d(seed);
    cfg.counts.target_labeled = 20;
    cfg.counts.auxiliary = 40;
    cfg.noise_std = 200.0;
    cfg.target.contrast = 250.0;
    cfg
}

fn ablation_direction() -> Outcome {
    const NEED: usize = 4;
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..5 {
        let b = ablation_run(seed, Mode::Baseline);
        let f = ablation_run(seed, Mode::Full);
        wins += (f >= b) as usize;
        rows.push(format!("s{seed} {b:.4}/{f:.4}"));
    }
    outcome(
        wins >= NEED,
        format!("full >= baseline in {wins}/5 seeds (need {NEED}); baseline/full: {}", rows.join(", ")),
    )
}

// ------------------------------------------------------------ 8. semi

fn semi_extension() -> Outcome {
    let (labeled, unlabeled, aux) = audit_fixture(32);
    let spec = ArchitectureSpec::tiny();
    let semi = TrainConfig { max_steps: 6, mode: Mode::Semi, ..TrainConfig::default() };
    let lambdas = semi.lambdas(semi.max_steps).unwrap();
    let net = DualEncoderNet::build(&spec, 5).unwrap();
    let mut failures: Vec<&str> = Vec::new();
    let mut check = |ok: bool, what: &'static str| {
        if !ok {
            failures.push(what);
        }
    };

    let pair_l = BatchPair { target: labeled[..2].to_vec(), auxiliary: aux[..2].to_vec() };
    let mut mixed = labeled[..2].to_vec();
    mixed.extend_from_slice(&unlabeled[..2]);
    let pair_lu = BatchPair { target: mixed, auxiliary: aux[..2].to_vec() };
    let grads = |pair: &BatchPair, s: TermSwitches| compute_gradients(&net, pair, &semi, lambdas, s).unwrap().grads;
    let seg_only = TermSwitches { seg: true, rc_general: false, rc_target: false };
    let rel_only = TermSwitches { seg: false, rc_general: true, rc_target: true };

    check(grads(&pair_l, seg_only) == grads(&pair_lu, seg_only), "unlabeled samples changed L_seg gradients");
    let (gl, glu) = (grads(&pair_l, TermSwitches::default()), grads(&pair_lu, TermSwitches::default()));
    check(gl.decoder == glu.decoder, "unlabeled samples changed decoder gradients");
    check(grads(&pair_l, rel_only) != grads(&pair_lu, rel_only), "unlabeled samples did not reach relation gradients");
    let no_rcg = grads(&pair_lu, TermSwitches { seg: true, rc_general: false, rc_target: true });
    check(no_rcg.general.iter().all(|&v| v == 0.0), "general encoder got gradient without L_rc^G");

    // A batch with no labeled sample at all.
    let pair_u = BatchPair { target: unlabeled[..2].to_vec(), auxiliary: aux[..2].to_vec() };
    let mut st = TrainState::from_net(net.clone(), &semi);
    match semi_step(&mut st, &pair_u, &semi) {
        Ok(out) => {
            check(out.losses.seg == 0.0, "unlabeled-only batch has a segmentation loss");
            check(unchanged(&net, &st.net, Group::Decoder), "unlabeled-only batch moved the decoder");
            check(!unchanged(&net, &st.net, Group::TargetEncoder), "unlabeled-only batch left the target encoder");
        }
        Err(_) => check(false, "unlabeled-only batch failed"),
    }
    let supervised = TrainConfig { mode: Mode::Full, ..semi.clone() };
    let mut st = TrainState::from_net(net.clone(), &supervised);
    check(
        matches!(relcollab_core::trainer::train_step(&mut st, &pair_lu, &supervised), Err(Error::MissingLabel(_))),
        "supervised mode accepted an unlabeled sample",
    );

    // Determinism of semi training with a mixed pool.
    let mut pool = labeled.clone();
    pool.extend(unlabeled.iter().cloned());
    let run = |config: &TrainConfig, target: &[Sample]| {
        let mut st = TrainState::new(&spec, config).unwrap();
        let data = Datasets { target, auxiliary: &aux, eval: &[] };
        train(&mut st, config, &data, &mut Silent).unwrap();
        st
    };
    let (a, b) = (run(&semi, &pool), run(&semi, &pool));
    let same = |x: &TrainState, y: &TrainState| {
        Group::ALL.iter().all(|&g| params_of(&x.net, g) == params_of(&y.net, g)) && x.history == y.history
    };
    check(same(&a, &b), "semi training is not deterministic");

    // No unlabeled samples: semi mode must reproduce supervised full mode.
    let full = TrainConfig { mode: Mode::Full, ..semi.clone() };
    check(same(&run(&semi, &labeled), &run(&full, &labeled)), "all-labeled semi run differs from supervised");

    if failures.is_empty() {
        outcome(true, "routing unchanged by unlabeled data, unlabeled-only batch ok, deterministic, all-labeled run bit-identical")
    } else {
        outcome(false, failures.join("; "))
    }
}

// ------------------------------------------------- 9. architecture shapes

fn expected_rows(preset: &str) -> Vec<(&'static str, &'static str)> {
    match preset {
        "standard_3d" => vec![
            ("input", "1x56x160x192"),
            ("conv1", "32x56x160x192"),
            ("down1", "64x56x80x96"),
            ("conv2", "64x56x80x96"),
            ("down2", "128x28x40x48"),
            ("conv3", "128x28x40x48"),
            ("down3", "256x14x20x24"),
            ("conv4", "256x14x20x24"),
            ("down4", "320x7x10x12"),
            ("conv5", "320x7x10x12"),
            ("down5", "320x7x5x6"),
            ("conv6", "320x7x10x12"),
            ("conv7", "256x14x20x24"),
            ("conv8", "128x28x40x48"),
            ("conv9", "64x56x80x96"),
            ("conv10", "32x56x160x192"),
            ("output", "1x56x160x192"),
        ],
        _ => vec![
            ("input", "1x448x384"),
            ("conv1", "32x448x384"),
            ("down1", "64x224x192"),
            ("conv2", "64x224x192"),
            ("down2", "128x112x96"),
            ("conv3", "128x112x96"),
            ("down3", "256x56x48"),
            ("conv4", "256x56x48"),
            ("down4", "480x28x24"),
            ("conv5", "480x28x24"),
            ("down5", "480x14x12"),
            ("conv6", "480x14x12"),
            ("down6", "480x7x6"),
            ("conv7", "480x14x12"),
            ("conv8", "480x28x24"),
            ("conv9", "256x56x48"),
            ("conv10", "128x112x96"),
            ("conv11", "64x224x192"),
            ("conv12", "32x448x384"),
            ("output", "1x448x384"),
        ],
    }
}

/// Spatial dims a real forward pass produces at every encoder block and
/// decoder conv, using a one-channel copy of the preset.
fn forward_dims(spec: &ArchitectureSpec) -> Vec<Vec<usize>> {
    let mut thin = spec.clone();
    thin.channels = vec![1; spec.channels.len()];
    let net = DualEncoderNet::build(&thin, 0).unwrap();
    let dims = thin.patch3();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor { channels: 1, dims, data: uniform(&mut rng, dims.iter().product()) };
    let pass = net.forward_target(&x).unwrap();
    let show = |d: [usize; 3]| d[3 - spec.ndim..].to_vec();
    let mut out = vec![show(dims)];
    out.extend(pass.target.outputs().iter().map(|t| show(t.dims)));
    out.extend(pass.decoder.stage_outputs().iter().map(|t| show(t.dims)));
    out.push(show(pass.decoder.outputs[0].dims));
    out
}

fn architecture_conformance() -> Outcome {
    let mut problems = Vec::new();
    let mut rows = 0;
    for (preset, spec) in [("standard_3d", ArchitectureSpec::standard_3d()), ("standard_2d", ArchitectureSpec::standard_2d())] {
        let net = DualEncoderNet::build_uninit(&spec).unwrap();
        let probed: Vec<_> = net.probe_shapes().into_iter().filter(|s| !s.stage.starts_with("up") && s.stage != "fuse").collect();
        let expected = expected_rows(preset);
        if probed.len() != expected.len() {
            problems.push(format!("{preset}: {} probe rows, expected {}", probed.len(), expected.len()));
            continue;
        }
        for (p, (stage, label)) in probed.iter().zip(&expected) {
            rows += 1;
            if p.stage != *stage || p.label() != *label {
                problems.push(format!("{preset} {}: {} (expected {stage} {label})", p.stage, p.label()));
            }
        }
        let actual = forward_dims(&spec);
        let geometric: Vec<Vec<usize>> = probed.iter().map(|p| p.dims.clone()).collect();
        if actual != geometric {
            problems.push(format!("{preset}: forward pass dims disagree with probe"));
        }
    }
    if problems.is_empty() {
        outcome(true, format!("{rows} feature-size rows match, confirmed by forward passes"))
    } else {
        outcome(false, problems.join("; "))
    }
}

// -------------------------------------------------------------- driver

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(u32, &str, Duration, fn() -> Outcome); 9] = [
        (1, "relation math oracle", Duration::from_secs(60), relation_oracle),
        (2, "gradient checks", Duration::from_secs(120), gradient_checks),
        (3, "gradient routing audit", Duration::from_secs(120), routing_audit),
        (4, "metric oracles", Duration::from_secs(300), metric_oracles),
        (5, "ramp schedule", Duration::from_secs(60), ramp_schedule),
        (6, "overfit smoke test", Duration::from_secs(600), overfit_smoke),
        (7, "ablation direction", Duration::from_secs(3600), ablation_direction),
        (8, "semi-supervised extension", Duration::from_secs(120), semi_extension),
        (9, "architecture conformance", Duration::from_secs(60), architecture_conformance),
    ];
    let mut failed = 0;
    for (id, name, budget, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == &id.to_string()) {
            continue;
        }
        let t0 = Instant::now();
        let out = run();
        let took = t0.elapsed();
        let pass = out.pass && took <= budget;
        failed += !pass as u32;
        println!(
            "criterion {id} {name}: {} | {} | {:.1}s of {}s",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
