mod common;

use aajr::linalg::Matrix;
use aajr::trainer::{evaluate_nominal_risk, evaluate_robust_risk};
use aajr::{
    train, Environment, InnerLoopConfig, NormKind, PerturbationSet, Policy, RegularizerConfig,
    RunMetrics, SamplerKind, TrainConfig, TrainMode,
};
use aajr::{AajrForm, LossKind};
use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(mode: TrainMode, k: usize, eps: f64, d: usize) -> TrainConfig {
    TrainConfig {
        mode,
        outer_lr: 0.1,
        outer_steps: 5,
        batch_size: 8,
        inner: InnerLoopConfig::new(0.2, k),
        set: PerturbationSet::new(NormKind::L2, eps, d).unwrap(),
        reg: RegularizerConfig::default(),
        seed: 3,
    }
}

fn peers_env() -> Environment {
    Environment::new(
        LossKind::QuadraticCongestion,
        vec![0.5, -0.5],
        Matrix::diag(&[1.0, 0.5]),
        2,
        SamplerKind::ObservedPeers,
        0,
    )
    .unwrap()
}

#[test]
fn one_nominal_step_matches_closed_form_least_squares_gradient() {
    let env = peers_env();
    let w = vec![vec![0.3, -0.1], vec![0.2, 0.4]];
    let b = vec![0.05, -0.02];
    let policy = Policy::linear(Matrix::from_rows(&w).unwrap(), b.clone()).unwrap();
    let mut cfg = config(TrainMode::Nominal, 0, 0.3, 2);
    cfg.outer_steps = 1;
    let out = train(&cfg, &env, policy.clone()).unwrap();

    // Reproduce the batch and the gradient of mean ½‖W s + b + A a − c‖².
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch: Vec<_> = (0..cfg.batch_size).map(|_| env.draw(&mut rng)).collect();
    let mut gw = [[0.0; 2]; 2];
    let mut gb = [0.0; 2];
    for (s, a) in &batch {
        for i in 0..2 {
            let ai = [1.0, 0.5][i] * a[i];
            let r = w[i][0] * s[0] + w[i][1] * s[1] + b[i] + ai - [0.5, -0.5][i];
            gw[i][0] += r * s[0] / 8.0;
            gw[i][1] += r * s[1] / 8.0;
            gb[i] += r / 8.0;
        }
    }
    let expected = vec![
        w[0][0] - 0.1 * gw[0][0],
        w[0][1] - 0.1 * gw[0][1],
        w[1][0] - 0.1 * gw[1][0],
        w[1][1] - 0.1 * gw[1][1],
        b[0] - 0.1 * gb[0],
        b[1] - 0.1 * gb[1],
    ];
    let got = out.params.to_flat();
    for (g, e) in got.iter().zip(&expected) {
        assert!((g - e).abs() < 1e-14, "{got:?} vs {expected:?}");
    }
}

#[test]
fn robust_modes_collapse_to_nominal_without_adversary_or_penalty() {
    let env = peers_env();
    let init = tanh_net(1, 2, 4, 2);
    let nominal = train(&config(TrainMode::Nominal, 0, 0.3, 2), &env, init.clone()).unwrap();
    for mode in [TrainMode::RobustPlain, TrainMode::RobustAajr] {
        let out = train(&config(mode, 0, 0.3, 2), &env, init.clone()).unwrap();
        assert_eq!(out.params.to_flat(), nominal.params.to_flat(), "{mode:?}");
    }
    let zero_radius = train(&config(TrainMode::RobustAajr, 4, 0.0, 2), &env, init.clone()).unwrap();
    assert_eq!(zero_radius.params.to_flat(), nominal.params.to_flat());
}

#[test]
fn robust_plain_follows_the_worst_case_in_one_dimension() {
    // π(s) = w s + b, L = ½(z − 1)², |δ| ≤ ε, one sample per step: the inner
    // maximizer moves s away from the fit, so the gradient uses s + δ*.
    let env = Environment::quadratic(vec![1.0], 1).unwrap();
    let policy = Policy::linear(Matrix::from_rows(&[vec![0.5]]).unwrap(), vec![0.0]).unwrap();
    let mut cfg = config(TrainMode::RobustPlain, 1, 0.2, 1);
    cfg.batch_size = 1;
    cfg.outer_steps = 1;
    cfg.set = PerturbationSet::new(NormKind::Linf, 0.2, 1).unwrap();
    cfg.inner = InnerLoopConfig::new(10.0, 1);
    let out = train(&cfg, &env, policy).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (s, _) = env.draw(&mut rng);
    let r0 = 0.5 * s[0] - 1.0;
    let delta = (10.0 * 0.5 * r0).clamp(-0.2, 0.2);
    let x = s[0] + delta;
    let r = 0.5 * x - 1.0;
    let got = out.params.to_flat();
    assert!((got[0] - (0.5 - 0.1 * r * x)).abs() < 1e-14);
    assert!((got[1] - (0.0 - 0.1 * r)).abs() < 1e-14);
}

#[test]
fn robust_risk_reduces_to_nominal_risk_without_adversary() {
    let env = peers_env();
    let net = tanh_net(4, 2, 5, 2);
    let nominal = evaluate_nominal_risk(&net, &env, 200, 9).unwrap();
    let no_steps = evaluate_robust_risk(
        &net,
        &env,
        &PerturbationSet::new(NormKind::L2, 0.5, 2).unwrap(),
        &InnerLoopConfig::new(0.5, 0),
        200,
        9,
    )
    .unwrap();
    let no_radius = evaluate_robust_risk(
        &net,
        &env,
        &PerturbationSet::new(NormKind::L2, 0.0, 2).unwrap(),
        &InnerLoopConfig::new(0.5, 5),
        200,
        9,
    )
    .unwrap();
    assert_eq!(no_steps, nominal);
    assert_eq!(no_radius, nominal);
    let attacked = evaluate_robust_risk(
        &net,
        &env,
        &PerturbationSet::new(NormKind::L2, 0.5, 2).unwrap(),
        &InnerLoopConfig::new(0.5, 5),
        200,
        9,
    )
    .unwrap();
    assert!(attacked > nominal);
}

#[test]
fn every_mode_reduces_nominal_risk() {
    let env = peers_env();
    let init = tanh_net(2, 2, 6, 2);
    let before = evaluate_nominal_risk(&init, &env, 500, 77).unwrap();
    for mode in [
        TrainMode::Nominal,
        TrainMode::RobustPlain,
        TrainMode::RobustAajr,
        TrainMode::RobustGlobal,
    ] {
        let mut cfg = config(mode, 3, 0.1, 2);
        cfg.outer_steps = 150;
        cfg.reg.lambda = 0.5;
        cfg.reg.form = AajrForm::Hinge;
        let out = train(&cfg, &env, init.clone()).unwrap();
        assert!(out.metrics.aborted.is_none());
        let after = evaluate_nominal_risk(&out.params, &env, 500, 77).unwrap();
        assert!(after < 0.5 * before, "{mode:?}: {before} -> {after}");
    }
}

#[test]
fn penalties_reduce_their_targets() {
    let env = peers_env();
    let init = tanh_net(2, 2, 6, 2).scaled(3.0);
    let mut base = config(TrainMode::RobustPlain, 3, 0.1, 2);
    base.outer_steps = 100;
    base.reg.gamma = 0.3;
    base.reg.gamma_adv = 0.3;
    let plain = train(&base, &env, init.clone()).unwrap();
    let mut aajr = base.clone();
    aajr.mode = TrainMode::RobustAajr;
    aajr.reg.lambda = 5.0;
    let aajr = train(&aajr, &env, init.clone()).unwrap();
    let mut global = base.clone();
    global.mode = TrainMode::RobustGlobal;
    global.reg.lambda = 5.0;
    let global = train(&global, &env, init).unwrap();
    let last = |m: &RunMetrics| m.records.last().unwrap().clone();
    assert!(last(&aajr.metrics).aajr_penalty < last(&plain.metrics).aajr_penalty);
    assert!(last(&global.metrics).global_penalty < last(&plain.metrics).global_penalty);
}

#[test]
fn divergence_stops_training_with_finite_parameters() {
    let env = peers_env();
    let mut cfg = config(TrainMode::Nominal, 0, 0.3, 2);
    cfg.outer_lr = 1e3;
    cfg.outer_steps = 200;
    let out = train(&cfg, &env, tanh_net(0, 2, 4, 2)).unwrap();
    let abort = out.metrics.aborted.clone().expect("run should diverge");
    assert!(abort.step < 200);
    assert_eq!(out.metrics.records.len(), abort.step);
    assert!(out.params.to_flat().iter().all(|v| v.is_finite()));
}

#[test]
fn metrics_are_byte_identical_across_runs() {
    let env = peers_env();
    let mut cfg = config(TrainMode::RobustAajr, 3, 0.2, 2);
    cfg.reg.lambda = 0.3;
    cfg.outer_steps = 20;
    let a = train(&cfg, &env, tanh_net(5, 2, 4, 2)).unwrap();
    let b = train(&cfg, &env, tanh_net(5, 2, 4, 2)).unwrap();
    assert_eq!(a.metrics.to_csv().as_bytes(), b.metrics.to_csv().as_bytes());
    assert_eq!(a.params.to_flat(), b.params.to_flat());
    assert_eq!(a.metrics.to_csv().lines().count(), 21);
}
