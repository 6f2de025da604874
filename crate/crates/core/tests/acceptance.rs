//! Acceptance run: one PASS/FAIL line per criterion, tolerances pinned below.
//! Exits non-zero when any criterion fails.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use aajr::cli::cmd_train;
use aajr::linalg::Matrix;
use aajr::policy::{Probe, ProbeValue};
use aajr::trainer::price_of_robustness;
use aajr::verification::{
    check_inclusion, class_witness, stable_step_size, stability_of, witness_end_to_end,
    witness_grid_check, VerifyOptions, WitnessSpec,
};
use aajr::{
    parse_config, pga_run, Environment, InnerLoopConfig, InnerObjective, LossKind, NormKind,
    PerturbationSet, Policy, RegularizerConfig, SamplerKind,
};
use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-5;
const ADJOINT_TOL: f64 = 1e-12;
const AUTODIFF_BUDGET: Duration = Duration::from_secs(10);
const INCLUSION_TOL: f64 = 1e-9;
const MIN_TRAJECTORIES: usize = 50;
const WITNESS_TOL: f64 = 1e-9;
const CURV_REL_TOL: f64 = 1e-4;
const TIGHT_C_HAT: f64 = 1e-5;
const TIGHT_SLACK: f64 = 1e-9;
const MIN_SEEDS: u64 = 20;
const ASCENT_TOL: f64 = 1e-8;
const LIPSCHITZ_PAIRS: usize = 1000;
const LIPSCHITZ_TOL: f64 = 1e-9;
const SWEEP_BUDGET: Duration = Duration::from_secs(15 * 60);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn softplus_env(d: usize, m: usize, seed: u64) -> Environment {
    let c: Vec<f64> = (0..m).map(|i| 0.4 - 0.2 * i as f64).collect();
    let a = Matrix::from_fn(m, 1, |i, _| 0.3 - 0.1 * i as f64);
    Environment::new(LossKind::SoftplusCongestion { beta: 2.0 }, c, a, d, SamplerKind::Independent, seed).unwrap()
}

fn quadratic_env(d: usize, m: usize, seed: u64) -> Environment {
    let c: Vec<f64> = (0..m).map(|i| 0.5 - 0.25 * i as f64).collect();
    let a = Matrix::from_fn(m, 1, |i, _| 0.2 * (i as f64 + 1.0));
    Environment::new(LossKind::QuadraticCongestion, c, a, d, SamplerKind::Independent, seed).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst_grad = 0.0f64;
    let mut worst_jvp = 0.0f64;
    let mut worst_adj = 0.0f64;
    for seed in 0..10 {
        let net = random_tanh_net(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let s = uniform(&mut rng, net.input_dim(), 1.0);
        let u = unit_vector(&mut rng, net.input_dim());
        let w = uniform(&mut rng, net.output_dim(), 1.0);
        let c = uniform(&mut rng, net.output_dim(), 1.0);
        let objective = |z: &[f64], t: &[f64]| ProbeValue {
            value: z.iter().zip(&c).map(|(a, b)| a.sin() * b).sum::<f64>() + 0.5 * dot(t, t),
            d_output: z.iter().zip(&c).map(|(a, b)| a.cos() * b).collect(),
            d_tangent: t.to_vec(),
        };
        let (_, grads) = net
            .param_gradient(&[Probe {
                state: &s,
                direction: Some(&u),
                objective: &objective,
            }])
            .unwrap();
        let fd = fd_gradient(
            |th| {
                let (z, t) = net.from_flat(th).unwrap().forward_jvp(&s, &u).unwrap();
                z.iter().zip(&c).map(|(a, b)| a.sin() * b).sum::<f64>() + 0.5 * dot(&t, &t)
            },
            &net.to_flat(),
            FD_STEP,
        );
        worst_grad = worst_grad.max(rel_err(&grads.flatten(), &fd));
        let jv = net.jvp(&s, &u).unwrap();
        let fdj = fd_directional(|x| net.forward(x).unwrap(), &s, &u, FD_STEP);
        worst_jvp = worst_jvp.max(rel_err(&jv, &fdj));
        worst_adj = worst_adj.max((dot(&w, &jv) - dot(&net.vjp(&s, &w).unwrap(), &u)).abs());
    }
    let elapsed = start.elapsed();
    outcome(
        worst_grad <= FD_REL_TOL && worst_jvp <= FD_REL_TOL && worst_adj <= ADJOINT_TOL && elapsed < AUTODIFF_BUDGET,
        format!(
            "10 nets: param-grad rel err {worst_grad:.2e}, jvp rel err {worst_jvp:.2e}, adjoint {worst_adj:.2e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Outcome {
    let gamma = 1.0;
    let reg = RegularizerConfig::default();
    let mut trajectories = 0;
    let mut premise_met = 0;
    let mut violations = 0;
    let mut worst_amp = 0.0f64;
    for seed in 0..8u64 {
        let d = 2 + (seed as usize % 3);
        let net = tanh_net(seed, d, 6, 2);
        let sigma0 = spectral_norm_at_origin(&net);
        let policy = net.scaled((0.8 / sigma0).sqrt());
        let env = if seed % 2 == 0 { quadratic_env(d, 2, seed) } else { softplus_env(d, 2, seed) };
        let set = PerturbationSet::new(if seed % 2 == 0 { NormKind::L2 } else { NormKind::Linf }, 0.3, d).unwrap();
        let samples = env.sample_batch(seed, 10);
        let r = check_inclusion(&policy, &env, &samples, &set, &InnerLoopConfig::new(0.5, 6), gamma, &reg, INCLUSION_TOL)
            .unwrap();
        trajectories += r.entries.len();
        premise_met += r.premise_met;
        violations += r.violations;
        for e in r.entries.iter().filter(|e| e.premise_met) {
            worst_amp = worst_amp.max(e.max_dir_amp);
        }
    }
    outcome(
        premise_met >= MIN_TRAJECTORIES && violations == 0,
        format!(
            "{premise_met}/{trajectories} trajectories with sup ||J||_2 <= gamma, {violations} violations, max ||J u_t|| = {worst_amp:.4}"
        ),
    )
}

fn spectral_norm_at_origin(net: &Policy) -> f64 {
    svd_max(&net.jacobian(&vec![0.0; net.input_dim()]).unwrap())
}

fn criterion_3() -> Outcome {
    let gamma = 0.5;
    let reg = RegularizerConfig::default();
    let grid = witness_grid_check(gamma, &reg).unwrap();
    let mut worst_svd = 0.0f64;
    let mut worst_dir = f64::NEG_INFINITY;
    let mut all = grid.pass;
    for d in [2usize, 4, 8] {
        for k in 1..d {
            for mult in [2.0, 10.0] {
                let basis = random_orthonormal((d * 100 + k) as u64, d, k);
                let spec = WitnessSpec {
                    gamma,
                    big_m: mult * gamma,
                    basis: basis.clone(),
                    dim: d,
                };
                let oracle = svd_max(&spec.jacobian().unwrap());
                let mut rng = ChaCha8Rng::seed_from_u64(d as u64 + k as u64);
                let dirs: Vec<Vec<f64>> = (0..8)
                    .map(|_| {
                        let w = unit_vector(&mut rng, k);
                        (0..d).map(|i| (0..k).map(|j| w[j] * basis[j][i]).sum()).collect()
                    })
                    .collect();
                let r = class_witness(&spec, &dirs, &reg).unwrap();
                worst_svd = worst_svd.max((r.spectral_norm - oracle).abs()).max((oracle - mult * gamma).abs());
                worst_dir = worst_dir.max(r.max_dir_amp - gamma);
                all &= r.pass;
            }
        }
    }
    let spec = WitnessSpec {
        gamma,
        big_m: 5.0,
        basis: random_orthonormal(17, 4, 2),
        dim: 4,
    };
    let e2e = witness_end_to_end(&spec, vec![1.0, -1.0, 0.5, 0.25], 0.3, &InnerLoopConfig::new(0.5, 6), 30, 5, &reg)
        .unwrap();
    outcome(
        all && worst_svd <= WITNESS_TOL && worst_dir <= WITNESS_TOL && e2e.pass,
        format!(
            "36 grid cells: sigma vs SVD {worst_svd:.1e}, directional excess {worst_dir:.1e}; end-to-end: u_t off U {:.1e}, ||Ju|| {:.3} <= {gamma}, sigma {:.3}",
            e2e.max_out_of_subspace, e2e.max_dir_amp, e2e.spectral_norm
        ),
    )
}

/// Runs the smoothness and stability checks on `MIN_SEEDS` seeds per environment.
fn seeded_checks() -> (usize, usize, usize, f64, f64) {
    let opts = VerifyOptions {
        tol_curv_rel: CURV_REL_TOL,
        tol_ineq: ASCENT_TOL,
        ..VerifyOptions::default()
    };
    let mut runs = 0;
    let mut smooth_fail = 0;
    let mut stab_fail = 0;
    let mut min_margin = f64::INFINITY;
    let mut min_slack = f64::INFINITY;
    for seed in 0..MIN_SEEDS {
        for quad in [true, false] {
            let d = 2 + (seed as usize % 4);
            let m = 2 + (seed as usize % 2);
            let env = if quad { quadratic_env(d, m, seed) } else { softplus_env(d, m, seed) };
            let policy = tanh_net(seed, d, 8, m).scaled(1.0 + 0.1 * (seed % 5) as f64);
            let set = PerturbationSet::new(if seed % 2 == 0 { NormKind::L2 } else { NormKind::Linf }, 0.4, d).unwrap();
            let (s, a) = env.sample(seed);
            let obj = InnerObjective::new(&policy, &env, &s, &a).unwrap();
            let (cfg, smooth) = stable_step_size(&obj, &set, &InnerLoopConfig::new(0.5, 8), &opts).unwrap();
            runs += 1;
            smooth_fail += usize::from(!smooth.pass);
            min_margin = min_margin.min(smooth.margin);
            let st = stability_of(&smooth.trajectory, &set, cfg.eta, smooth.report.l_eff_bound, &opts);
            stab_fail += usize::from(!(st.pass && st.premise_met));
            for v in [st.min_interior_slack, st.min_projected_slack, st.min_directional_slack].into_iter().flatten() {
                min_slack = min_slack.min(v);
            }
        }
    }
    (runs, smooth_fail, stab_fail, min_margin, min_slack)
}

fn criterion_4(checks: &(usize, usize, usize, f64, f64)) -> Outcome {
    let (runs, smooth_fail, _, min_margin, _) = *checks;
    let opts = VerifyOptions::default();
    let mut worst_c = 0.0f64;
    let mut worst_slack = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..2).map(|_| uniform(&mut rng, 3, 1.0)).collect();
        let policy = Policy::linear(Matrix::from_rows(&rows).unwrap(), uniform(&mut rng, 2, 0.3)).unwrap();
        let env = quadratic_env(3, 2, seed);
        let (s, a) = env.sample(seed);
        let obj = InnerObjective::new(&policy, &env, &s, &a).unwrap();
        let set = PerturbationSet::new(NormKind::L2, 0.5, 3).unwrap();
        let (_, smooth) = stable_step_size(&obj, &set, &InnerLoopConfig::new(0.3, 6), &opts).unwrap();
        worst_c = worst_c.max(smooth.report.c_hat);
        worst_slack = worst_slack.max((smooth.report.l_eff_bound - smooth.report.max_curvature).abs());
    }
    outcome(
        smooth_fail == 0 && worst_c <= TIGHT_C_HAT && worst_slack <= TIGHT_SLACK,
        format!(
            "{runs} tanh runs ({MIN_SEEDS} seeds x 2 envs), {smooth_fail} bound violations, min margin {min_margin:.2e}; linear/quadratic: C_hat {worst_c:.1e}, equality slack {worst_slack:.1e}"
        ),
    )
}

fn criterion_5(checks: &(usize, usize, usize, f64, f64)) -> Outcome {
    let (runs, _, stab_fail, _, min_slack) = *checks;
    let policy = Policy::linear(Matrix::identity(2), vec![0.0; 2]).unwrap();
    let env = Environment::quadratic(vec![1.0, 0.0], 2).unwrap();
    let obj = InnerObjective::new(&policy, &env, &[0.0, 0.0], &[0.0]).unwrap();
    let set = PerturbationSet::new(NormKind::Linf, 2.0, 2).unwrap();
    let traj = pga_run(&obj, &set, &InnerLoopConfig::new(1.0, 1)).unwrap();
    let hand = traj.inner_values == vec![0.5, 2.0];
    outcome(
        stab_fail == 0 && hand,
        format!(
            "{}/{runs} trajectories satisfy (a)-(d), min slack {min_slack:.2e}; hand case g = {:?}",
            runs - stab_fail,
            traj.inner_values
        ),
    )
}

fn criterion_6() -> Outcome {
    let cfg = parse_config(&workspace_root().join("configs/price_of_robustness.json")).unwrap();
    let sweep = cfg.sweep_config();
    let start = Instant::now();
    let out = price_of_robustness(
        &cfg.environment::<f64>().unwrap(),
        &cfg.train_config::<f64>().unwrap(),
        &cfg.policy_spec(),
        &sweep,
    )
    .unwrap();
    let elapsed = start.elapsed();
    let r = out.report;
    outcome(
        r.ordering_holds && r.all_matched && r.excluded.is_empty() && sweep.seeds.len() >= 5 && elapsed < SWEEP_BUDGET,
        format!(
            "{} seeds: T_hat_ad {:.4} <= T_hat {:.4} + SE {:.4}, all matched {}, {:.0}s",
            sweep.seeds.len(),
            r.t_hat_ad,
            r.t_hat,
            r.pooled_std_err,
            r.all_matched,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = f64::NEG_INFINITY;
    let mut details = Vec::new();
    let sharp = Environment::new(
        LossKind::SoftplusCongestion { beta: 3.0 },
        vec![0.4, 0.2, 0.0],
        Matrix::from_fn(3, 1, |i, _| 0.3 - 0.1 * i as f64),
        3,
        SamplerKind::Independent,
        0,
    )
    .unwrap();
    for (name, env) in [("quadratic", quadratic_env(3, 3, 0)), ("softplus beta=3", sharp)] {
        let l = env.loss_hessian_bound();
        let mut env_worst = f64::NEG_INFINITY;
        for _ in 0..LIPSCHITZ_PAIRS {
            let z1 = uniform(&mut rng, 3, 3.0);
            let z2 = uniform(&mut rng, 3, 3.0);
            let a = uniform(&mut rng, 1, 1.0);
            let g1 = env.loss_grad(&z1, &a).unwrap();
            let g2 = env.loss_grad(&z2, &a).unwrap();
            let dg: Vec<f64> = g1.iter().zip(&g2).map(|(x, y)| x - y).collect();
            let dz: Vec<f64> = z1.iter().zip(&z2).map(|(x, y)| x - y).collect();
            env_worst = env_worst.max(norm(&dg) - l * norm(&dz));
        }
        worst = worst.max(env_worst);
        details.push(format!("{name} L_L={l}: max excess {env_worst:.1e}"));
    }
    outcome(
        worst <= LIPSCHITZ_TOL,
        format!("{LIPSCHITZ_PAIRS} pairs each; {}", details.join(", ")),
    )
}

fn criterion_8() -> Outcome {
    let tmp = tempfile::TempDir::new().unwrap();
    let base = json!({
        "environment": { "kind": "softplus_congestion", "beta": 2.0, "c": [0.4, -0.2], "state_dim": 3 },
        "policy": { "dims": [3, 6, 2], "init_seed": 2 },
        "train": {
            "mode": "robust_aajr", "outer_lr": 0.05, "outer_steps": 25, "batch_size": 8,
            "inner": { "eta": 0.5, "K": 4 }, "set": { "p": "2", "epsilon": 0.2 },
            "reg": { "lambda": 0.3 }
        },
        "verify": { "seeds": [0, 1, 2, 3], "n_inclusion_samples": 5 }
    });
    let cfg = aajr::RunConfig::from_json(&base.to_string()).unwrap();
    let a = cmd_train(&cfg, &tmp.path().join("a")).unwrap();
    let b = cmd_train(&cfg, &tmp.path().join("b")).unwrap();
    let csv_a = std::fs::read(tmp.path().join("a/metrics.csv")).unwrap();
    let csv_b = std::fs::read(tmp.path().join("b/metrics.csv")).unwrap();
    let identical = csv_a == csv_b && a.metrics == b.metrics;

    let run = |cfg: &serde_json::Value, out: &str| -> Option<i32> {
        let path = tmp.path().join(format!("{out}.json"));
        std::fs::write(&path, cfg.to_string()).unwrap();
        Command::new(env!("CARGO_BIN_EXE_aajr"))
            .args(["verify", "--config", path.to_str().unwrap(), "--out"])
            .arg(tmp.path().join(out))
            .output()
            .unwrap()
            .status
            .code()
    };
    let ok = run(&base, "a");
    let mut failing = base.clone();
    failing["train"]["set"] = json!({ "p": "inf", "epsilon": 0.1 });
    failing["verify"]["options"] = json!({ "interior_margin": 0.0 });
    let fail = run(&failing, "fail");
    let mut bad = base.clone();
    bad["train"]["inner"]["eta"] = json!(-1.0);
    let config_err = run(&bad, "bad");
    let huge = tmp.path().join("huge");
    std::fs::create_dir_all(&huge).unwrap();
    let net = Policy::init(&[3, 6, 2], &[aajr::Activation::Tanh, aajr::Activation::Identity], 0)
        .unwrap()
        .scaled(1e200);
    let mut quad = base.clone();
    quad["environment"] = json!({ "kind": "quadratic_congestion", "c": [0.4, -0.2], "state_dim": 3 });
    std::fs::write(huge.join("checkpoint.json"), serde_json::to_string(&net.to_checkpoint()).unwrap()).unwrap();
    let numeric = run(&quad, "huge");
    let codes = [ok, fail, config_err, numeric];
    outcome(
        identical && codes == [Some(0), Some(1), Some(2), Some(3)],
        format!(
            "metrics CSV byte-identical: {identical} ({} bytes); verify exit codes pass/fail/config/numeric = {:?}",
            csv_a.len(),
            codes.map(|c| c.unwrap_or(-1))
        ),
    )
}

fn main() {
    let seeded = seeded_checks();
    let results = [
        criterion_1(),
        criterion_2(),
        criterion_3(),
        criterion_4(&seeded),
        criterion_5(&seeded),
        criterion_6(),
        criterion_7(),
        criterion_8(),
    ];
    let mut failed = 0;
    for (i, r) in results.iter().enumerate() {
        println!("criterion {}: {} ({})", i + 1, if r.pass { "PASS" } else { "FAIL" }, r.detail);
        failed += usize::from(!r.pass);
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
