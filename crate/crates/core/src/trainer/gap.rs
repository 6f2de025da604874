//! Empirical Price-of-Robustness comparison at matched sensitivity budgets.
//!
//! The infima over policy classes are replaced by best-of-seeds trained optima,
//! so every gap reported here is an estimate `T̂`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{nominal_risk_estimate, train, RiskEstimate, TrainConfig, TrainMode, TrainOutcome};
use crate::environment::Environment;
use crate::error::{Error, Result};
use crate::linalg::add;
use crate::pga::{pga_run, InnerLoopConfig, InnerObjective, PerturbationSet};
use crate::policy::{Activation, Mlp};
use crate::regularizers::{spectral_norm, RegularizerConfig};
use crate::Scalar;

/// Architecture and initialization seed of the policies being trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub init_seed: u64,
}

impl PolicySpec {
    pub fn init<T: Scalar>(&self, seed: u64) -> Result<Mlp<T>> {
        Mlp::init(&self.dims, &self.activations, self.init_seed.wrapping_add(seed))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub seeds: Vec<u64>,
    /// Samples for the nominal-risk estimate of every trained model.
    pub eval_samples: usize,
    pub eval_seed: u64,
    /// Samples over which achieved constraint levels are measured.
    pub constraint_samples: usize,
    pub bisection_iters: usize,
    /// Relative band around `γ` that counts as matched.
    pub match_tol: f64,
    pub lambda_init: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            eval_samples: 2000,
            eval_seed: 1_000_003,
            constraint_samples: 200,
            bisection_iters: 12,
            match_tol: 0.05,
            lambda_init: 1.0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.len() < 3 {
            return Err(Error::config("sweep.seeds", "need at least 3 seeds"));
        }
        if self.eval_samples < 2 {
            return Err(Error::config("sweep.eval_samples", "must be >= 2"));
        }
        if self.constraint_samples == 0 {
            return Err(Error::config("sweep.constraint_samples", "must be >= 1"));
        }
        if self.bisection_iters == 0 {
            return Err(Error::config("sweep.bisection_iters", "must be >= 1"));
        }
        if !(self.match_tol > 0.0 && self.match_tol < 1.0) {
            return Err(Error::config("sweep.match_tol", "must lie in (0, 1)"));
        }
        if !(self.lambda_init > 0.0 && self.lambda_init.is_finite()) {
            return Err(Error::config("sweep.lambda_init", "must be positive"));
        }
        Ok(())
    }
}

/// Largest `‖J(s+δ_t) u_t‖₂` over PGA trajectories of the given samples.
pub fn measure_directional_level<T: Scalar>(
    policy: &Mlp<T>,
    env: &Environment<T>,
    set: &PerturbationSet<T>,
    inner: &InnerLoopConfig<T>,
    samples: &[(Vec<T>, Vec<T>)],
) -> Result<T> {
    let mut level = T::zero();
    for (s, a) in samples {
        let obj = InnerObjective::new(policy, env, s, a)?;
        level = level.max(pga_run(&obj, set, inner)?.max_dir_amp());
    }
    Ok(level)
}

/// Largest sampled spectral norm `‖J(s)‖₂`.
pub fn measure_spectral_level<T: Scalar>(
    policy: &Mlp<T>,
    reg: &RegularizerConfig<T>,
    samples: &[(Vec<T>, Vec<T>)],
) -> Result<T> {
    let mut level = T::zero();
    for (s, _) in samples {
        level = level.max(spectral_norm(policy, s, reg)?.value);
    }
    Ok(level)
}

/// Largest spectral norm over the PGA iterates `s + δ_t`, `t < K` (just `s`
/// when `K = 0`): the states at which directional amplification is measured.
pub fn measure_trajectory_spectral_level<T: Scalar>(
    policy: &Mlp<T>,
    env: &Environment<T>,
    set: &PerturbationSet<T>,
    inner: &InnerLoopConfig<T>,
    reg: &RegularizerConfig<T>,
    samples: &[(Vec<T>, Vec<T>)],
) -> Result<T> {
    let mut level = T::zero();
    for (s, a) in samples {
        let obj = InnerObjective::new(policy, env, s, a)?;
        let traj = pga_run(&obj, set, inner)?;
        for delta in traj.deltas.iter().take(traj.steps().max(1)) {
            level = level.max(spectral_norm(policy, &add(s, delta), reg)?.value);
        }
    }
    Ok(level)
}

/// Power-iteration settings for level measurements.
fn measurement<T: Scalar>(reg: &RegularizerConfig<T>) -> RegularizerConfig<T> {
    RegularizerConfig {
        power_iters: reg.power_iters.max(200),
        power_tol: T::of(1e-10),
        ..*reg
    }
}

fn constraint_level<T: Scalar>(
    mode: TrainMode,
    policy: &Mlp<T>,
    env: &Environment<T>,
    cfg: &TrainConfig<T>,
    samples: &[(Vec<T>, Vec<T>)],
) -> Result<T> {
    match mode {
        TrainMode::RobustAajr => {
            measure_directional_level(policy, env, &cfg.set, &cfg.inner, samples)
        }
        _ => measure_trajectory_spectral_level(
            policy,
            env,
            &cfg.set,
            &cfg.inner,
            &measurement(&cfg.reg),
            samples,
        ),
    }
}

/// Result of tuning `λ` for one penalized mode.
#[derive(Clone, Debug)]
pub struct BudgetMatch<T> {
    pub lambda: f64,
    pub level: f64,
    pub matched: bool,
    pub runs: usize,
    pub outcome: TrainOutcome<T>,
}

/// Tunes `λ` so that the achieved constraint level of `mode` sits within
/// `match_tol · γ` of `γ` (directional amplification for AAJR, sampled spectral
/// norm for the global penalty). `λ = 0` is kept when the constraint is slack.
/// At most `bisection_iters` trainings follow the `λ = 0` probe.
pub fn match_budget<T: Scalar>(
    mode: TrainMode,
    env: &Environment<T>,
    base: &TrainConfig<T>,
    initial: &Mlp<T>,
    sweep: &SweepConfig,
    constraint_samples: &[(Vec<T>, Vec<T>)],
) -> Result<BudgetMatch<T>> {
    let gamma = base.reg.gamma.as_f64();
    let upper = gamma * (1.0 + sweep.match_tol);
    let lower = gamma * (1.0 - sweep.match_tol);
    let run = |lambda: f64| -> Result<(TrainOutcome<T>, f64)> {
        let mut cfg = base.clone();
        cfg.mode = mode;
        cfg.reg.lambda = T::of(lambda);
        let out = train(&cfg, env, initial.clone())?;
        let level = if out.metrics.aborted.is_some() {
            f64::INFINITY
        } else {
            constraint_level(mode, &out.params, env, &cfg, constraint_samples)?.as_f64()
        };
        Ok((out, level))
    };

    let (out0, level0) = run(0.0)?;
    let mut runs = 1;
    if level0 <= upper {
        return Ok(BudgetMatch {
            lambda: 0.0,
            level: level0,
            matched: level0 >= lower,
            runs,
            outcome: out0,
        });
    }

    // Best feasible run so far (level <= upper), preferring the smallest λ.
    let mut feasible: Option<(f64, f64, TrainOutcome<T>)> = None;
    let mut fallback = (0.0, level0, out0);
    let mut lo = 0.0;
    let mut hi = sweep.lambda_init;
    let mut bracketed = false;
    for _ in 0..sweep.bisection_iters {
        let lambda = if bracketed {
            if lo > 0.0 {
                (lo * hi).sqrt()
            } else {
                hi / 4.0
            }
        } else {
            hi
        };
        let (out, level) = run(lambda)?;
        runs += 1;
        if (lower..=upper).contains(&level) {
            return Ok(BudgetMatch {
                lambda,
                level,
                matched: true,
                runs,
                outcome: out,
            });
        }
        if level > upper {
            lo = lambda;
            if !bracketed {
                hi = lambda * 4.0;
            }
            if level.is_finite() {
                fallback = (lambda, level, out);
            }
        } else {
            bracketed = true;
            hi = lambda;
            if feasible.as_ref().is_none_or(|f| lambda < f.0) {
                feasible = Some((lambda, level, out));
            }
        }
    }
    let (lambda, level, outcome) = feasible.unwrap_or(fallback);
    Ok(BudgetMatch {
        lambda,
        level,
        matched: false,
        runs,
        outcome,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub mode: TrainMode,
    pub lambda: f64,
    /// Achieved constraint level the bisection matched against `γ`.
    pub level: f64,
    pub matched: bool,
    pub training_runs: usize,
    pub nominal_risk: RiskEstimate,
    pub max_dir_amp: f64,
    pub max_spectral: f64,
    pub aborted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub nominal: ModeRow,
    pub global: ModeRow,
    pub adaptive: ModeRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub gamma: f64,
    pub best_nominal_risk: f64,
    pub best_global_risk: f64,
    pub best_adaptive_risk: f64,
    /// `T̂(γ)`: best robust_global nominal risk minus best nominal risk.
    pub t_hat: f64,
    /// `T̂_ad(γ)`: best robust_aajr nominal risk minus best nominal risk.
    pub t_hat_ad: f64,
    /// `sqrt(mean SE²)` over every included run's nominal-risk estimate.
    pub pooled_std_err: f64,
    /// `T̂_ad ≤ T̂ + pooled_std_err`.
    pub ordering_holds: bool,
    /// Every penalized run reached its budget band.
    pub all_matched: bool,
    /// AAJR directional level ≤ global spectral level + 2·match_tol·γ on every seed.
    pub budget_protocol_holds: bool,
    pub per_seed: Vec<SeedRow>,
    /// Runs excluded because they aborted, as "seed/mode".
    pub excluded: Vec<String>,
}

pub struct SweepRun<T> {
    pub seed: u64,
    pub mode: TrainMode,
    pub outcome: TrainOutcome<T>,
}

pub struct SweepOutcome<T> {
    pub report: GapReport,
    pub runs: Vec<SweepRun<T>>,
}

fn mode_row<T: Scalar>(
    mode: TrainMode,
    fit: &BudgetMatch<T>,
    env: &Environment<T>,
    cfg: &TrainConfig<T>,
    sweep: &SweepConfig,
    constraint_samples: &[(Vec<T>, Vec<T>)],
) -> Result<ModeRow> {
    let params = &fit.outcome.params;
    Ok(ModeRow {
        mode,
        lambda: fit.lambda,
        level: fit.level,
        matched: fit.matched,
        training_runs: fit.runs,
        nominal_risk: nominal_risk_estimate(params, env, sweep.eval_samples, sweep.eval_seed)?,
        max_dir_amp: measure_directional_level(params, env, &cfg.set, &cfg.inner, constraint_samples)?
            .as_f64(),
        max_spectral: measure_trajectory_spectral_level(
            params,
            env,
            &cfg.set,
            &cfg.inner,
            &measurement(&cfg.reg),
            constraint_samples,
        )?
        .as_f64(),
        aborted: fit.outcome.metrics.aborted.is_some(),
    })
}

fn run_seed<T: Scalar>(
    seed: u64,
    env: &Environment<T>,
    base: &TrainConfig<T>,
    policy: &PolicySpec,
    sweep: &SweepConfig,
    constraint_samples: &[(Vec<T>, Vec<T>)],
) -> Result<(SeedRow, Vec<SweepRun<T>>)> {
    let initial: Mlp<T> = policy.init(seed)?;
    let mut cfg = base.clone();
    cfg.seed = seed;

    let mut nominal_cfg = cfg.clone();
    nominal_cfg.mode = TrainMode::Nominal;
    nominal_cfg.reg.lambda = T::zero();
    let nominal_out = train(&nominal_cfg, env, initial.clone())?;
    let nominal_level =
        constraint_level(TrainMode::Nominal, &nominal_out.params, env, &cfg, constraint_samples)?;
    let nominal_fit = BudgetMatch {
        lambda: 0.0,
        level: nominal_level.as_f64(),
        matched: true,
        runs: 1,
        outcome: nominal_out,
    };
    let global_fit =
        match_budget(TrainMode::RobustGlobal, env, &cfg, &initial, sweep, constraint_samples)?;
    let adaptive_fit =
        match_budget(TrainMode::RobustAajr, env, &cfg, &initial, sweep, constraint_samples)?;

    let row = SeedRow {
        seed,
        nominal: mode_row(TrainMode::Nominal, &nominal_fit, env, &cfg, sweep, constraint_samples)?,
        global: mode_row(TrainMode::RobustGlobal, &global_fit, env, &cfg, sweep, constraint_samples)?,
        adaptive: mode_row(TrainMode::RobustAajr, &adaptive_fit, env, &cfg, sweep, constraint_samples)?,
    };
    let runs = [
        (TrainMode::Nominal, nominal_fit),
        (TrainMode::RobustGlobal, global_fit),
        (TrainMode::RobustAajr, adaptive_fit),
    ]
    .into_iter()
    .map(|(mode, fit)| SweepRun {
        seed,
        mode,
        outcome: fit.outcome,
    })
    .collect();
    Ok((row, runs))
}

/// Trains nominal, budget-matched robust_global and budget-matched robust_aajr
/// policies for every seed and reports the estimated gaps `T̂` and `T̂_ad`.
pub fn price_of_robustness<T: Scalar>(
    env: &Environment<T>,
    base: &TrainConfig<T>,
    policy: &PolicySpec,
    sweep: &SweepConfig,
) -> Result<SweepOutcome<T>> {
    sweep.validate()?;
    base.validate(env, &policy.init(0)?)?;
    let constraint_samples = env.sample_batch(sweep.eval_seed.wrapping_add(1), sweep.constraint_samples);

    let results: Vec<Result<(SeedRow, Vec<SweepRun<T>>)>> = sweep
        .seeds
        .par_iter()
        .map(|&seed| run_seed(seed, env, base, policy, sweep, &constraint_samples))
        .collect();
    let mut per_seed = Vec::with_capacity(results.len());
    let mut runs = Vec::new();
    for r in results {
        let (row, seed_runs) = r?;
        per_seed.push(row);
        runs.extend(seed_runs);
    }

    let mut excluded = Vec::new();
    let mut best = |pick: fn(&SeedRow) -> &ModeRow| {
        let mut best = f64::INFINITY;
        for row in &per_seed {
            let m = pick(row);
            if m.aborted {
                excluded.push(format!("{}/{}", row.seed, m.mode.as_str()));
            } else {
                best = best.min(m.nominal_risk.mean);
            }
        }
        best
    };
    let best_nominal = best(|r| &r.nominal);
    let best_global = best(|r| &r.global);
    let best_adaptive = best(|r| &r.adaptive);

    let ses: Vec<f64> = per_seed
        .iter()
        .flat_map(|r| [&r.nominal, &r.global, &r.adaptive])
        .filter(|m| !m.aborted)
        .map(|m| m.nominal_risk.std_err)
        .collect();
    let pooled = (ses.iter().map(|s| s * s).sum::<f64>() / ses.len().max(1) as f64).sqrt();
    let t_hat = best_global - best_nominal;
    let t_hat_ad = best_adaptive - best_nominal;
    let gamma = base.reg.gamma.as_f64();
    let all_matched = per_seed.iter().all(|r| r.global.matched && r.adaptive.matched);
    let budget_protocol_holds = per_seed
        .iter()
        .all(|r| r.adaptive.max_dir_amp <= r.global.max_spectral + 2.0 * sweep.match_tol * gamma);

    Ok(SweepOutcome {
        report: GapReport {
            gamma,
            best_nominal_risk: best_nominal,
            best_global_risk: best_global,
            best_adaptive_risk: best_adaptive,
            t_hat,
            t_hat_ad,
            pooled_std_err: pooled,
            ordering_holds: t_hat_ad <= t_hat + pooled,
            all_matched,
            budget_protocol_holds,
            per_seed,
            excluded,
        },
        runs,
    })
}
