//! Outer gradient descent on nominal, robust and regularized-robust objectives,
//! plus Monte-Carlo risk evaluation.

mod gap;

pub use gap::{
    match_budget, measure_directional_level, measure_spectral_level, measure_trajectory_spectral_level,
    price_of_robustness,
    BudgetMatch, GapReport, ModeRow, PolicySpec, SeedRow, SweepConfig, SweepOutcome, SweepRun,
};

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::Environment;
use crate::error::{check_dim, Error, Result};
use crate::linalg::add;
use crate::pga::{pga_run, InnerLoopConfig, InnerObjective, PerturbationSet};
use crate::policy::{Gradients, Mlp, Probe, ProbeValue};
use crate::regularizers::{
    accumulate_aajr_gradient, accumulate_global_gradient, aajr_penalty, RegularizerConfig,
};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Nominal,
    RobustAajr,
    RobustGlobal,
    RobustPlain,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Nominal => "nominal",
            TrainMode::RobustAajr => "robust_aajr",
            TrainMode::RobustGlobal => "robust_global",
            TrainMode::RobustPlain => "robust_plain",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig<T> {
    pub mode: TrainMode,
    pub outer_lr: T,
    pub outer_steps: usize,
    pub batch_size: usize,
    pub inner: InnerLoopConfig<T>,
    pub set: PerturbationSet<T>,
    pub reg: RegularizerConfig<T>,
    pub seed: u64,
}

impl<T: Scalar> TrainConfig<T> {
    pub fn validate(&self, env: &Environment<T>, policy: &Mlp<T>) -> Result<()> {
        if !(self.outer_lr > T::zero() && self.outer_lr.is_finite()) {
            return Err(Error::config("train.outer_lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        self.inner.validate()?;
        self.reg.validate()?;
        check_dim("train.set.dim vs environment.state_dim", env.state_dim, self.set.dim)?;
        check_dim("policy input vs environment.state_dim", env.state_dim, policy.input_dim())?;
        check_dim("policy output vs environment action size", env.action_dim(), policy.output_dim())?;
        Ok(())
    }
}

/// Metrics for one outer step, measured at the parameters before the update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub robust_loss: f64,
    pub nominal_loss: f64,
    pub aajr_penalty: f64,
    pub global_penalty: f64,
    pub max_dir_amp: f64,
    pub mean_spectral: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Abort {
    pub step: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<StepRecord>,
    pub aborted: Option<Abort>,
}

impl RunMetrics {
    pub const CSV_HEADER: &'static str =
        "step,robust_loss,nominal_loss,aajr_penalty,global_penalty,max_dir_amp,mean_spectral,grad_norm";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
                r.step,
                r.robust_loss,
                r.nominal_loss,
                r.aajr_penalty,
                r.global_penalty,
                r.max_dir_amp,
                r.mean_spectral,
                r.grad_norm
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::CSV_HEADER) {
            return Err(Error::config("metrics.csv", "unexpected header"));
        }
        let records = lines
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, line)| {
                let bad = || Error::config(format!("metrics.csv line {}", i + 2), "malformed row");
                let cols: Vec<&str> = line.split(',').collect();
                if cols.len() != 8 {
                    return Err(bad());
                }
                let f = |k: usize| cols[k].parse::<f64>().map_err(|_| bad());
                Ok(StepRecord {
                    step: cols[0].parse().map_err(|_| bad())?,
                    robust_loss: f(1)?,
                    nominal_loss: f(2)?,
                    aajr_penalty: f(3)?,
                    global_penalty: f(4)?,
                    max_dir_amp: f(5)?,
                    mean_spectral: f(6)?,
                    grad_norm: f(7)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            records,
            aborted: None,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: Mlp<T>,
    pub metrics: RunMetrics,
}

struct SampleOutcome<T> {
    grads: Gradients<T>,
    robust_loss: T,
    nominal_loss: T,
    aajr: T,
    global: T,
    max_amp: T,
    spectral: T,
}

fn loss_probe<'e, T: Scalar>(
    env: &'e Environment<T>,
    peers: &'e [T],
) -> impl Fn(&[T], &[T]) -> ProbeValue<T> + Sync + 'e {
    move |z: &[T], _: &[T]| ProbeValue {
        value: env.loss(z, peers).unwrap_or(T::nan()),
        d_output: env.loss_grad(z, peers).unwrap_or_else(|_| vec![T::nan(); z.len()]),
        d_tangent: Vec::new(),
    }
}

fn sample_step<T: Scalar>(
    policy: &Mlp<T>,
    env: &Environment<T>,
    cfg: &TrainConfig<T>,
    state: &[T],
    peers: &[T],
) -> Result<SampleOutcome<T>> {
    let objective = InnerObjective::new(policy, env, state, peers)?;
    let traj = pga_run(&objective, &cfg.set, &cfg.inner)?;
    let nominal_loss = traj.inner_values[0];
    let robust_loss = traj.final_value();
    let loss = loss_probe(env, peers);

    let mut grads = Gradients::zeros_like(policy);
    let anchor = match cfg.mode {
        TrainMode::Nominal => state.to_vec(),
        _ => add(state, traj.final_delta()),
    };
    policy.accumulate_gradient(
        &Probe {
            state: &anchor,
            direction: None,
            objective: &loss,
        },
        &mut grads,
    )?;

    let lambda = cfg.reg.lambda;
    let aajr = if cfg.mode == TrainMode::RobustAajr && lambda > T::zero() {
        accumulate_aajr_gradient(policy, state, &traj, &cfg.reg, lambda, &mut grads)?
    } else if traj.steps() > 0 {
        aajr_penalty(policy, state, &traj, &cfg.reg)?
    } else {
        T::zero()
    };
    let weight = if cfg.mode == TrainMode::RobustGlobal {
        lambda
    } else {
        T::zero()
    };
    let (global, spectral) =
        accumulate_global_gradient(policy, state, &cfg.reg, weight, &mut grads)?;
    Ok(SampleOutcome {
        grads,
        robust_loss,
        nominal_loss,
        aajr,
        global,
        max_amp: traj.max_dir_amp(),
        spectral,
    })
}

/// Trains `initial` under `cfg`. Divergence ends the run early with
/// [`RunMetrics::aborted`] set; the returned parameters are the last finite ones.
pub fn train<T: Scalar>(
    cfg: &TrainConfig<T>,
    env: &Environment<T>,
    initial: Mlp<T>,
) -> Result<TrainOutcome<T>> {
    cfg.validate(env, &initial)?;
    let mut params = initial;
    let mut metrics = RunMetrics::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let inv_b = T::one() / T::of(cfg.batch_size as f64);

    for step in 0..cfg.outer_steps {
        let batch: Vec<(Vec<T>, Vec<T>)> =
            (0..cfg.batch_size).map(|_| env.draw(&mut rng)).collect();
        let outcomes: Vec<Result<SampleOutcome<T>>> = batch
            .par_iter()
            .map(|(s, a)| sample_step(&params, env, cfg, s, a))
            .collect();

        let mut grads = Gradients::zeros_like(&params);
        let mut sums = [T::zero(); 5];
        let mut max_amp = T::zero();
        let mut failure = None;
        for (i, o) in outcomes.into_iter().enumerate() {
            match o {
                Ok(o) => {
                    grads.add_scaled(inv_b, &o.grads);
                    for (acc, v) in sums
                        .iter_mut()
                        .zip([o.robust_loss, o.nominal_loss, o.aajr, o.global, o.spectral])
                    {
                        *acc += v;
                    }
                    max_amp = max_amp.max(o.max_amp);
                }
                Err(Error::Numeric { location }) => {
                    failure = Some(format!("sample {i}: {location}"));
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let grad_norm = grads.norm();
        if failure.is_none() && !grad_norm.is_finite() {
            failure = Some("outer gradient".into());
        }
        if let Some(reason) = failure {
            log::warn!("training diverged at step {step}: {reason}");
            metrics.aborted = Some(Abort { step, reason });
            break;
        }
        let [robust, nominal, aajr, global, spectral] = sums.map(|v| (v * inv_b).as_f64());
        metrics.records.push(StepRecord {
            step,
            robust_loss: robust,
            nominal_loss: nominal,
            aajr_penalty: aajr,
            global_penalty: global,
            max_dir_amp: max_amp.as_f64(),
            mean_spectral: spectral,
            grad_norm: grad_norm.as_f64(),
        });

        let mut next = params.clone();
        next.descend(&grads, cfg.outer_lr);
        if !next.to_flat().iter().all(|v| v.is_finite()) {
            metrics.aborted = Some(Abort {
                step,
                reason: "parameters after update".into(),
            });
            break;
        }
        params = next;
    }
    Ok(TrainOutcome { params, metrics })
}

/// Mean and standard error of a Monte-Carlo risk estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub mean: f64,
    pub std_err: f64,
}

impl RiskEstimate {
    fn from_values(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            std_err: (var / n).sqrt(),
        }
    }
}

fn check_samples(n_samples: usize) -> Result<()> {
    if n_samples == 0 {
        Err(Error::config("n_samples", "must be >= 1"))
    } else {
        Ok(())
    }
}

/// Per-sample nominal losses `L(π(s), a)` over `n_samples` seeded draws.
pub fn nominal_losses<T: Scalar>(
    policy: &Mlp<T>,
    env: &Environment<T>,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<T>> {
    check_samples(n_samples)?;
    env.sample_batch(seed, n_samples)
        .iter()
        .map(|(s, a)| env.loss(&policy.forward(s)?, a))
        .collect()
}

/// Monte-Carlo nominal risk `E[L(π(s), a)]`.
pub fn evaluate_nominal_risk<T: Scalar>(
    policy: &Mlp<T>,
    env: &Environment<T>,
    n_samples: usize,
    seed: u64,
) -> Result<T> {
    let losses = nominal_losses(policy, env, n_samples, seed)?;
    Ok(losses.iter().copied().sum::<T>() / T::of(n_samples as f64))
}

pub fn nominal_risk_estimate<T: Scalar>(
    policy: &Mlp<T>,
    env: &Environment<T>,
    n_samples: usize,
    seed: u64,
) -> Result<RiskEstimate> {
    let losses: Vec<f64> = nominal_losses(policy, env, n_samples, seed)?
        .into_iter()
        .map(Scalar::as_f64)
        .collect();
    Ok(RiskEstimate::from_values(&losses))
}

/// Monte-Carlo mean of `g(δ_K)` with `δ_K` from K-step PGA.
pub fn evaluate_robust_risk<T: Scalar>(
    policy: &Mlp<T>,
    env: &Environment<T>,
    set: &PerturbationSet<T>,
    inner: &InnerLoopConfig<T>,
    n_samples: usize,
    seed: u64,
) -> Result<T> {
    check_samples(n_samples)?;
    let mut total = T::zero();
    for (s, a) in env.sample_batch(seed, n_samples) {
        let obj = InnerObjective::new(policy, env, &s, &a)?;
        total += pga_run(&obj, set, inner)?.final_value();
    }
    Ok(total / T::of(n_samples as f64))
}
