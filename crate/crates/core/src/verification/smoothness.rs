//! Effective directional smoothness of the inner objective along PGA segments.

use serde::{Deserialize, Serialize};

use super::curvature::{
    directional_curvature, directional_curvature_from_grad, fd_step, CurvatureScheme,
};
use super::VerifyOptions;
use crate::error::Result;
use crate::linalg::{axpy, dot, norm2, sub};
use crate::pga::{pga_run, InnerLoopConfig, InnerObjective, PerturbationSet, Trajectory};
use crate::Scalar;

/// Measurements at one grid point `δ = δ_t + τ (δ_{t+1} − δ_t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentSample {
    pub segment: usize,
    pub tau: f64,
    /// Finite-difference `v_tᵀ ∇²g(δ) v_t`.
    pub curvature: f64,
    /// `‖J(s+δ) v_t‖₂`.
    pub amp: f64,
    /// `(J v_t)ᵀ ∇²L (J v_t)`.
    pub model_term: f64,
    /// `curvature − model_term`: the policy's second-order contribution.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessReport {
    pub l_l: f64,
    pub c_hat: f64,
    pub gamma_adv_hat: f64,
    /// `L_L · γ̂_adv² + Ĉ`.
    pub l_eff_bound: f64,
    pub max_curvature: f64,
    pub samples: Vec<SegmentSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureViolation {
    pub segment: usize,
    pub tau: f64,
    pub curvature: f64,
    pub bound: f64,
    pub margin: f64,
}

#[derive(Clone, Debug)]
pub struct SmoothnessCheck<T> {
    pub report: SmoothnessReport,
    pub trajectory: Trajectory<T>,
    pub tolerance: f64,
    /// `bound + tolerance − max curvature`.
    pub margin: f64,
    pub violations: Vec<CurvatureViolation>,
    pub pass: bool,
}

/// Grid positions on `[0, 1]`: both endpoints plus `grid` interior points.
fn grid_taus(grid: usize) -> Vec<f64> {
    (0..=grid + 1).map(|i| i as f64 / (grid + 1) as f64).collect()
}

/// Curvature, amplification and residual at every grid point of every segment
/// that moved.
pub fn sample_segments<T: Scalar>(
    objective: &InnerObjective<'_, T>,
    traj: &Trajectory<T>,
    grid: usize,
    scheme: CurvatureScheme,
) -> Result<Vec<SegmentSample>> {
    let mut out = Vec::new();
    for (t, v) in traj.update_dirs.iter().enumerate() {
        let Some(v) = v else { continue };
        let step = sub(&traj.deltas[t + 1], &traj.deltas[t]);
        for tau in grid_taus(grid) {
            let delta = axpy(&traj.deltas[t], T::of(tau), &step);
            let h = fd_step(&delta);
            let curvature = match scheme {
                CurvatureScheme::SecondDifference => {
                    directional_curvature(|d| objective.value(d), &delta, v, h)?
                }
                CurvatureScheme::GradientDifference => {
                    directional_curvature_from_grad(|d| objective.grad(d), &delta, v, h)?
                }
            };
            let x = objective.point(&delta);
            let (z, jv) = objective.policy.forward_jvp(&x, v)?;
            let hess = objective.env.loss_hessian(&z, objective.peers)?;
            let model_term = dot(&jv, &hess.matvec(&jv)?);
            out.push(SegmentSample {
                segment: t,
                tau,
                curvature: curvature.as_f64(),
                amp: norm2(&jv).as_f64(),
                model_term: model_term.as_f64(),
                residual: (curvature - model_term).as_f64(),
            });
        }
    }
    Ok(out)
}

/// `Ĉ`: largest `|residual|` over the segment grid (0 when nothing moved).
pub fn estimate_c<T: Scalar>(
    objective: &InnerObjective<'_, T>,
    traj: &Trajectory<T>,
    grid: usize,
    scheme: CurvatureScheme,
) -> Result<f64> {
    let samples = sample_segments(objective, traj, grid, scheme)?;
    Ok(c_from_samples(&samples))
}

fn c_from_samples(samples: &[SegmentSample]) -> f64 {
    samples.iter().fold(0.0f64, |m, s| m.max(s.residual.abs()))
}

/// Report for an already computed trajectory.
pub fn smoothness_report<T: Scalar>(
    objective: &InnerObjective<'_, T>,
    traj: &Trajectory<T>,
    opts: &VerifyOptions,
) -> Result<SmoothnessReport> {
    let samples = sample_segments(objective, traj, opts.grid, opts.scheme)?;
    let l_l = objective.env.loss_hessian_bound().as_f64();
    let c_hat = c_from_samples(&samples);
    let gamma_adv_hat = samples.iter().fold(0.0f64, |m, s| m.max(s.amp));
    let max_curvature = samples.iter().fold(f64::NEG_INFINITY, |m, s| m.max(s.curvature));
    Ok(SmoothnessReport {
        l_l,
        c_hat,
        gamma_adv_hat,
        l_eff_bound: l_l * gamma_adv_hat * gamma_adv_hat + c_hat,
        max_curvature: if samples.is_empty() { 0.0 } else { max_curvature },
        samples,
    })
}

/// Runs PGA and checks every measured segment curvature against
/// `L_L · γ̂_adv² + Ĉ + tol`, `tol = tol_curv_rel · max(1, bound)`.
pub fn check_effective_smoothness<T: Scalar>(
    objective: &InnerObjective<'_, T>,
    set: &PerturbationSet<T>,
    inner: &InnerLoopConfig<T>,
    opts: &VerifyOptions,
) -> Result<SmoothnessCheck<T>> {
    let trajectory = pga_run(objective, set, inner)?;
    let report = smoothness_report(objective, &trajectory, opts)?;
    let bound = report.l_eff_bound;
    let tolerance = opts.tol_curv_rel * bound.max(1.0);
    let violations: Vec<CurvatureViolation> = report
        .samples
        .iter()
        .filter(|s| !(s.curvature <= bound + tolerance))
        .map(|s| CurvatureViolation {
            segment: s.segment,
            tau: s.tau,
            curvature: s.curvature,
            bound,
            margin: bound + tolerance - s.curvature,
        })
        .collect();
    let margin = bound + tolerance - report.max_curvature;
    Ok(SmoothnessCheck {
        pass: violations.is_empty(),
        report,
        trajectory,
        tolerance,
        margin,
        violations,
    })
}

/// Chooses a step size satisfying `η ≤ 1/L_eff` on its own trajectory. Keeps the
/// configured `η` when it already does, otherwise iterates `η ← 0.9 / L_eff`.
pub fn stable_step_size<T: Scalar>(
    objective: &InnerObjective<'_, T>,
    set: &PerturbationSet<T>,
    inner: &InnerLoopConfig<T>,
    opts: &VerifyOptions,
) -> Result<(InnerLoopConfig<T>, SmoothnessCheck<T>)> {
    let mut cfg = *inner;
    let mut check = check_effective_smoothness(objective, set, &cfg, opts)?;
    for _ in 0..50 {
        let l = check.report.l_eff_bound;
        if cfg.eta.as_f64() * l <= 1.0 {
            break;
        }
        cfg.eta = T::of(0.9 / l);
        check = check_effective_smoothness(objective, set, &cfg, opts)?;
    }
    Ok((cfg, check))
}
