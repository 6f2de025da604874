//! Step-by-step stability inequalities for projected gradient ascent.

use serde::{Deserialize, Serialize};

use super::VerifyOptions;
use crate::error::Result;
use crate::linalg::{dot, norm2, sub};
use crate::pga::{pga_run, InnerLoopConfig, InnerObjective, PerturbationSet, Trajectory};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inequality {
    /// Interior steps: `g(δ_{t+1}) ≥ g(δ_t) + (η/2)‖∇g(δ_t)‖²`.
    InteriorAscent,
    /// All steps: `g(δ_{t+1}) ≥ g(δ_t) + ‖δ_{t+1} − δ_t‖² / 2η`.
    ProjectedAscent,
    /// `v_tᵀ(∇g(δ_{t+1}) − ∇g(δ_t)) ≤ L_eff ‖δ_{t+1} − δ_t‖`.
    DirectionalGradient,
    /// `δ_t ∈ Δ`.
    Feasibility,
}

/// Per-step slacks; a slack below `−tol` is a violation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSlacks {
    pub t: usize,
    pub interior: bool,
    pub interior_ascent: Option<f64>,
    pub projected_ascent: f64,
    pub directional_gradient: Option<f64>,
    pub feasibility: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityViolation {
    pub t: usize,
    pub inequality: Inequality,
    pub slack: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub eta: f64,
    pub l_eff_bound: f64,
    /// `η ≤ 1/L_eff`.
    pub premise_met: bool,
    pub steps: Vec<StepSlacks>,
    pub violations: Vec<StabilityViolation>,
    pub min_interior_slack: Option<f64>,
    pub min_projected_slack: Option<f64>,
    pub min_directional_slack: Option<f64>,
    pub pass: bool,
}

/// Evaluates the four stability inequalities on an existing trajectory.
pub fn stability_of<T: Scalar>(
    traj: &Trajectory<T>,
    set: &PerturbationSet<T>,
    eta: T,
    l_eff_bound: f64,
    opts: &VerifyOptions,
) -> StabilityReport {
    let eta_f = eta.as_f64();
    let eps = set.epsilon.as_f64();
    let tol = opts.tol_ineq;
    let mut steps = Vec::with_capacity(traj.steps());
    let mut violations = Vec::new();
    let mut flag = |t: usize, inequality: Inequality, slack: f64, tol: f64| {
        if !(slack >= -tol) {
            violations.push(StabilityViolation {
                t,
                inequality,
                slack,
            });
        }
    };

    for t in 0..=traj.steps() {
        let feas = eps - set.norm_of(&traj.deltas[t]).as_f64();
        flag(t, Inequality::Feasibility, feas, opts.feas_tol);
        if t == traj.steps() {
            break;
        }
        let g0 = traj.inner_values[t].as_f64();
        let g1 = traj.inner_values[t + 1].as_f64();
        let step = sub(&traj.deltas[t + 1], &traj.deltas[t]);
        let step_norm = norm2(&step).as_f64();
        let interior = set.norm_of(&traj.deltas[t + 1]).as_f64() <= eps - opts.interior_margin;

        let interior_ascent = interior.then(|| {
            let gn = norm2(&traj.inner_grads[t]).as_f64();
            g1 - (g0 + 0.5 * eta_f * gn * gn)
        });
        if let Some(s) = interior_ascent {
            flag(t, Inequality::InteriorAscent, s, tol);
        }
        let projected_ascent = g1 - (g0 + step_norm * step_norm / (2.0 * eta_f));
        flag(t, Inequality::ProjectedAscent, projected_ascent, tol);

        let directional_gradient = traj.update_dirs[t].as_ref().map(|v| {
            let dg = sub(&traj.inner_grads[t + 1], &traj.inner_grads[t]);
            l_eff_bound * step_norm - dot(v, &dg).as_f64()
        });
        if let Some(s) = directional_gradient {
            flag(t, Inequality::DirectionalGradient, s, tol);
        }
        steps.push(StepSlacks {
            t,
            interior,
            interior_ascent,
            projected_ascent,
            directional_gradient,
            feasibility: feas,
        });
    }
    let min_of = |f: fn(&StepSlacks) -> Option<f64>| {
        steps.iter().filter_map(f).fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.min(s))))
    };
    let min_interior_slack = min_of(|s| s.interior_ascent);
    let min_projected_slack = min_of(|s| Some(s.projected_ascent));
    let min_directional_slack = min_of(|s| s.directional_gradient);
    StabilityReport {
        eta: eta_f,
        l_eff_bound,
        premise_met: eta_f * l_eff_bound <= 1.0,
        pass: violations.is_empty(),
        steps,
        violations,
        min_interior_slack,
        min_projected_slack,
        min_directional_slack,
    }
}

/// Runs PGA with `inner` and checks monotone ascent, projected ascent,
/// directional gradient control and feasibility at every step.
pub fn check_pga_stability<T: Scalar>(
    objective: &InnerObjective<'_, T>,
    set: &PerturbationSet<T>,
    inner: &InnerLoopConfig<T>,
    l_eff_bound: f64,
    opts: &VerifyOptions,
) -> Result<StabilityReport> {
    let traj = pga_run(objective, set, inner)?;
    Ok(stability_of(&traj, set, inner.eta, l_eff_bound, opts))
}
