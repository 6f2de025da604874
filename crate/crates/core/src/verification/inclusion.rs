//! A global spectral bound implies the trajectory-aligned directional bound.

use serde::{Deserialize, Serialize};

use crate::environment::Environment;
use crate::error::Result;
use crate::linalg::add;
use crate::pga::{pga_run, InnerLoopConfig, InnerObjective, PerturbationSet};
use crate::policy::Mlp;
use crate::regularizers::{spectral_norm, RegularizerConfig};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InclusionEntry {
    pub sample: usize,
    /// Largest spectral norm over the iterates `s + δ_t`, `t < K`.
    pub sup_spectral: f64,
    pub max_dir_amp: f64,
    pub premise_met: bool,
    /// Directional amplifications above `γ + tol` (only counted when the premise holds).
    pub violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InclusionReport {
    pub gamma: f64,
    pub tolerance: f64,
    pub entries: Vec<InclusionEntry>,
    pub premise_met: usize,
    pub violations: usize,
    /// No violations on premise-met trajectories. A trajectory whose premise
    /// fails is skipped, not failed.
    pub pass: bool,
}

impl InclusionReport {
    pub fn premise_rate(&self) -> f64 {
        if self.entries.is_empty() {
            0.0
        } else {
            self.premise_met as f64 / self.entries.len() as f64
        }
    }
}

/// For every sample: measure `S = max_t ‖J(s+δ_t)‖₂`; when `S ≤ γ`, require
/// every recorded `‖J(s+δ_t) u_t‖₂ ≤ γ + tol`.
#[allow(clippy::too_many_arguments)]
pub fn check_inclusion<T: Scalar>(
    policy: &Mlp<T>,
    env: &Environment<T>,
    samples: &[(Vec<T>, Vec<T>)],
    set: &PerturbationSet<T>,
    inner: &InnerLoopConfig<T>,
    gamma: f64,
    reg: &RegularizerConfig<T>,
    tolerance: f64,
) -> Result<InclusionReport> {
    let precise = reg.precise();
    let mut entries = Vec::with_capacity(samples.len());
    for (i, (s, a)) in samples.iter().enumerate() {
        let obj = InnerObjective::new(policy, env, s, a)?;
        let traj = pga_run(&obj, set, inner)?;
        let mut sup = 0.0f64;
        for delta in traj.deltas.iter().take(traj.steps()) {
            sup = sup.max(spectral_norm(policy, &add(s, delta), &precise)?.value.as_f64());
        }
        let premise_met = sup <= gamma;
        let violations = if premise_met {
            traj.dir_amps
                .iter()
                .filter(|a| !(a.as_f64() <= gamma + tolerance))
                .count()
        } else {
            0
        };
        entries.push(InclusionEntry {
            sample: i,
            sup_spectral: sup,
            max_dir_amp: traj.max_dir_amp().as_f64(),
            premise_met,
            violations,
        });
    }
    let premise_met = entries.iter().filter(|e| e.premise_met).count();
    let violations = entries.iter().map(|e| e.violations).sum();
    Ok(InclusionReport {
        gamma,
        tolerance,
        entries,
        premise_met,
        violations,
        pass: violations == 0,
    })
}
