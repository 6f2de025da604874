//! Numerical checks of the inclusion, witness, smoothness and stability results,
//! and the seeded suite that bundles them into one report.

mod curvature;
mod inclusion;
mod smoothness;
mod stability;
mod witness;

pub use curvature::{directional_curvature, directional_curvature_from_grad, fd_step, CurvatureScheme};
pub use inclusion::{check_inclusion, InclusionEntry, InclusionReport};
pub use smoothness::{
    check_effective_smoothness, estimate_c, sample_segments, smoothness_report, stable_step_size,
    CurvatureViolation, SegmentSample, SmoothnessCheck, SmoothnessReport,
};
pub use stability::{
    check_pga_stability, stability_of, Inequality, StabilityReport, StabilityViolation, StepSlacks,
};
pub use witness::{
    class_witness, witness_end_to_end, EndToEndWitnessReport, WitnessReport, WitnessSpec,
};

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::Environment;
use crate::error::Result;
use crate::pga::{InnerLoopConfig, InnerObjective, PerturbationSet};
use crate::policy::Mlp;
use crate::regularizers::RegularizerConfig;
use crate::Scalar;

/// Grid sizes and tolerances shared by the checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyOptions {
    /// Interior grid points per PGA segment.
    pub grid: usize,
    pub scheme: CurvatureScheme,
    /// Curvature tolerance relative to `max(1, bound)`.
    pub tol_curv_rel: f64,
    /// Absolute slack for the stability inequalities.
    pub tol_ineq: f64,
    /// A step is interior when `‖δ_{t+1}‖_p ≤ ε − interior_margin`.
    pub interior_margin: f64,
    pub feas_tol: f64,
    /// Slack on `‖J u_t‖ ≤ γ` in the inclusion check.
    pub directional_tol: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            grid: 5,
            scheme: CurvatureScheme::GradientDifference,
            tol_curv_rel: 1e-4,
            tol_ineq: 1e-8,
            interior_margin: 1e-9,
            feas_tol: 1e-12,
            directional_tol: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    #[serde(rename = "L_L")]
    pub l_l: f64,
    #[serde(rename = "C_hat")]
    pub c_hat: f64,
    pub gamma_adv_hat: f64,
    #[serde(rename = "L_eff_bound")]
    pub l_eff_bound: f64,
}

impl From<&SmoothnessReport> for Constants {
    fn from(r: &SmoothnessReport) -> Self {
        Self {
            l_l: r.l_l,
            c_hat: r.c_hat,
            gamma_adv_hat: r.gamma_adv_hat,
            l_eff_bound: r.l_eff_bound,
        }
    }
}

/// One entry of the verification report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub seed: Option<u64>,
    pub pass: bool,
    pub margins: BTreeMap<String, f64>,
    pub constants: Option<Constants>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl CheckRecord {
    fn new(name: &str, seed: Option<u64>, pass: bool) -> Self {
        Self {
            name: name.to_string(),
            seed,
            pass,
            margins: BTreeMap::new(),
            constants: None,
            detail: None,
        }
    }

    fn margin(mut self, key: &str, value: Option<f64>) -> Self {
        if let Some(v) = value {
            self.margins.insert(key.to_string(), v);
        }
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub pass: bool,
    pub checks: Vec<CheckRecord>,
}

impl VerifyReport {
    pub fn from_checks(checks: Vec<CheckRecord>) -> Self {
        Self {
            pass: checks.iter().all(|c| c.pass),
            checks,
        }
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckRecord> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

/// Everything a suite run needs besides the policy.
#[derive(Clone, Debug)]
pub struct SuiteInputs<'a, T> {
    pub env: &'a Environment<T>,
    pub set: &'a PerturbationSet<T>,
    pub inner: &'a InnerLoopConfig<T>,
    pub reg: &'a RegularizerConfig<T>,
    pub seeds: &'a [u64],
    pub inclusion_samples: usize,
    pub opts: &'a VerifyOptions,
}

/// Smoothness and stability records for the sample drawn from `seed`.
///
/// The step size is lowered to a fixed point of `η = 0.9 / L_eff` when the
/// configured one exceeds `1/L_eff`; the record notes the value used.
pub fn seed_checks<T: Scalar>(
    policy: &Mlp<T>,
    inputs: &SuiteInputs<'_, T>,
    seed: u64,
) -> Result<Vec<CheckRecord>> {
    let (s, a) = inputs.env.sample(seed);
    let obj = InnerObjective::new(policy, inputs.env, &s, &a)?;
    let (cfg, smooth) = stable_step_size(&obj, inputs.set, inputs.inner, inputs.opts)?;
    let constants = Constants::from(&smooth.report);

    let mut sm = CheckRecord::new("effective_smoothness", Some(seed), smooth.pass)
        .margin("curvature", Some(smooth.margin))
        .margin("tolerance", Some(smooth.tolerance));
    sm.constants = Some(constants.clone());
    if let Some(v) = smooth.violations.first() {
        sm.detail = Some(format!(
            "segment {} tau {}: curvature {} exceeds bound {}",
            v.segment, v.tau, v.curvature, v.bound
        ));
    }

    let st = stability_of(&smooth.trajectory, inputs.set, cfg.eta, constants.l_eff_bound, inputs.opts);
    let mut stab = CheckRecord::new("pga_stability", Some(seed), st.pass && st.premise_met)
        .margin("interior_ascent", st.min_interior_slack)
        .margin("projected_ascent", st.min_projected_slack)
        .margin("directional_gradient", st.min_directional_slack)
        .margin("eta", Some(st.eta));
    stab.constants = Some(constants);
    stab.detail = if !st.premise_met {
        Some(format!("step size {} exceeds 1/L_eff", st.eta))
    } else {
        st.violations
            .first()
            .map(|v| format!("step {}: {:?} slack {}", v.t, v.inequality, v.slack))
    };
    Ok(vec![sm, stab])
}

/// Inclusion record over `inclusion_samples` draws seeded by the first suite seed.
pub fn inclusion_check<T: Scalar>(
    policy: &Mlp<T>,
    inputs: &SuiteInputs<'_, T>,
) -> Result<CheckRecord> {
    let seed = inputs.seeds.first().copied().unwrap_or(0);
    let samples = inputs.env.sample_batch(seed, inputs.inclusion_samples);
    let r = check_inclusion(
        policy,
        inputs.env,
        &samples,
        inputs.set,
        inputs.inner,
        inputs.reg.gamma.as_f64(),
        inputs.reg,
        inputs.opts.directional_tol,
    )?;
    let max_amp = r
        .entries
        .iter()
        .filter(|e| e.premise_met)
        .fold(None, |m: Option<f64>, e| Some(m.map_or(e.max_dir_amp, |m| m.max(e.max_dir_amp))));
    let mut rec = CheckRecord::new("inclusion", Some(seed), r.pass)
        .margin("premise_rate", Some(r.premise_rate()))
        .margin("directional", max_amp.map(|a| r.gamma + r.tolerance - a));
    if r.premise_met == 0 {
        rec.detail = Some("premise not met on any sample".to_string());
    }
    Ok(rec)
}

/// Class witness over `d ∈ {2, 4, 8}`, every `1 ≤ dim U < d` and
/// `M ∈ {2γ, 10γ}`, using coordinate subspaces.
pub fn witness_grid_check<T: Scalar>(gamma: T, reg: &RegularizerConfig<T>) -> Result<CheckRecord> {
    let mut worst_sigma_err = 0.0f64;
    let mut worst_dir = f64::INFINITY;
    let mut pass = true;
    for d in [2usize, 4, 8] {
        for k in 1..d {
            for mult in [2.0, 10.0] {
                let basis: Vec<Vec<T>> = (0..k)
                    .map(|i| (0..d).map(|j| if i == j { T::one() } else { T::zero() }).collect())
                    .collect();
                let spec = WitnessSpec {
                    gamma,
                    big_m: gamma * T::of(mult),
                    basis: basis.clone(),
                    dim: d,
                };
                let r = class_witness(&spec, &basis, reg)?;
                pass &= r.pass;
                worst_sigma_err = worst_sigma_err.max((r.spectral_norm - r.big_m).abs());
                worst_dir = worst_dir.min(r.gamma - r.max_dir_amp);
            }
        }
    }
    pass &= worst_sigma_err <= 1e-9;
    Ok(CheckRecord::new("class_witness", None, pass)
        .margin("directional", Some(worst_dir))
        .margin("spectral_error", Some(worst_sigma_err)))
}

/// Runs every check. Seeds are processed in parallel; records come out in seed
/// order followed by the inclusion and witness records.
pub fn run_suite<T: Scalar>(policy: &Mlp<T>, inputs: &SuiteInputs<'_, T>) -> Result<VerifyReport> {
    let per_seed: Vec<Result<Vec<CheckRecord>>> = inputs
        .seeds
        .par_iter()
        .map(|&seed| seed_checks(policy, inputs, seed))
        .collect();
    let mut checks = Vec::new();
    for r in per_seed {
        checks.extend(r?);
    }
    checks.push(inclusion_check(policy, inputs)?);
    checks.push(witness_grid_check(inputs.reg.gamma, inputs.reg)?);
    Ok(VerifyReport::from_checks(checks))
}
