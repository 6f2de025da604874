//! Sensitivity penalties: the trajectory-aligned AAJR term, the global
//! spectral-norm hinge used as the baseline, and power-iteration estimation of
//! `‖J(s)‖₂`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{add, dot, norm2, scale};
use crate::pga::Trajectory;
use crate::policy::{Gradients, Mlp, Probe, ProbeValue};
use crate::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AajrForm {
    /// `(1/K) Σ ‖J u_t‖²`.
    #[default]
    Squared,
    /// `(1/K) Σ max(0, ‖J u_t‖ − γ_adv)²`.
    Hinge,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegularizerConfig<T> {
    pub lambda: T,
    pub gamma: T,
    pub gamma_adv: T,
    pub power_iters: usize,
    pub power_tol: T,
    pub power_seed: u64,
    pub form: AajrForm,
}

impl<T: Scalar> Default for RegularizerConfig<T> {
    fn default() -> Self {
        Self {
            lambda: T::zero(),
            gamma: T::one(),
            gamma_adv: T::one(),
            power_iters: 20,
            power_tol: T::of(1e-9),
            power_seed: 0,
            form: AajrForm::Squared,
        }
    }
}

impl<T: Scalar> RegularizerConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= T::zero() && self.lambda.is_finite()) {
            return Err(Error::config("reg.lambda", "must be finite and >= 0"));
        }
        if !(self.gamma > T::zero() && self.gamma.is_finite()) {
            return Err(Error::config("reg.gamma", "must be positive"));
        }
        if !(self.gamma_adv > T::zero() && self.gamma_adv.is_finite()) {
            return Err(Error::config("reg.gamma_adv", "must be positive"));
        }
        if self.power_iters == 0 {
            return Err(Error::config("reg.power_iters", "must be >= 1"));
        }
        if !(self.power_tol >= T::zero()) {
            return Err(Error::config("reg.power_tol", "must be >= 0"));
        }
        Ok(())
    }

    /// Same settings with a tighter power iteration, for checks that compare
    /// the estimate against a threshold.
    pub fn precise(&self) -> Self {
        Self {
            power_iters: self.power_iters.max(500),
            power_tol: T::zero(),
            ..*self
        }
    }
}

fn aajr_term<T: Scalar>(form: AajrForm, gamma_adv: T, amp: T) -> (T, T) {
    // Returns (term, d term / d amp²) so callers can differentiate through ‖ż‖².
    match form {
        AajrForm::Squared => (amp * amp, T::one()),
        AajrForm::Hinge => {
            let excess = (amp - gamma_adv).max(T::zero());
            if excess > T::zero() {
                (excess * excess, excess / amp)
            } else {
                (T::zero(), T::zero())
            }
        }
    }
}

/// `(1/K) Σ_t ‖J(s+δ_t) u_t‖²` (or its hinge form) with `u_t` read from the
/// trajectory as constants.
pub fn aajr_penalty<T: Scalar>(
    policy: &Mlp<T>,
    state: &[T],
    traj: &Trajectory<T>,
    cfg: &RegularizerConfig<T>,
) -> Result<T> {
    let k = traj.steps();
    if k == 0 {
        log::warn!("AAJR penalty requested for a trajectory without ascent steps; returning 0");
        return Ok(T::zero());
    }
    let mut total = T::zero();
    for (delta, u) in traj.deltas.iter().zip(&traj.ascent_dirs) {
        let amp = norm2(&policy.jvp(&add(state, delta), u)?);
        total += aajr_term(cfg.form, cfg.gamma_adv, amp).0;
    }
    Ok(total / T::of(k as f64))
}

/// Adds `weight · ∇_θ aajr_penalty` into `grads` and returns the penalty value.
pub fn accumulate_aajr_gradient<T: Scalar>(
    policy: &Mlp<T>,
    state: &[T],
    traj: &Trajectory<T>,
    cfg: &RegularizerConfig<T>,
    weight: T,
    grads: &mut Gradients<T>,
) -> Result<T> {
    let k = traj.steps();
    if k == 0 {
        return Ok(T::zero());
    }
    let inv_k = T::one() / T::of(k as f64);
    let (form, gamma_adv) = (cfg.form, cfg.gamma_adv);
    let objective = move |z: &[T], tan: &[T]| {
        let (term, slope) = aajr_term(form, gamma_adv, norm2(tan));
        ProbeValue {
            value: inv_k * term,
            d_output: vec![T::zero(); z.len()],
            d_tangent: scale(inv_k * T::of(2.0) * slope, tan),
        }
    };
    let mut local = Gradients::zeros_like(policy);
    let mut total = T::zero();
    for (delta, u) in traj.deltas.iter().zip(&traj.ascent_dirs) {
        let point = add(state, delta);
        total += policy.accumulate_gradient(
            &Probe {
                state: &point,
                direction: Some(u),
                objective: &objective,
            },
            &mut local,
        )?;
    }
    grads.add_scaled(weight, &local);
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralEstimate<T> {
    pub value: T,
    /// Unit right singular vector estimate.
    pub right_vector: Vec<T>,
    pub iterations: usize,
}

/// Power iteration on `JᵀJ` through jvp/vjp pairs from a seeded start vector.
pub fn spectral_norm<T: Scalar>(
    policy: &Mlp<T>,
    state: &[T],
    cfg: &RegularizerConfig<T>,
) -> Result<SpectralEstimate<T>> {
    if cfg.power_iters == 0 {
        return Err(Error::config("reg.power_iters", "must be >= 1"));
    }
    let d = policy.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.power_seed);
    let start: Vec<T> = (0..d).map(|_| T::of(rng.gen_range(-1.0..=1.0))).collect();
    let mut v = scale(T::one() / norm2(&start), &start);
    let mut jv = policy.jvp(state, &v)?;
    let mut sigma = norm2(&jv);
    let mut iterations = 0;
    while iterations < cfg.power_iters {
        iterations += 1;
        let y = policy.vjp(state, &jv)?;
        let ny = norm2(&y);
        if !ny.is_finite() {
            return Err(Error::numeric(format!("power iteration {iterations}")));
        }
        if ny == T::zero() {
            break;
        }
        v = scale(T::one() / ny, &y);
        jv = policy.jvp(state, &v)?;
        let next = norm2(&jv);
        if !next.is_finite() {
            return Err(Error::numeric(format!("power iteration {iterations}")));
        }
        let converged = (next - sigma).abs() < cfg.power_tol;
        sigma = next;
        if converged {
            break;
        }
    }
    Ok(SpectralEstimate {
        value: sigma,
        right_vector: v,
        iterations,
    })
}

fn hinge_sq<T: Scalar>(x: T, gamma: T) -> T {
    let e = (x - gamma).max(T::zero());
    e * e
}

/// Mean over `states` of `max(0, ‖J(s)‖₂ − γ)²`.
pub fn global_penalty<T: Scalar>(
    policy: &Mlp<T>,
    states: &[&[T]],
    cfg: &RegularizerConfig<T>,
) -> Result<T> {
    if states.is_empty() {
        return Err(Error::config("global_penalty.states", "state list is empty"));
    }
    let mut total = T::zero();
    for s in states {
        total += hinge_sq(spectral_norm(policy, s, cfg)?.value, cfg.gamma);
    }
    Ok(total / T::of(states.len() as f64))
}

/// Adds `weight · ∇_θ max(0, ‖J(s) v‖ − γ)²` into `grads`, with `v` the converged
/// right singular vector held fixed. Returns `(hinge value, spectral estimate)`.
pub fn accumulate_global_gradient<T: Scalar>(
    policy: &Mlp<T>,
    state: &[T],
    cfg: &RegularizerConfig<T>,
    weight: T,
    grads: &mut Gradients<T>,
) -> Result<(T, T)> {
    let est = spectral_norm(policy, state, cfg)?;
    let value = hinge_sq(est.value, cfg.gamma);
    if value == T::zero() || weight == T::zero() {
        return Ok((value, est.value));
    }
    let gamma = cfg.gamma;
    let objective = move |z: &[T], tan: &[T]| {
        let amp = norm2(tan);
        let excess = (amp - gamma).max(T::zero());
        let coef = if amp > T::zero() {
            T::of(2.0) * excess / amp
        } else {
            T::zero()
        };
        ProbeValue {
            value: excess * excess,
            d_output: vec![T::zero(); z.len()],
            d_tangent: scale(coef, tan),
        }
    };
    let mut local = Gradients::zeros_like(policy);
    policy.accumulate_gradient(
        &Probe {
            state,
            direction: Some(&est.right_vector),
            objective: &objective,
        },
        &mut local,
    )?;
    grads.add_scaled(weight, &local);
    Ok((value, est.value))
}

/// `‖J(s) u‖₂` for every recorded `(δ_t, u_t)`.
pub fn directional_amplifications<T: Scalar>(
    policy: &Mlp<T>,
    state: &[T],
    traj: &Trajectory<T>,
) -> Result<Vec<T>> {
    traj.deltas
        .iter()
        .zip(&traj.ascent_dirs)
        .map(|(d, u)| {
            let ju = policy.jvp(&add(state, d), u)?;
            Ok(dot(&ju, &ju).sqrt())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    fn single_step(u: Vec<f64>) -> Trajectory<f64> {
        Trajectory {
            deltas: vec![vec![0.0; u.len()], vec![0.0; u.len()]],
            ascent_dirs: vec![u.clone()],
            update_dirs: vec![None],
            inner_values: vec![0.0, 0.0],
            inner_grads: vec![u.clone(), u],
            dir_amps: vec![0.0],
        }
    }

    #[test]
    fn aajr_linear_policy() {
        let p = Mlp::linear(Matrix::diag(&[2.0, 1.0]), vec![0.0; 2]).unwrap();
        let cfg = RegularizerConfig::default();
        let v = aajr_penalty(&p, &[0.3, 0.3], &single_step(vec![1.0, 0.0]), &cfg).unwrap();
        assert_eq!(v, 4.0);

        let hinge = RegularizerConfig {
            form: AajrForm::Hinge,
            gamma_adv: 1.5,
            ..cfg
        };
        let v = aajr_penalty(&p, &[0.3, 0.3], &single_step(vec![1.0, 0.0]), &hinge).unwrap();
        assert_eq!(v, 0.25);
    }

    #[test]
    fn aajr_zero_policy_and_empty_trajectory() {
        let p = Mlp::linear(Matrix::zeros(2, 2), vec![0.0; 2]).unwrap();
        let cfg = RegularizerConfig::default();
        assert_eq!(aajr_penalty(&p, &[0.0, 0.0], &single_step(vec![1.0, 0.0]), &cfg).unwrap(), 0.0);
        let empty = Trajectory {
            deltas: vec![vec![0.0; 2]],
            ascent_dirs: vec![],
            update_dirs: vec![],
            inner_values: vec![0.0],
            inner_grads: vec![vec![0.0; 2]],
            dir_amps: vec![],
        };
        assert_eq!(aajr_penalty(&p, &[0.0, 0.0], &empty, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn spectral_norm_diagonal_and_zero() {
        let cfg = RegularizerConfig::<f64>::default();
        let p = Mlp::linear(Matrix::diag(&[1.0, 2.0]), vec![0.0; 2]).unwrap();
        let est = spectral_norm(&p, &[0.0, 0.0], &cfg).unwrap();
        assert!((est.value - 2.0).abs() < 1e-9, "{}", est.value);

        let z = Mlp::linear(Matrix::zeros(2, 2), vec![0.0; 2]).unwrap();
        assert_eq!(spectral_norm(&z, &[0.0, 0.0], &cfg).unwrap().value, 0.0);
    }

    #[test]
    fn global_penalty_values() {
        let cfg = RegularizerConfig::default();
        let p = Mlp::linear(Matrix::diag(&[3.0]), vec![0.0]).unwrap();
        let s: &[f64] = &[0.5];
        assert!((global_penalty(&p, &[s], &cfg).unwrap() - 4.0).abs() < 1e-12);

        let small = Mlp::linear(Matrix::diag(&[0.5]), vec![0.0]).unwrap();
        assert_eq!(global_penalty(&small, &[s, s], &cfg).unwrap(), 0.0);
        assert!(matches!(global_penalty(&p, &[], &cfg), Err(Error::Config { .. })));
    }

    #[test]
    fn config_validation() {
        let cfg = RegularizerConfig::<f64> {
            gamma: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = RegularizerConfig::<f64> {
            power_iters: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(RegularizerConfig::<f64>::default().validate().is_ok());
    }
}
