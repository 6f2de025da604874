//! Strict-expansion witness: a linear policy with Jacobian `γ P_U + M P_{U⊥}` is
//! directionally bounded on `U` yet violates the global bound when `M > γ`.

use serde::{Deserialize, Serialize};

use crate::environment::{Environment, LossKind, SamplerKind};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{dot, norm2, sub, Matrix};
use crate::pga::{pga_run, InnerLoopConfig, InnerObjective, NormKind, PerturbationSet};
use crate::policy::Mlp;
use crate::regularizers::{spectral_norm, RegularizerConfig};
use crate::Scalar;

const ORTHO_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct WitnessSpec<T> {
    pub gamma: T,
    pub big_m: T,
    /// Orthonormal basis of `U`, each vector of length `dim`.
    pub basis: Vec<Vec<T>>,
    pub dim: usize,
}

impl<T: Scalar> WitnessSpec<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > T::zero()) {
            return Err(Error::config("witness.gamma", "must be positive"));
        }
        if !(self.big_m > T::zero()) {
            return Err(Error::config("witness.M", "must be positive"));
        }
        if self.basis.is_empty() || self.basis.len() >= self.dim {
            return Err(Error::config(
                "witness.U_basis",
                "U must be a nonzero proper subspace (1 <= dim U < d)",
            ));
        }
        for (i, b) in self.basis.iter().enumerate() {
            check_dim("witness basis vector", self.dim, b.len())?;
            for (j, c) in self.basis.iter().enumerate().skip(i) {
                let expected = if i == j { 1.0 } else { 0.0 };
                if (dot(b, c).as_f64() - expected).abs() > ORTHO_TOL {
                    return Err(Error::config(
                        "witness.U_basis",
                        format!("basis is not orthonormal (vectors {i}, {j})"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn projector(&self) -> Result<Matrix<T>> {
        Matrix::projector(self.dim, &self.basis)
    }

    /// `J = γ P_U + M (I − P_U)`.
    pub fn jacobian(&self) -> Result<Matrix<T>> {
        self.validate()?;
        let p = self.projector()?;
        let complement = Matrix::identity(self.dim).add(&p.scaled(-T::one()))?;
        p.scaled(self.gamma).add(&complement.scaled(self.big_m))
    }

    pub fn policy(&self) -> Result<Mlp<T>> {
        Mlp::linear(self.jacobian()?, vec![T::zero(); self.dim])
    }

    /// Component of `v` orthogonal to `U`.
    pub fn out_of_subspace(&self, v: &[T]) -> Result<Vec<T>> {
        Ok(sub(v, &self.projector()?.matvec(v)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WitnessReport {
    pub gamma: f64,
    pub big_m: f64,
    pub max_dir_amp: f64,
    pub spectral_norm: f64,
    /// `‖J u‖ ≤ γ` for every supplied direction.
    pub membership: bool,
    /// `‖J‖₂ > γ`.
    pub exclusion: bool,
    pub pass: bool,
}

/// Checks membership in the directional class along `directions` and exclusion
/// from the globally bounded class.
pub fn class_witness<T: Scalar>(
    spec: &WitnessSpec<T>,
    directions: &[Vec<T>],
    reg: &RegularizerConfig<T>,
) -> Result<WitnessReport> {
    let policy = spec.policy()?;
    let origin = vec![T::zero(); spec.dim];
    let mut max_amp = 0.0f64;
    for (i, u) in directions.iter().enumerate() {
        check_dim("witness direction", spec.dim, u.len())?;
        if norm2(&spec.out_of_subspace(u)?).as_f64() > ORTHO_TOL {
            return Err(Error::config(
                format!("witness.directions[{i}]"),
                "direction does not lie in U",
            ));
        }
        if norm2(u).as_f64() > 1.0 + ORTHO_TOL {
            return Err(Error::config(
                format!("witness.directions[{i}]"),
                "direction norm exceeds 1",
            ));
        }
        max_amp = max_amp.max(norm2(&policy.jvp(&origin, u)?).as_f64());
    }
    let gamma = spec.gamma.as_f64();
    let sigma = spectral_norm(&policy, &origin, &reg.precise())?.value.as_f64();
    let membership = max_amp <= gamma + ORTHO_TOL;
    let exclusion = sigma > gamma + ORTHO_TOL;
    Ok(WitnessReport {
        gamma,
        big_m: spec.big_m.as_f64(),
        max_dir_amp: max_amp,
        spectral_norm: sigma,
        membership,
        exclusion,
        pass: membership && exclusion,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndToEndWitnessReport {
    pub trajectories: usize,
    /// Largest `‖P_{U⊥} u_t‖₂` over all recorded ascent directions.
    pub max_out_of_subspace: f64,
    pub max_dir_amp: f64,
    pub spectral_norm: f64,
    pub directions_in_subspace: bool,
    pub directional_bound_holds: bool,
    pub global_bound_violated: bool,
    pub pass: bool,
}

/// Runs PGA on the witness policy against the loss `½‖P_U(z − c)‖²`, whose
/// gradient lies in `U`, over an ℓ₂ ball (so projections keep iterates in `U`).
pub fn witness_end_to_end<T: Scalar>(
    spec: &WitnessSpec<T>,
    target: Vec<T>,
    epsilon: T,
    inner: &InnerLoopConfig<T>,
    n_samples: usize,
    seed: u64,
    reg: &RegularizerConfig<T>,
) -> Result<EndToEndWitnessReport> {
    let policy = spec.policy()?;
    let env = Environment::new(
        LossKind::ProjectedQuadratic {
            projector: spec.projector()?,
        },
        target,
        Matrix::zeros(spec.dim, 1),
        spec.dim,
        SamplerKind::Independent,
        seed,
    )?;
    let set = PerturbationSet::new(NormKind::L2, epsilon, spec.dim)?;
    let gamma = spec.gamma.as_f64();
    let mut max_out = 0.0f64;
    let mut max_amp = 0.0f64;
    for (s, a) in env.sample_batch(seed, n_samples) {
        let obj = InnerObjective::new(&policy, &env, &s, &a)?;
        let traj = pga_run(&obj, &set, inner)?;
        for u in &traj.ascent_dirs {
            max_out = max_out.max(norm2(&spec.out_of_subspace(u)?).as_f64());
        }
        max_amp = max_amp.max(traj.max_dir_amp().as_f64());
    }
    let origin = vec![T::zero(); spec.dim];
    let sigma = spectral_norm(&policy, &origin, &reg.precise())?.value.as_f64();
    let directions_in_subspace = max_out <= ORTHO_TOL;
    let directional_bound_holds = max_amp <= gamma + ORTHO_TOL;
    let global_bound_violated = sigma > gamma + ORTHO_TOL;
    Ok(EndToEndWitnessReport {
        trajectories: n_samples,
        max_out_of_subspace: max_out,
        max_dir_amp: max_amp,
        spectral_norm: sigma,
        directions_in_subspace,
        directional_bound_holds,
        global_bound_violated,
        pass: directions_in_subspace && directional_bound_holds && global_bound_violated,
    })
}
