//! Synthetic multi-agent system losses `L(z, a)` with exact smoothness constants,
//! and the seeded sampler for `(s, a)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{dot, Matrix};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub enum LossKind<T> {
    /// `½‖z + A a − c‖²`, Hessian `I`.
    QuadraticCongestion,
    /// `Σ_j softplus(β (z + A a − c)_j)`, Hessian `diag(β² σ(1−σ))`.
    SoftplusCongestion { beta: T },
    /// `½‖P (z + A a − c)‖²` for an orthogonal projector `P`; gradient stays in `range(P)`.
    ProjectedQuadratic { projector: Matrix<T> },
}

/// How peer context is generated alongside the state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// `s` and `a` drawn independently, uniform on `[-1, 1]`.
    #[default]
    Independent,
    /// `a` equals the leading coordinates of `s`: peers are observed through the state.
    ObservedPeers,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Environment<T> {
    pub kind: LossKind<T>,
    /// Target `c`, length `m`.
    pub target: Vec<T>,
    /// Coupling `A`, shape `m × p`.
    pub coupling: Matrix<T>,
    pub state_dim: usize,
    pub sampler: SamplerKind,
    pub seed: u64,
}

impl<T: Scalar> Environment<T> {
    pub fn new(
        kind: LossKind<T>,
        target: Vec<T>,
        coupling: Matrix<T>,
        state_dim: usize,
        sampler: SamplerKind,
        seed: u64,
    ) -> Result<Self> {
        let m = target.len();
        if m == 0 || state_dim == 0 {
            return Err(Error::config("environment", "dimensions must be positive"));
        }
        check_dim("environment coupling rows", m, coupling.rows())?;
        match &kind {
            LossKind::SoftplusCongestion { beta } if !(*beta > T::zero() && beta.is_finite()) => {
                return Err(Error::config("environment.beta", "beta must be positive"));
            }
            LossKind::ProjectedQuadratic { projector } => {
                check_dim("projector rows", m, projector.rows())?;
                check_dim("projector cols", m, projector.cols())?;
            }
            _ => {}
        }
        if sampler == SamplerKind::ObservedPeers && coupling.cols() > state_dim {
            return Err(Error::config(
                "environment.sampler",
                "observed_peers needs peer dimension <= state_dim",
            ));
        }
        if !coupling.is_finite() || !target.iter().all(|v| v.is_finite()) {
            return Err(Error::config("environment", "entries must be finite"));
        }
        Ok(Self {
            kind,
            target,
            coupling,
            state_dim,
            sampler,
            seed,
        })
    }

    /// Quadratic congestion with zero coupling to a single peer coordinate.
    pub fn quadratic(target: Vec<T>, state_dim: usize) -> Result<Self> {
        let m = target.len();
        Self::new(
            LossKind::QuadraticCongestion,
            target,
            Matrix::zeros(m, 1),
            state_dim,
            SamplerKind::Independent,
            0,
        )
    }

    pub fn action_dim(&self) -> usize {
        self.target.len()
    }

    pub fn peer_dim(&self) -> usize {
        self.coupling.cols()
    }

    /// `z + A a − c`.
    fn residual(&self, z: &[T], peers: &[T]) -> Result<Vec<T>> {
        check_dim("loss action", self.action_dim(), z.len())?;
        check_dim("loss peer context", self.peer_dim(), peers.len())?;
        let aa = self.coupling.matvec(peers)?;
        Ok(z.iter()
            .zip(&aa)
            .zip(&self.target)
            .map(|((&zi, &ai), &ci)| zi + ai - ci)
            .collect())
    }

    pub fn loss(&self, z: &[T], peers: &[T]) -> Result<T> {
        let r = self.residual(z, peers)?;
        Ok(match &self.kind {
            LossKind::QuadraticCongestion => T::of(0.5) * dot(&r, &r),
            LossKind::SoftplusCongestion { beta } => r.iter().map(|&x| softplus(*beta * x)).sum(),
            LossKind::ProjectedQuadratic { projector } => {
                let pr = projector.matvec(&r)?;
                T::of(0.5) * dot(&pr, &pr)
            }
        })
    }

    /// `∇_z L(z, a)`.
    pub fn loss_grad(&self, z: &[T], peers: &[T]) -> Result<Vec<T>> {
        let r = self.residual(z, peers)?;
        Ok(match &self.kind {
            LossKind::QuadraticCongestion => r,
            LossKind::SoftplusCongestion { beta } => {
                r.iter().map(|&x| *beta * sigmoid(*beta * x)).collect()
            }
            // P symmetric and idempotent, so Pᵀ P r = P r.
            LossKind::ProjectedQuadratic { projector } => projector.matvec(&r)?,
        })
    }

    /// Analytic `∇²_z L(z, a)`.
    pub fn loss_hessian(&self, z: &[T], peers: &[T]) -> Result<Matrix<T>> {
        let r = self.residual(z, peers)?;
        Ok(match &self.kind {
            LossKind::QuadraticCongestion => Matrix::identity(r.len()),
            LossKind::SoftplusCongestion { beta } => {
                let d: Vec<T> = r
                    .iter()
                    .map(|&x| {
                        let s = sigmoid(*beta * x);
                        *beta * *beta * s * (T::one() - s)
                    })
                    .collect();
                Matrix::diag(&d)
            }
            LossKind::ProjectedQuadratic { projector } => projector.clone(),
        })
    }

    /// Exact Lipschitz constant `L_L` of `∇_z L`.
    pub fn loss_hessian_bound(&self) -> T {
        match &self.kind {
            LossKind::QuadraticCongestion => T::one(),
            LossKind::SoftplusCongestion { beta } => *beta * *beta / T::of(4.0),
            LossKind::ProjectedQuadratic { projector } => {
                if projector.frobenius_sq() > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }

    /// One `(s, a)` pair from a fresh generator seeded with `seed`.
    pub fn sample(&self, seed: u64) -> (Vec<T>, Vec<T>) {
        self.draw(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// `n` consecutive pairs from one generator seeded with `seed`.
    pub fn sample_batch(&self, seed: u64, n: usize) -> Vec<(Vec<T>, Vec<T>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.draw(&mut rng)).collect()
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> (Vec<T>, Vec<T>) {
        let state: Vec<T> = (0..self.state_dim)
            .map(|_| T::of(rng.gen_range(-1.0..=1.0)))
            .collect();
        let peers = match self.sampler {
            SamplerKind::Independent => (0..self.peer_dim())
                .map(|_| T::of(rng.gen_range(-1.0..=1.0)))
                .collect(),
            SamplerKind::ObservedPeers => state[..self.peer_dim()].to_vec(),
        };
        (state, peers)
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
