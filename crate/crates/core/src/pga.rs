//! Inner maximization: projected gradient ascent over the perturbation set.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::environment::Environment;
use crate::error::{check_dim, Error, Result};
use crate::linalg::{add, all_finite, axpy, norm2, norm_inf, scale, sub};
use crate::policy::Mlp;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    #[serde(rename = "2")]
    L2,
    #[serde(rename = "inf")]
    Linf,
}

/// `Δ = {δ ∈ R^d : ‖δ‖_p ≤ ε}`.
///
/// `ε = 0` is accepted and describes the degenerate set `{0}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbationSet<T> {
    pub norm: NormKind,
    pub epsilon: T,
    pub dim: usize,
}

impl<T: Scalar> PerturbationSet<T> {
    pub fn new(norm: NormKind, epsilon: T, dim: usize) -> Result<Self> {
        if !(epsilon >= T::zero() && epsilon.is_finite()) {
            return Err(Error::config("set.epsilon", "radius must be finite and >= 0"));
        }
        Ok(Self { norm, epsilon, dim })
    }

    pub fn norm_of(&self, delta: &[T]) -> T {
        match self.norm {
            NormKind::L2 => norm2(delta),
            NormKind::Linf => norm_inf(delta),
        }
    }

    pub fn contains(&self, delta: &[T], tol: T) -> bool {
        self.norm_of(delta) <= self.epsilon + tol
    }

    /// Euclidean projection onto the set.
    pub fn project(&self, delta: &[T]) -> Vec<T> {
        let eps = self.epsilon;
        match self.norm {
            NormKind::L2 => {
                let n = norm2(delta);
                if n > eps {
                    scale(eps / n, delta)
                } else {
                    delta.to_vec()
                }
            }
            NormKind::Linf => delta.iter().map(|&x| x.max(-eps).min(eps)).collect(),
        }
    }
}

/// `u = grad / (‖grad‖₂ + ε₀)`.
pub fn ascent_direction<T: Scalar>(grad: &[T], eps0: T) -> Vec<T> {
    let denom = norm2(grad) + eps0;
    grad.iter().map(|&g| g / denom).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerLoopConfig<T> {
    pub eta: T,
    pub steps: usize,
    pub eps0: T,
}

impl<T: Scalar> InnerLoopConfig<T> {
    pub const DEFAULT_EPS0: f64 = 1e-8;

    pub fn new(eta: T, steps: usize) -> Self {
        Self {
            eta,
            steps,
            eps0: T::of(Self::DEFAULT_EPS0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > T::zero() && self.eta.is_finite()) {
            return Err(Error::config("inner.eta", "step size must be positive"));
        }
        if !(self.eps0 > T::zero() && self.eps0.is_finite()) {
            return Err(Error::config("inner.eps0", "normalization floor must be positive"));
        }
        Ok(())
    }
}

/// `g(δ) = L(π(s + δ), a)` for a fixed policy, state and peer context.
#[derive(Clone, Copy)]
pub struct InnerObjective<'a, T> {
    pub policy: &'a Mlp<T>,
    pub env: &'a Environment<T>,
    pub state: &'a [T],
    pub peers: &'a [T],
}

impl<'a, T: Scalar> InnerObjective<'a, T> {
    pub fn new(
        policy: &'a Mlp<T>,
        env: &'a Environment<T>,
        state: &'a [T],
        peers: &'a [T],
    ) -> Result<Self> {
        check_dim("state vs policy input", policy.input_dim(), state.len())?;
        check_dim("state vs environment", env.state_dim, state.len())?;
        check_dim("policy output vs environment", env.action_dim(), policy.output_dim())?;
        check_dim("peer context", env.peer_dim(), peers.len())?;
        Ok(Self {
            policy,
            env,
            state,
            peers,
        })
    }

    pub fn point(&self, delta: &[T]) -> Vec<T> {
        add(self.state, delta)
    }

    pub fn value(&self, delta: &[T]) -> Result<T> {
        let z = self.policy.forward(&self.point(delta))?;
        self.env.loss(&z, self.peers)
    }

    /// `(g(δ), ∇_δ g(δ))` with `∇_δ g = J(s+δ)ᵀ ∇_z L`.
    pub fn value_grad(&self, delta: &[T]) -> Result<(T, Vec<T>)> {
        let x = self.point(delta);
        let trace = self.policy.trace(&x, None)?;
        let value = self.env.loss(&trace.output, self.peers)?;
        let r = self.env.loss_grad(&trace.output, self.peers)?;
        Ok((value, trace.backward(&r, None, None)))
    }

    pub fn grad(&self, delta: &[T]) -> Result<Vec<T>> {
        Ok(self.value_grad(delta)?.1)
    }

    /// `J(s+δ) v`.
    pub fn jvp(&self, delta: &[T], v: &[T]) -> Result<Vec<T>> {
        self.policy.jvp(&self.point(delta), v)
    }
}

/// Recorded PGA run. `deltas`, `inner_values` and `inner_grads` have `K + 1`
/// entries; `ascent_dirs`, `update_dirs` and `dir_amps` have `K`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    pub deltas: Vec<Vec<T>>,
    pub ascent_dirs: Vec<Vec<T>>,
    /// `None` when the step did not move.
    pub update_dirs: Vec<Option<Vec<T>>>,
    pub inner_values: Vec<T>,
    pub inner_grads: Vec<Vec<T>>,
    /// `‖J(s+δ_t) u_t‖₂`.
    pub dir_amps: Vec<T>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn steps(&self) -> usize {
        self.ascent_dirs.len()
    }

    /// `δ* = δ_K`.
    pub fn final_delta(&self) -> &[T] {
        self.deltas.last().expect("trajectory holds δ_0")
    }

    pub fn final_value(&self) -> T {
        *self.inner_values.last().expect("trajectory holds g(δ_0)")
    }

    pub fn max_dir_amp(&self) -> T {
        self.dir_amps.iter().fold(T::zero(), |m, &a| m.max(a))
    }

    /// Writes one JSON object per iterate: `{t, delta, u, v, g, grad_norm, dir_amp}`.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for t in 0..self.deltas.len() {
            let rec = TrajectoryRecord {
                t,
                delta: &self.deltas[t],
                u: self.ascent_dirs.get(t).map(Vec::as_slice),
                v: self.update_dirs.get(t).and_then(|v| v.as_deref()),
                g: self.inner_values[t],
                grad_norm: norm2(&self.inner_grads[t]),
                dir_amp: self.dir_amps.get(t).copied(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
#[serde(bound = "T: Scalar")]
struct TrajectoryRecord<'a, T> {
    t: usize,
    delta: &'a [T],
    u: Option<&'a [T]>,
    v: Option<&'a [T]>,
    g: T,
    grad_norm: T,
    dir_amp: Option<T>,
}

/// Runs `K` steps of `δ_{t+1} = Π_Δ(δ_t + η ∇g(δ_t))` from `δ_0 = 0`.
pub fn pga_run<T: Scalar>(
    objective: &InnerObjective<'_, T>,
    set: &PerturbationSet<T>,
    cfg: &InnerLoopConfig<T>,
) -> Result<Trajectory<T>> {
    cfg.validate()?;
    check_dim("perturbation set", objective.state.len(), set.dim)?;
    let k = cfg.steps;
    let mut traj = Trajectory {
        deltas: Vec::with_capacity(k + 1),
        ascent_dirs: Vec::with_capacity(k),
        update_dirs: Vec::with_capacity(k),
        inner_values: Vec::with_capacity(k + 1),
        inner_grads: Vec::with_capacity(k + 1),
        dir_amps: Vec::with_capacity(k),
    };
    let mut delta = vec![T::zero(); set.dim];
    for t in 0..=k {
        let (g, grad) = objective
            .value_grad(&delta)
            .map_err(|e| tag_step(e, t))?;
        if !g.is_finite() || !all_finite(&grad) {
            return Err(Error::numeric(format!("inner step {t}: loss or gradient")));
        }
        traj.inner_values.push(g);
        traj.deltas.push(delta.clone());
        if t == k {
            traj.inner_grads.push(grad);
            break;
        }
        let u = ascent_direction(&grad, cfg.eps0);
        let amp = norm2(&objective.jvp(&delta, &u).map_err(|e| tag_step(e, t))?);
        let next = set.project(&axpy(&delta, cfg.eta, &grad));
        let step = sub(&next, &delta);
        let v = if next != delta {
            let n = norm2(&step);
            Some(scale(T::one() / n, &step))
        } else {
            None
        };
        traj.inner_grads.push(grad);
        traj.ascent_dirs.push(u);
        traj.dir_amps.push(amp);
        traj.update_dirs.push(v);
        delta = next;
    }
    Ok(traj)
}

fn tag_step(e: Error, t: usize) -> Error {
    match e {
        Error::Numeric { location } => Error::numeric(format!("inner step {t}: {location}")),
        other => other,
    }
}
