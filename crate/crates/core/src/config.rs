//! Strict JSON run configuration.
//!
//! Unknown keys are rejected everywhere. Optional keys and their defaults:
//!
//! | key | default |
//! |-----|---------|
//! | `environment.A` | zero `m × 1` matrix |
//! | `environment.sampler` | `"independent"` |
//! | `environment.seed` | `0` |
//! | `policy.activations` | `tanh` on hidden layers, `identity` on the output |
//! | `policy.init_seed` | `0` |
//! | `train.mode` | `"nominal"` |
//! | `train.batch_size` | `32` |
//! | `train.seed` | `0` |
//! | `train.inner.eps0` | `1e-8` |
//! | `train.reg` | `lambda 0, gamma 1, gamma_adv 1, power_iters 20, power_tol 1e-9, aajr_form "squared"` |
//! | `verify.seeds` | `0..20` |
//! | `verify.n_inclusion_samples` | `50` |
//! | `verify.options` | `grid 5, gradient-difference curvature, tol_curv_rel 1e-4, tol_ineq 1e-8` |
//! | `sweep` | absent; `aajr sweep` then uses the sweep defaults |
//! | `output_dir` | `"runs"` |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::environment::{Environment, LossKind, SamplerKind};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::pga::{InnerLoopConfig, NormKind, PerturbationSet};
use crate::policy::{Activation, Mlp};
use crate::regularizers::{AajrForm, RegularizerConfig};
use crate::trainer::{PolicySpec, SweepConfig, TrainConfig, TrainMode};
use crate::verification::VerifyOptions;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvironmentKind {
    QuadraticCongestion,
    SoftplusCongestion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentBlock {
    pub kind: EnvironmentKind,
    /// Target `c`; its length is the action dimension `m`.
    pub c: Vec<f64>,
    /// Coupling matrix, one inner list per row.
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    pub coupling: Option<Vec<Vec<f64>>>,
    /// Softplus sharpness; required for `softplus_congestion` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub state_dim: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sampler: SamplerKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyBlock {
    /// Layer widths from input to output.
    pub dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activations: Option<Vec<Activation>>,
    #[serde(default)]
    pub init_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerBlock {
    pub eta: f64,
    #[serde(rename = "K")]
    pub steps: usize,
    #[serde(default = "default_eps0")]
    pub eps0: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetBlock {
    /// `"2"` or `"inf"`.
    pub p: NormKind,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegBlock {
    pub lambda: f64,
    pub gamma: f64,
    pub gamma_adv: f64,
    pub power_iters: usize,
    pub power_tol: f64,
    pub power_seed: u64,
    pub aajr_form: AajrForm,
}

impl Default for RegBlock {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            gamma: 1.0,
            gamma_adv: 1.0,
            power_iters: 20,
            power_tol: 1e-9,
            power_seed: 0,
            aajr_form: AajrForm::Squared,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBlock {
    #[serde(default = "default_mode")]
    pub mode: TrainMode,
    pub outer_lr: f64,
    pub outer_steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    pub inner: InnerBlock,
    pub set: SetBlock,
    #[serde(default)]
    pub reg: RegBlock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyBlock {
    pub seeds: Vec<u64>,
    pub n_inclusion_samples: usize,
    pub options: VerifyOptions,
}

impl Default for VerifyBlock {
    fn default() -> Self {
        Self {
            seeds: (0..20).collect(),
            n_inclusion_samples: 50,
            options: VerifyOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub environment: EnvironmentBlock,
    pub policy: PolicyBlock,
    pub train: TrainBlock,
    #[serde(default)]
    pub verify: VerifyBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_eps0() -> f64 {
    InnerLoopConfig::<f64>::DEFAULT_EPS0
}

fn default_mode() -> TrainMode {
    TrainMode::Nominal
}

fn default_batch() -> usize {
    32
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn positive(path: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::config(path, format!("must be positive and finite, got {x}")))
    }
}

fn dim_conflict(path: &str, what: String) -> Error {
    Error::config(path, what)
}

/// Reads, parses and validates a configuration file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(path.display().to_string(), format!("cannot read config: {e}")))?;
    RunConfig::from_json(&text)
}

impl RunConfig {
    /// Parses and validates; parse errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn action_dim(&self) -> usize {
        self.environment.c.len()
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.policy.activations.clone().unwrap_or_else(|| {
            let n = self.policy.dims.len().saturating_sub(1);
            (0..n)
                .map(|i| if i + 1 == n { Activation::Identity } else { Activation::Tanh })
                .collect()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let env = &self.environment;
        let m = env.c.len();
        if m == 0 {
            return Err(Error::config("environment.c", "must be non-empty"));
        }
        if env.state_dim == 0 {
            return Err(Error::config("environment.state_dim", "must be >= 1"));
        }
        if !env.c.iter().all(|v| v.is_finite()) {
            return Err(Error::config("environment.c", "entries must be finite"));
        }
        if let Some(a) = &env.coupling {
            if a.len() != m {
                return Err(dim_conflict(
                    "environment.A",
                    format!("has {} rows, environment.c has length {m}", a.len()),
                ));
            }
            let p = a.first().map_or(0, Vec::len);
            if p == 0 || a.iter().any(|r| r.len() != p) {
                return Err(Error::config("environment.A", "rows must be non-empty and equal length"));
            }
            if !a.iter().flatten().all(|v| v.is_finite()) {
                return Err(Error::config("environment.A", "entries must be finite"));
            }
            if env.sampler == SamplerKind::ObservedPeers && p > env.state_dim {
                return Err(dim_conflict(
                    "environment.sampler",
                    format!("observed_peers needs A columns ({p}) <= state_dim"),
                ));
            }
        }
        match (env.kind, env.beta) {
            (EnvironmentKind::SoftplusCongestion, None) => {
                return Err(Error::config("environment.beta", "required for softplus_congestion"));
            }
            (EnvironmentKind::SoftplusCongestion, Some(b)) => positive("environment.beta", b)?,
            (EnvironmentKind::QuadraticCongestion, Some(_)) => {
                return Err(Error::config("environment.beta", "only valid for softplus_congestion"));
            }
            _ => {}
        }

        let dims = &self.policy.dims;
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::config("policy.dims", "need >= 2 positive widths"));
        }
        if dims[0] != env.state_dim {
            return Err(dim_conflict(
                "policy.dims",
                format!("input width {} differs from environment.state_dim {}", dims[0], env.state_dim),
            ));
        }
        if dims[dims.len() - 1] != m {
            return Err(dim_conflict(
                "policy.dims",
                format!("output width {} differs from environment.c length {m}", dims[dims.len() - 1]),
            ));
        }
        if let Some(acts) = &self.policy.activations {
            if acts.len() != dims.len() - 1 {
                return Err(dim_conflict(
                    "policy.activations",
                    format!("need {} entries, got {}", dims.len() - 1, acts.len()),
                ));
            }
            if acts.last() != Some(&Activation::Identity) {
                return Err(Error::config("policy.activations", "output layer must be identity"));
            }
        }

        let t = &self.train;
        positive("train.outer_lr", t.outer_lr)?;
        if t.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        positive("train.inner.eta", t.inner.eta)?;
        positive("train.inner.eps0", t.inner.eps0)?;
        positive("train.set.epsilon", t.set.epsilon)?;
        let r = &t.reg;
        if !(r.lambda >= 0.0 && r.lambda.is_finite()) {
            return Err(Error::config("train.reg.lambda", "must be finite and >= 0"));
        }
        positive("train.reg.gamma", r.gamma)?;
        positive("train.reg.gamma_adv", r.gamma_adv)?;
        if r.power_iters == 0 {
            return Err(Error::config("train.reg.power_iters", "must be >= 1"));
        }
        if !(r.power_tol >= 0.0) {
            return Err(Error::config("train.reg.power_tol", "must be >= 0"));
        }

        let v = &self.verify;
        if v.seeds.is_empty() {
            return Err(Error::config("verify.seeds", "must be non-empty"));
        }
        let o = &v.options;
        if o.grid == 0 {
            return Err(Error::config("verify.options.grid", "must be >= 1"));
        }
        for (name, x) in [
            ("verify.options.tol_curv_rel", o.tol_curv_rel),
            ("verify.options.tol_ineq", o.tol_ineq),
            ("verify.options.interior_margin", o.interior_margin),
            ("verify.options.feas_tol", o.feas_tol),
            ("verify.options.directional_tol", o.directional_tol),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(Error::config(name, "must be finite and >= 0"));
            }
        }
        if let Some(s) = &self.sweep {
            s.validate()?;
        }
        Ok(())
    }

    pub fn environment<T: Scalar>(&self) -> Result<Environment<T>> {
        let e = &self.environment;
        let m = e.c.len();
        let kind = match e.kind {
            EnvironmentKind::QuadraticCongestion => LossKind::QuadraticCongestion,
            EnvironmentKind::SoftplusCongestion => LossKind::SoftplusCongestion {
                beta: T::of(e.beta.unwrap_or(1.0)),
            },
        };
        let coupling = match &e.coupling {
            Some(rows) => {
                let rows: Vec<Vec<T>> = rows
                    .iter()
                    .map(|r| r.iter().map(|&x| T::of(x)).collect())
                    .collect();
                Matrix::from_rows(&rows)?
            }
            None => Matrix::zeros(m, 1),
        };
        Environment::new(
            kind,
            e.c.iter().map(|&x| T::of(x)).collect(),
            coupling,
            e.state_dim,
            e.sampler,
            e.seed,
        )
    }

    pub fn policy_spec(&self) -> PolicySpec {
        PolicySpec {
            dims: self.policy.dims.clone(),
            activations: self.activations(),
            init_seed: self.policy.init_seed,
        }
    }

    pub fn init_policy<T: Scalar>(&self) -> Result<Mlp<T>> {
        Mlp::init(&self.policy.dims, &self.activations(), self.policy.init_seed)
    }

    pub fn inner<T: Scalar>(&self) -> InnerLoopConfig<T> {
        InnerLoopConfig {
            eta: T::of(self.train.inner.eta),
            steps: self.train.inner.steps,
            eps0: T::of(self.train.inner.eps0),
        }
    }

    pub fn perturbation_set<T: Scalar>(&self) -> Result<PerturbationSet<T>> {
        PerturbationSet::new(
            self.train.set.p,
            T::of(self.train.set.epsilon),
            self.environment.state_dim,
        )
    }

    pub fn regularizer<T: Scalar>(&self) -> RegularizerConfig<T> {
        let r = &self.train.reg;
        RegularizerConfig {
            lambda: T::of(r.lambda),
            gamma: T::of(r.gamma),
            gamma_adv: T::of(r.gamma_adv),
            power_iters: r.power_iters,
            power_tol: T::of(r.power_tol),
            power_seed: r.power_seed,
            form: r.aajr_form,
        }
    }

    pub fn train_config<T: Scalar>(&self) -> Result<TrainConfig<T>> {
        Ok(TrainConfig {
            mode: self.train.mode,
            outer_lr: T::of(self.train.outer_lr),
            outer_steps: self.train.outer_steps,
            batch_size: self.train.batch_size,
            inner: self.inner(),
            set: self.perturbation_set()?,
            reg: self.regularizer(),
            seed: self.train.seed,
        })
    }

    pub fn sweep_config(&self) -> SweepConfig {
        self.sweep.clone().unwrap_or_default()
    }
}
