//! Minimax training of small differentiable policies against bounded state
//! shocks, with trajectory-aligned Jacobian regularization and numerical checks
//! of the associated smoothness and stability bounds.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). The aliases
//! at the crate root fix the scalar to `f64`, which the command line tool and
//! the checks use.
//!
//! ```
//! use aajr::{pga_run, Environment, InnerLoopConfig, InnerObjective, NormKind, PerturbationSet, Policy};
//! use aajr::linalg::Matrix;
//!
//! let policy = Policy::linear(Matrix::identity(2), vec![0.0; 2]).unwrap();
//! let env = Environment::quadratic(vec![1.0, 0.0], 2).unwrap();
//! let peers = [0.0];
//! let obj = InnerObjective::new(&policy, &env, &[0.0, 0.0], &peers).unwrap();
//! let set = PerturbationSet::new(NormKind::Linf, 2.0, 2).unwrap();
//! let traj = pga_run(&obj, &set, &InnerLoopConfig::new(1.0, 1)).unwrap();
//! assert_eq!(traj.inner_values, vec![0.5, 2.0]);
//! ```

// `!(x <= y)` comparisons deliberately treat NaN as a failure.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod environment;
pub mod error;
pub mod linalg;
pub mod pga;
pub mod policy;
pub mod regularizers;
mod scalar;
pub mod trainer;
pub mod verification;

pub use config::{parse_config, RunConfig};
pub use environment::{LossKind, SamplerKind};
pub use error::{Error, Result};
pub use pga::{ascent_direction, pga_run, NormKind};
pub use policy::{Activation, Checkpoint};
pub use regularizers::{aajr_penalty, global_penalty, spectral_norm, AajrForm};
pub use scalar::Scalar;
pub use trainer::{train, GapReport, RunMetrics, TrainMode};

pub type Policy = policy::Mlp<f64>;
pub type Gradients = policy::Gradients<f64>;
pub type Environment = environment::Environment<f64>;
pub type PerturbationSet = pga::PerturbationSet<f64>;
pub type InnerLoopConfig = pga::InnerLoopConfig<f64>;
pub type InnerObjective<'a> = pga::InnerObjective<'a, f64>;
pub type Trajectory = pga::Trajectory<f64>;
pub type RegularizerConfig = regularizers::RegularizerConfig<f64>;
pub type TrainConfig = trainer::TrainConfig<f64>;
pub type TrainOutcome = trainer::TrainOutcome<f64>;
pub type Matrix = linalg::Matrix<f64>;
