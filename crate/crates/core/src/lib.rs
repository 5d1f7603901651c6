//! Differentiable 2D driving simulator with analytic policy gradient (APG)
//! training and a behaviour-cloning baseline.
//!
//! - [`types`]: agent states, actions, trajectories, scenarios.
//! - [`dynamics`]: bicycle and delta models with closed-form Jacobians.
//! - [`autodiff`]: reverse-mode tape over 2-D tensors.
//! - [`policy`]: recurrent Gaussian policy with an agent mixer.
//! - [`trainer`]: APG and BC rollouts, Adam, the training loop.
//! - [`metrics`]: ADE, overlap and offroad metrics, multi-mode evaluation.
//! - [`scenario_io`]: scenario files, manifests, synthetic generation.
//! - [`gradcheck`]: finite-difference verification of all derivatives.

pub mod autodiff;
pub mod dynamics;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod policy;
pub mod scenario_io;
pub mod trainer;
pub mod types;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use metrics::{evaluate, EvalConfig, EvalReport};
pub use policy::{PolicyConfig, PolicyParams};
pub use scenario_io::{GenSpec, RoadShape, Split};
pub use trainer::{train, LossWeights, Mode, ResetPolicy, TrainConfig, Trainer};
pub use types::{Action, AgentState, DynamicsModel, Polyline, Scenario, SimState, Trajectory};
