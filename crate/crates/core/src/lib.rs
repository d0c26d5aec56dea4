//! Learning navigation cost functions from expert demonstrations with
//! semantic observations.
//!
//! The pieces, in dataflow order:
//!
//! - [`gridworld`]: synthetic environments, 8-connected motion, a planar
//!   semantic range sensor, and expert demonstration generation.
//! - [`semantic_map`]: a recurrent Bayesian multi-class log-odds map whose
//!   softmax is the per-cell semantic posterior.
//! - [`cost_model`]: a small differentiable encoder-decoder network mapping
//!   the posterior to a strictly positive per-cell stage cost.
//! - [`planner`]: backward A* cost-to-go solver, exact references (Dijkstra,
//!   value iteration), Boltzmann policies, and the closed-form visitation
//!   subgradient of the optimal cost-to-go.
//! - [`learner`]: end-to-end training that back-propagates the demonstration
//!   negative log-likelihood through the planner into both encoders, plus the
//!   deployment rollout loop.
//! - [`metrics`]: NLL, control accuracy, trajectory success rate, and the
//!   Modified Hausdorff Distance.
//! - [`checkpoint`] / [`pipeline`]: parameter persistence and the gen /
//!   train / eval / rollout entry points the CLI wraps.

pub mod checkpoint;
pub mod cost_model;
pub mod gridworld;
pub mod learner;
pub mod metrics;
pub mod pipeline;
pub mod planner;
pub mod semantic_map;

pub use cost_model::{ArchConfig, CostEncoderParams, CostField};
pub use gridworld::{
    Control, DemoStep, Demonstration, EnvironmentSpec, LabeledPoint, SemanticPointCloud,
    SensorParams, State,
};
pub use learner::{RolloutOutcome, RolloutResult, ThetaParams, TrainConfig};
pub use metrics::EvalReport;
pub use planner::{PlanResult, Policy, Visitation};
pub use semantic_map::{LogOddsGrid, MapEncoderParams};
