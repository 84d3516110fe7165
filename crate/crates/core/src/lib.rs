//! Simulation and analysis toolkit for UCB topic exploration in a
//! recommender, evaluated with a two-phase A/B protocol.
//!
//! * [`env`]: synthetic users and per-impression outcomes.
//! * [`policy`]: UCB and greedy topic selection.
//! * [`model`]: the shrinkage reward estimator.
//! * [`harness`]: group assignment, the daily loop and the two phases.
//! * [`metrics`]: exploration inefficiency, topic diversity, interest
//!   uncertainty and topic excellence.
//!
//! Every run is a pure function of its [`ExperimentConfig`] and seed.

/// Version of this library, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod config;
pub mod env;
pub mod error;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod model;
pub mod policy;
pub mod rng;
pub mod types;

pub use config::{load_config, EnvironmentConfig, ExperimentConfig, TaskWeights};
pub use error::{Error, Result};
pub use harness::{run_experiment, run_experiment_with, simulate, ExperimentRun, GroupAssignment, PhasePlan};
pub use io::{decode_impression, encode_impression, LogBounds};
pub use metrics::{compute_metrics, Metric, MetricsOptions, MetricsReport};
pub use model::RewardModel;
pub use policy::{ucb_score, ScoreParams};
pub use types::{Group, ImpressionRecord, OutcomeFlags, Outcomes, Phase, TaskKind, TopicId, UserId};
