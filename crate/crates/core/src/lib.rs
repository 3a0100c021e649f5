//! Covariate-adjusted estimation of the participant-average odds ratio in
//! cluster-randomized trials with binary outcomes.
//!
//! The crate covers independence-GEE fitting (unweighted and
//! propensity-score weighted), robust and leverage-corrected sandwich
//! variances, g-computation standardization with its delta-method variance,
//! and a seeded simulation harness for evaluating the estimators.

pub mod data;
pub mod effects;
pub mod gee;
pub mod linalg;
pub mod metrics;
pub mod propensity;
pub mod simgen;
pub mod simulation;
pub mod variance;

pub use data::{Cluster, ClusterDataset, CovariateSpec, DataError};
pub use effects::{EffectError, EffectEstimate, Method};
pub use gee::{closed_form_crude, fit_gee, GeeError, GeeFit};
pub use metrics::{aggregate, MethodMetrics};
pub use propensity::{WeightKind, WeightScheme};
pub use simgen::{compute_true_delta, generate_dataset, latent_sd, SimConfig, TruthSpec};
pub use simulation::{run_simulation, SimulationRun};
pub use variance::{PerEstimator, SandwichFamily, VarianceEstimator};
