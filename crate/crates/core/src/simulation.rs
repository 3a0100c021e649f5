//! Replication loop: generate each dataset, apply every requested method and
//! collect the results in replication order.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::data::CovariateSpec;
use crate::effects::{EffectEstimate, Method};
use crate::metrics::{self, MethodMetrics, MethodReplications, MetricsError};
use crate::simgen::{self, SimConfig, SimError, TruthSpec};

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error(transparent)]
    Config(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("could not start worker pool: {0}")]
    Pool(String),
}

/// How a single method fared on a single replication.
#[derive(Debug, Clone, PartialEq)]
pub enum RepOutcome {
    Estimate(EffectEstimate),
    NonConverged,
    /// Any other numerical failure (singular leverage, degenerate predictions).
    Failed(String),
}

impl RepOutcome {
    pub fn estimate(&self) -> Option<&EffectEstimate> {
        match self {
            RepOutcome::Estimate(e) => Some(e),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct FailureCounts {
    pub non_converged: usize,
    pub other: usize,
}

#[derive(Debug, Clone)]
pub struct SimulationRun {
    pub methods: Vec<Method>,
    /// `outcomes[r][k]` is method `methods[k]` on replication `r`.
    pub outcomes: Vec<Vec<RepOutcome>>,
}

impl SimulationRun {
    pub fn replications(&self, k: usize) -> MethodReplications {
        MethodReplications {
            method: self.methods[k].name().to_string(),
            estimates: self.outcomes.iter().map(|row| row[k].estimate().cloned()).collect(),
        }
    }

    pub fn failures(&self, k: usize) -> FailureCounts {
        let mut f = FailureCounts::default();
        for row in &self.outcomes {
            match row[k] {
                RepOutcome::NonConverged => f.non_converged += 1,
                RepOutcome::Failed(_) => f.other += 1,
                RepOutcome::Estimate(_) => {}
            }
        }
        f
    }

    pub fn metrics(&self, truth: &TruthSpec) -> Result<Vec<MethodMetrics>, MetricsError> {
        let reps: Vec<_> = (0..self.methods.len()).map(|k| self.replications(k)).collect();
        metrics::aggregate(&reps, truth.delta)
    }
}

/// Crude is always run because it anchors relative efficiency; the order of
/// the other methods is kept and duplicates dropped.
pub fn normalize_methods(methods: &[Method]) -> Vec<Method> {
    let mut out = vec![Method::Crude];
    for &m in methods {
        if !out.contains(&m) {
            out.push(m);
        }
    }
    out
}

pub fn run_replication(cfg: &SimConfig, rep: u64, methods: &[Method]) -> Result<Vec<RepOutcome>, SimError> {
    let ds = simgen::generate_dataset(cfg, rep)?;
    let spec = CovariateSpec::AllMainEffects;
    Ok(methods
        .iter()
        .map(|m| match m.estimate(&ds, &spec) {
            Ok(e) => RepOutcome::Estimate(e),
            Err(e) if e.is_non_convergence() => RepOutcome::NonConverged,
            Err(e) => RepOutcome::Failed(e.to_string()),
        })
        .collect())
}

/// Runs `f` on a dedicated pool of `workers` threads.
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R, SimulationError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| SimulationError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

/// Runs `cfg.n_reps` replications on a pool of `workers` threads. Results do
/// not depend on `workers`.
pub fn run_simulation(cfg: &SimConfig, methods: &[Method], workers: usize) -> Result<SimulationRun, SimulationError> {
    cfg.validate()?;
    let methods = normalize_methods(methods);
    let outcomes = with_workers(workers, || {
        (0..cfg.n_reps as u64)
            .into_par_iter()
            .map(|r| run_replication(cfg, r, &methods))
            .collect::<Result<Vec<_>, _>>()
    })??;
    Ok(SimulationRun { methods, outcomes })
}

/// The truth oracle on a pool of `workers` threads.
pub fn truth_with_workers(cfg: &SimConfig, oracle_seed: u64, workers: usize) -> Result<TruthSpec, SimulationError> {
    Ok(with_workers(workers, || simgen::compute_true_delta(cfg, oracle_seed))??)
}
