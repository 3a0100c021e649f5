//! Performance measures over simulation replications: bias, empirical
//! variance, relative efficiency against the crude estimator, CI coverage
//! for each variance estimator and the non-convergence proportion.
//!
//! Each method is summarized over its own converged replications. A quantity
//! that cannot be computed (no converged replications, a variance from a
//! single value) is `None` rather than a placeholder number.

use serde::Serialize;
use thiserror::Error;

use crate::effects::EffectEstimate;
use crate::variance::PerEstimator;

/// Coverage inside this band counts as nominal for a 95% interval.
pub const NOMINAL_BAND: (f64, f64) = (0.936, 0.964);

pub fn is_nominal(coverage: f64) -> bool {
    (NOMINAL_BAND.0..=NOMINAL_BAND.1).contains(&coverage)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("the crude method is required as the efficiency reference")]
    MissingCrude,
    #[error("method `{method}` has {got} replications, expected {expected}")]
    RaggedReplications {
        method: String,
        expected: usize,
        got: usize,
    },
    #[error("no replications")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodMetrics {
    pub method: String,
    pub n_reps: usize,
    pub n_converged: usize,
    pub mean_ate: Option<f64>,
    pub bias: Option<f64>,
    pub empirical_variance: Option<f64>,
    pub re_vs_crude: Option<f64>,
    pub coverage: PerEstimator<Option<f64>>,
    /// `sqrt(c(1−c)/n)`; undefined with fewer than two converged replications.
    pub mc_se_coverage: PerEstimator<Option<f64>>,
    pub non_convergence: f64,
}

/// Replication results for one method, indexed by replication.
#[derive(Debug, Clone)]
pub struct MethodReplications {
    pub method: String,
    pub estimates: Vec<Option<EffectEstimate>>,
}

fn sample_variance(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    Some(xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0))
}

fn summarize(reps: &MethodReplications, truth: f64) -> MethodMetrics {
    let n_reps = reps.estimates.len();
    let ok: Vec<&EffectEstimate> = reps
        .estimates
        .iter()
        .flatten()
        .filter(|e| e.converged && e.log_or.is_finite())
        .collect();
    let n = ok.len();
    let log_ors: Vec<f64> = ok.iter().map(|e| e.log_or).collect();
    let mean_ate = (n > 0).then(|| log_ors.iter().sum::<f64>() / n as f64);
    let coverage = PerEstimator::from_fn(|v| {
        (n > 0).then(|| ok.iter().filter(|e| e.ci.get(v).contains(truth)).count() as f64 / n as f64)
    });
    let mc_se_coverage = coverage.map(|c| match c {
        Some(c) if n >= 2 => Some((c * (1.0 - c) / n as f64).sqrt()),
        _ => None,
    });
    MethodMetrics {
        method: reps.method.clone(),
        n_reps,
        n_converged: n,
        mean_ate,
        bias: mean_ate.map(|m| m - truth),
        empirical_variance: sample_variance(&log_ors),
        re_vs_crude: None,
        coverage,
        mc_se_coverage,
        non_convergence: (n_reps - n) as f64 / n_reps as f64,
    }
}

/// Summarizes every method against the true log odds ratio. The method named
/// `crude` must be present and supplies the RE denominator.
pub fn aggregate(methods: &[MethodReplications], truth: f64) -> Result<Vec<MethodMetrics>, MetricsError> {
    let crude = methods
        .iter()
        .find(|m| m.method == "crude")
        .ok_or(MetricsError::MissingCrude)?;
    let expected = crude.estimates.len();
    if expected == 0 {
        return Err(MetricsError::Empty);
    }
    if let Some(bad) = methods.iter().find(|m| m.estimates.len() != expected) {
        return Err(MetricsError::RaggedReplications {
            method: bad.method.clone(),
            expected,
            got: bad.estimates.len(),
        });
    }
    let crude_var = summarize(crude, truth).empirical_variance;
    Ok(methods
        .iter()
        .map(|reps| {
            let mut m = summarize(reps, truth);
            m.re_vs_crude = if reps.method == "crude" {
                crude_var.map(|_| 1.0)
            } else {
                match (crude_var, m.empirical_variance) {
                    (Some(c), Some(v)) if v > 0.0 => Some(c / v),
                    _ => None,
                }
            };
            m
        })
        .collect())
}
