//! Subject-level propensity scores, IPW/OW weights and covariate balance.
//!
//! Under cluster randomization the true propensity is a design constant; the
//! scores estimated here only absorb chance covariate imbalance. The
//! treatment model is an ordinary logistic regression of `Z_i` on an
//! intercept plus every covariate main effect, ignoring clustering.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ClusterDataset;
use crate::gee::{expit, IterationTrace, LogisticProblem, NewtonFailure, NonConvergence, SolverOptions};

#[derive(Debug, Error)]
pub enum PropensityError {
    #[error("propensity model did not converge: {reason} ({trace})")]
    NonConvergence {
        reason: NonConvergence,
        trace: IterationTrace,
    },
    #[error("propensity model information matrix is singular ({trace})")]
    SingularInformation { trace: IterationTrace },
    #[error("only one treatment arm present")]
    SingleArm,
    #[error("score {score} at subject {index} is outside (0, 1)")]
    ScoreOutOfRange { index: usize, score: f64 },
    #[error("{got} values supplied for {expected} subjects")]
    LengthMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropensityFit {
    /// Intercept first, then one coefficient per covariate.
    pub gamma: DVector<f64>,
    /// `e(X_ij)` per subject, in cluster order.
    pub scores: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    None,
    Ipw,
    Ow,
}

impl fmt::Display for WeightKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightKind::None => "none",
            WeightKind::Ipw => "ipw",
            WeightKind::Ow => "ow",
        })
    }
}

/// Where propensity scores come from.
#[derive(Debug, Clone, PartialEq)]
pub enum PropensitySource {
    Logistic,
    /// Scores supplied by the caller, one per subject in cluster order.
    External(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightScheme {
    pub kind: WeightKind,
    pub source: PropensitySource,
}

impl WeightScheme {
    pub fn logistic(kind: WeightKind) -> Self {
        Self {
            kind,
            source: PropensitySource::Logistic,
        }
    }

    pub fn external(kind: WeightKind, scores: Vec<f64>) -> Result<Self, PropensityError> {
        check_scores(&scores)?;
        Ok(Self {
            kind,
            source: PropensitySource::External(scores),
        })
    }

    /// Short label such as `ipw_logit` or `ow_external`.
    pub fn label(&self) -> String {
        let src = match self.source {
            PropensitySource::Logistic => "logit",
            PropensitySource::External(_) => "external",
        };
        format!("{}_{src}", self.kind)
    }

    /// Per-subject propensity scores for `ds`.
    pub fn scores(&self, ds: &ClusterDataset) -> Result<Vec<f64>, PropensityError> {
        match &self.source {
            PropensitySource::Logistic => Ok(estimate_propensity_logistic(ds)?.scores),
            PropensitySource::External(s) => {
                if s.len() != ds.n_subjects() {
                    return Err(PropensityError::LengthMismatch {
                        expected: ds.n_subjects(),
                        got: s.len(),
                    });
                }
                Ok(s.clone())
            }
        }
    }

    /// Per-subject weights for `ds`; all ones for [`WeightKind::None`].
    pub fn weights(&self, ds: &ClusterDataset) -> Result<Vec<f64>, PropensityError> {
        if self.kind == WeightKind::None {
            return Ok(vec![1.0; ds.n_subjects()]);
        }
        let scores = self.scores(ds)?;
        compute_weights(&scores, &ds.subject_treatments(), self.kind)
    }
}

fn check_scores(scores: &[f64]) -> Result<(), PropensityError> {
    match scores.iter().enumerate().find(|(_, &e)| !(e > 0.0 && e < 1.0)) {
        Some((index, &score)) => Err(PropensityError::ScoreOutOfRange { index, score }),
        None => Ok(()),
    }
}

/// Design `[1, X_ij]` stacked over all subjects.
fn propensity_design(ds: &ClusterDataset) -> DMatrix<f64> {
    let p = ds.n_covariates();
    let mut x = DMatrix::zeros(ds.n_subjects(), p + 1);
    let mut row = 0;
    for c in ds.clusters() {
        for i in 0..c.size() {
            x[(row, 0)] = 1.0;
            for j in 0..p {
                x[(row, j + 1)] = c.covariates()[(i, j)];
            }
            row += 1;
        }
    }
    x
}

pub fn estimate_propensity_logistic(ds: &ClusterDataset) -> Result<PropensityFit, PropensityError> {
    let z = ds.subject_treatments();
    if z.iter().all(|&t| t == z[0]) {
        return Err(PropensityError::SingleArm);
    }
    let x = propensity_design(ds);
    let designs = [x];
    let responses = [DVector::from_iterator(z.len(), z.iter().map(|&t| t as f64))];
    let weights = [DVector::from_element(z.len(), 1.0)];
    let sol = LogisticProblem {
        designs: &designs,
        responses: &responses,
        weights: &weights,
    }
    .solve(&SolverOptions::default());
    match sol.outcome {
        Ok(()) => {
            let scores = (&designs[0] * &sol.beta).iter().map(|&e| expit(e)).collect();
            Ok(PropensityFit {
                gamma: sol.beta,
                scores,
                converged: true,
            })
        }
        Err(NewtonFailure::NonConvergence(reason)) => Err(PropensityError::NonConvergence {
            reason,
            trace: sol.trace,
        }),
        Err(NewtonFailure::SingularInformation) => Err(PropensityError::SingularInformation { trace: sol.trace }),
    }
}

/// IPW: `1/e` treated, `1/(1−e)` control. OW: `1−e` treated, `e` control.
pub fn compute_weights(scores: &[f64], treatment: &[u8], kind: WeightKind) -> Result<Vec<f64>, PropensityError> {
    if scores.len() != treatment.len() {
        return Err(PropensityError::LengthMismatch {
            expected: treatment.len(),
            got: scores.len(),
        });
    }
    check_scores(scores)?;
    Ok(scores
        .iter()
        .zip(treatment)
        .map(|(&e, &z)| match (kind, z == 1) {
            (WeightKind::None, _) => 1.0,
            (WeightKind::Ipw, true) => 1.0 / e,
            (WeightKind::Ipw, false) => 1.0 / (1.0 - e),
            (WeightKind::Ow, true) => 1.0 - e,
            (WeightKind::Ow, false) => e,
        })
        .collect())
}

/// Mean and unbiased (reliability-weighted) variance.
fn weighted_moments(xs: &[f64], ws: &[f64]) -> (f64, f64) {
    let sw: f64 = ws.iter().sum();
    let sw2: f64 = ws.iter().map(|w| w * w).sum();
    let mean = xs.iter().zip(ws).map(|(x, w)| w * x).sum::<f64>() / sw;
    let ss: f64 = xs.iter().zip(ws).map(|(x, w)| w * (x - mean).powi(2)).sum();
    let denom = sw - sw2 / sw;
    let var = if denom > 0.0 { ss / denom } else { 0.0 };
    (mean, var)
}

/// Absolute standardized difference per covariate,
/// `|x̄_t − x̄_c| / sqrt((s²_t + s²_c)/2)`.
///
/// Means and variances are weighted when `weights` is given; with unit
/// weights the variances reduce to the usual `n − 1` sample variances. A zero
/// pooled variance yields `0` if the means agree and `+∞` otherwise.
pub fn absolute_standardized_difference(
    ds: &ClusterDataset,
    weights: Option<&[f64]>,
) -> Result<Vec<f64>, PropensityError> {
    let n = ds.n_subjects();
    let ones;
    let w = match weights {
        Some(w) => {
            if w.len() != n {
                return Err(PropensityError::LengthMismatch {
                    expected: n,
                    got: w.len(),
                });
            }
            w
        }
        None => {
            ones = vec![1.0; n];
            &ones
        }
    };
    let z = ds.subject_treatments();
    let x = propensity_design(ds);
    let mut out = Vec::with_capacity(ds.n_covariates());
    for j in 1..x.ncols() {
        let mut arms: [(Vec<f64>, Vec<f64>); 2] = Default::default();
        for i in 0..n {
            let a = &mut arms[z[i] as usize];
            a.0.push(x[(i, j)]);
            a.1.push(w[i]);
        }
        let (m0, v0) = weighted_moments(&arms[0].0, &arms[0].1);
        let (m1, v1) = weighted_moments(&arms[1].0, &arms[1].1);
        let diff = (m1 - m0).abs();
        let pooled = ((v1 + v0) / 2.0).sqrt();
        out.push(if pooled > 0.0 {
            diff / pooled
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        });
    }
    Ok(out)
}
