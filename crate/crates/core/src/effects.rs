//! Participant-average log odds ratio estimators.
//!
//! * crude: treatment coefficient of the intercept + treatment model;
//! * weighted: the same model fitted with IPW or OW weights;
//! * multivariable: g-computation over a main-effects fit, with the
//!   delta-method gradient of the standardized log odds ratio.
//!
//! Intervals are Wald intervals on the log scale with `z = 1.959964`.
//! Propensity-estimation uncertainty is not propagated into the SEs.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ClusterDataset, CovariateSpec, DataError};
use crate::gee::{expit, fit_gee, GeeError, GeeFit};
use crate::propensity::{PropensityError, WeightKind, WeightScheme};
use crate::variance::{delta_method_variance, sandwich_family, PerEstimator, VarianceError};

pub const Z_95: f64 = 1.959964;

#[derive(Debug, Error)]
pub enum EffectError {
    #[error(transparent)]
    Gee(#[from] GeeError),
    #[error(transparent)]
    Propensity(#[from] PropensityError),
    #[error(transparent)]
    Variance(#[from] VarianceError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("standardization sums must be positive (treated {p1_sum}, control {p0_sum}, subjects {n})")]
    DegeneratePrediction { p1_sum: f64, p0_sum: f64, n: f64 },
    #[error("weighted estimation needs an IPW or OW scheme")]
    UnweightedScheme,
}

impl EffectError {
    /// True for failures of model fitting (separation, divergence), as
    /// opposed to input or numerical errors.
    pub fn is_non_convergence(&self) -> bool {
        match self {
            EffectError::Gee(e) => e.is_non_convergence(),
            EffectError::Propensity(PropensityError::NonConvergence { .. }) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn wald(center: f64, se: f64) -> Self {
        Self {
            lower: center - Z_95 * se,
            upper: center + Z_95 * se,
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn exp(&self) -> Self {
        Self {
            lower: self.lower.exp(),
            upper: self.upper.exp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub method: String,
    pub log_or: f64,
    pub se: PerEstimator<f64>,
    pub ci: PerEstimator<Interval>,
    pub converged: bool,
}

impl EffectEstimate {
    pub fn from_variances(method: impl Into<String>, log_or: f64, var: PerEstimator<f64>) -> Self {
        let se = var.map(|v| v.sqrt());
        let ci = se.map(|&s| Interval::wald(log_or, s));
        Self {
            method: method.into(),
            log_or,
            se,
            ci,
            converged: true,
        }
    }

    pub fn odds_ratio(&self) -> f64 {
        self.log_or.exp()
    }
}

fn treatment_variances(fit: &GeeFit) -> Result<PerEstimator<f64>, EffectError> {
    let fam = sandwich_family(fit)?;
    let t = fit.n_params() - 1;
    Ok(fam.map(|c| c[(t, t)]))
}

pub fn estimate_crude(ds: &ClusterDataset) -> Result<EffectEstimate, EffectError> {
    let fit = fit_gee(ds, &CovariateSpec::Crude, None)?;
    Ok(EffectEstimate::from_variances(
        "crude",
        fit.treatment_coef(),
        treatment_variances(&fit)?,
    ))
}

pub fn estimate_weighted(ds: &ClusterDataset, scheme: &WeightScheme) -> Result<EffectEstimate, EffectError> {
    if scheme.kind == WeightKind::None {
        return Err(EffectError::UnweightedScheme);
    }
    let weights = scheme.weights(ds)?;
    let label = scheme.label();
    let fit = fit_gee(ds, &CovariateSpec::Crude, Some(&weights))?.with_weighting(label.clone());
    Ok(EffectEstimate::from_variances(
        label,
        fit.treatment_coef(),
        treatment_variances(&fit)?,
    ))
}

/// Sums of counterfactual risks and their β-gradients.
struct Standardization {
    p1_sum: f64,
    p0_sum: f64,
    n: f64,
    /// `Σ P̂₁(1 − P̂₁) X₁`
    d1: DVector<f64>,
    /// `Σ P̂₀(1 − P̂₀) X₀`
    d0: DVector<f64>,
}

impl Standardization {
    fn compute(designs: &[DMatrix<f64>], beta: &DVector<f64>) -> Result<Self, EffectError> {
        let q = beta.len();
        let mut s = Standardization {
            p1_sum: 0.0,
            p0_sum: 0.0,
            n: 0.0,
            d1: DVector::zeros(q),
            d0: DVector::zeros(q),
        };
        for x in designs {
            for i in 0..x.nrows() {
                let mut row = x.row(i).transpose();
                for (arm, z) in [(1, 1.0), (0, 0.0)] {
                    row[q - 1] = z;
                    let p = expit(row.dot(beta));
                    let (sum, grad) = if arm == 1 {
                        (&mut s.p1_sum, &mut s.d1)
                    } else {
                        (&mut s.p0_sum, &mut s.d0)
                    };
                    *sum += p;
                    grad.axpy(p * (1.0 - p), &row, 1.0);
                }
                s.n += 1.0;
            }
        }
        let ok = |v: f64| v > 0.0;
        if !(ok(s.p1_sum) && ok(s.p0_sum) && ok(s.n - s.p1_sum) && ok(s.n - s.p0_sum)) {
            return Err(EffectError::DegeneratePrediction {
                p1_sum: s.p1_sum,
                p0_sum: s.p0_sum,
                n: s.n,
            });
        }
        Ok(s)
    }

    fn log_or(&self) -> f64 {
        (self.p1_sum.ln() + (self.n - self.p0_sum).ln()) - (self.p0_sum.ln() + (self.n - self.p1_sum).ln())
    }

    fn gradient(&self) -> DVector<f64> {
        let c1 = 1.0 / self.p1_sum + 1.0 / (self.n - self.p1_sum);
        let c0 = 1.0 / self.p0_sum + 1.0 / (self.n - self.p0_sum);
        &self.d1 * c1 - &self.d0 * c0
    }
}

/// g-computation log odds ratio from a fit over `ds`: counterfactual risks
/// with the treatment column set to 1 and to 0 for every subject, pooled
/// over all subjects.
pub fn standardized_log_or(fit: &GeeFit, ds: &ClusterDataset) -> Result<f64, EffectError> {
    let designs = ds.design_matrices(&fit.spec)?;
    Ok(Standardization::compute(&designs, &fit.beta)?.log_or())
}

/// Gradient `M = ∂ standardized_log_or / ∂β` at the fitted coefficients.
pub fn m_gradient(fit: &GeeFit, ds: &ClusterDataset) -> Result<DVector<f64>, EffectError> {
    let designs = ds.design_matrices(&fit.spec)?;
    Ok(Standardization::compute(&designs, &fit.beta)?.gradient())
}

pub fn estimate_multivariable(ds: &ClusterDataset, spec: &CovariateSpec) -> Result<EffectEstimate, EffectError> {
    let fit = fit_gee(ds, spec, None)?;
    let designs = ds.design_matrices(spec)?;
    let st = Standardization::compute(&designs, &fit.beta)?;
    let fam = sandwich_family(&fit)?;
    let var = delta_method_variance(&st.gradient(), &fam)?;
    let method = if spec.is_crude() { "crude" } else { "multi" };
    Ok(EffectEstimate::from_variances(method, st.log_or(), var))
}

/// The analysis methods available to the simulation harness and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Crude,
    Multi,
    IpwLogit,
    OwLogit,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Crude, Method::Multi, Method::IpwLogit, Method::OwLogit];

    pub fn name(self) -> &'static str {
        match self {
            Method::Crude => "crude",
            Method::Multi => "multi",
            Method::IpwLogit => "ipw_logit",
            Method::OwLogit => "ow_logit",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// The weighting used, if any.
    pub fn weight_kind(self) -> Option<WeightKind> {
        match self {
            Method::IpwLogit => Some(WeightKind::Ipw),
            Method::OwLogit => Some(WeightKind::Ow),
            _ => None,
        }
    }

    /// Multivariable fits use `multi_spec`; every other method ignores it.
    pub fn estimate(self, ds: &ClusterDataset, multi_spec: &CovariateSpec) -> Result<EffectEstimate, EffectError> {
        match self {
            Method::Crude => estimate_crude(ds),
            Method::Multi => {
                let mut est = estimate_multivariable(ds, multi_spec)?;
                est.method = self.name().to_string();
                Ok(est)
            }
            Method::IpwLogit | Method::OwLogit => {
                let kind = self.weight_kind().expect("weighted method");
                estimate_weighted(ds, &WeightScheme::logistic(kind))
            }
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Cluster;

    fn toy() -> ClusterDataset {
        let rows: [(u8, &[u8], &[f64]); 4] = [
            (1, &[1, 0, 0, 0, 1], &[0.3, -1.2, 0.5, 0.0, 1.1]),
            (1, &[0, 0, 1, 0], &[-0.4, 0.8, 1.6, -0.9]),
            (0, &[1, 1, 0, 0, 0], &[0.9, 1.4, -0.2, -1.0, 0.1]),
            (0, &[0, 1, 0, 1], &[-0.6, 0.7, 0.2, 1.3]),
        ];
        let clusters = rows
            .iter()
            .enumerate()
            .map(|(k, (z, y, x))| {
                Cluster::new(
                    format!("k{k}"),
                    *z,
                    y.to_vec(),
                    DMatrix::from_column_slice(x.len(), 1, x),
                )
                .unwrap()
            })
            .collect();
        ClusterDataset::new(clusters, vec!["x".into()]).unwrap()
    }

    #[test]
    fn ci_reconstruction() {
        let est = estimate_crude(&toy()).unwrap();
        for (se, ci) in [
            (est.se.robust, est.ci.robust),
            (est.se.md, est.ci.md),
            (est.se.kc, est.ci.kc),
        ] {
            assert!((ci.lower - (est.log_or - Z_95 * se)).abs() < 1e-15);
            assert!((ci.upper - (est.log_or + Z_95 * se)).abs() < 1e-15);
        }
    }

    #[test]
    fn crude_standardization_collapses() {
        let ds = toy();
        let fit = fit_gee(&ds, &CovariateSpec::Crude, None).unwrap();
        let lor = standardized_log_or(&fit, &ds).unwrap();
        assert!((lor - fit.treatment_coef()).abs() < 1e-12);
        let m = m_gradient(&fit, &ds).unwrap();
        assert!(m[0].abs() < 1e-12 && (m[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_treatment_coefficient_gives_zero() {
        let ds = toy();
        let mut fit = fit_gee(&ds, &CovariateSpec::AllMainEffects, None).unwrap();
        fit.beta[2] = 0.0;
        assert!(standardized_log_or(&fit, &ds).unwrap().abs() < 1e-14);
    }

    #[test]
    fn multivariable_with_crude_spec_equals_crude() {
        let ds = toy();
        let a = estimate_crude(&ds).unwrap();
        let b = estimate_multivariable(&ds, &CovariateSpec::Crude).unwrap();
        assert!((a.log_or - b.log_or).abs() < 1e-10);
        for (x, y) in [(a.se.robust, b.se.robust), (a.se.md, b.se.md), (a.se.kc, b.se.kc)] {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_external_scores_reproduce_crude() {
        let ds = toy();
        let crude = estimate_crude(&ds).unwrap();
        let n = ds.n_subjects();
        let ipw = estimate_weighted(&ds, &WeightScheme::external(WeightKind::Ipw, vec![0.5; n]).unwrap()).unwrap();
        let ow = estimate_weighted(&ds, &WeightScheme::external(WeightKind::Ow, vec![0.5; n]).unwrap()).unwrap();
        assert!((ipw.log_or - crude.log_or).abs() < 1e-10);
        assert!((ow.log_or - ipw.log_or).abs() < 1e-10);
        assert_eq!(ipw.method, "ipw_external");
    }

    #[test]
    fn method_names() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()), Some(m));
        }
        assert_eq!(Method::parse("ipw_bart"), None);
    }

    #[test]
    fn unweighted_scheme_rejected() {
        let ds = toy();
        assert!(matches!(
            estimate_weighted(&ds, &WeightScheme::logistic(WeightKind::None)),
            Err(EffectError::UnweightedScheme)
        ));
    }
}
