//! Robust sandwich covariance and its Mancl–DeRouen (MD) and
//! Kauermann–Carroll (KC) leverage corrections, for weighted or unweighted
//! independence-GEE fits:
//!
//! ```text
//! Cov(β̂) = Ω̂ { Σ_i D_i' V_i⁻¹ W_i A_i r_i r_i' A_i' W_i V_i⁻¹ D_i } Ω̂
//! ```
//!
//! with `A_i = I` (robust), `(I − H_i)⁻¹` (MD) or `(I − H_i)^{-1/2}` (KC).
//! The delta-method variance of a scalar functional with gradient `M` is
//! `M' Cov(β̂) M`.
//!
//! The FG correction is not provided; KC is equivalent to a modified FG
//! estimator, with or without weights.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gee::{ClusterIngredients, GeeFit};
use crate::linalg::{self, SqrtFailure};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VarianceError {
    #[error("I - H is singular for cluster {cluster}")]
    SingularLeverage { cluster: usize },
    #[error("no principal inverse square root of I - H for cluster {cluster} ({reason:?})")]
    SquareRootFailure { cluster: usize, reason: SqrtFailure },
    #[error("gradient has length {got}, expected {expected}")]
    GradientLength { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceEstimator {
    Robust,
    Md,
    Kc,
}

impl VarianceEstimator {
    pub const ALL: [VarianceEstimator; 3] = [Self::Robust, Self::Md, Self::Kc];

    pub fn name(self) -> &'static str {
        match self {
            Self::Robust => "robust",
            Self::Md => "md",
            Self::Kc => "kc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.name() == s)
    }
}

impl fmt::Display for VarianceEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One value per variance estimator.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PerEstimator<T> {
    pub robust: T,
    pub md: T,
    pub kc: T,
}

impl<T> PerEstimator<T> {
    pub fn get(&self, e: VarianceEstimator) -> &T {
        match e {
            VarianceEstimator::Robust => &self.robust,
            VarianceEstimator::Md => &self.md,
            VarianceEstimator::Kc => &self.kc,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> PerEstimator<U> {
        PerEstimator {
            robust: f(&self.robust),
            md: f(&self.md),
            kc: f(&self.kc),
        }
    }

    pub fn from_fn(mut f: impl FnMut(VarianceEstimator) -> T) -> Self {
        PerEstimator {
            robust: f(VarianceEstimator::Robust),
            md: f(VarianceEstimator::Md),
            kc: f(VarianceEstimator::Kc),
        }
    }
}

/// Robust, MD and KC covariance matrices of `β̂`.
pub type SandwichFamily = PerEstimator<DMatrix<f64>>;

/// `Ω̂ (Σ u_i u_i') Ω̂` with `u_i = D_i' V_i⁻¹ W_i a_i`, where `a_i` is the
/// (possibly leverage-adjusted) residual vector of cluster `i`.
fn assemble<F>(fit: &GeeFit, mut adjust: F) -> Result<DMatrix<f64>, VarianceError>
where
    F: FnMut(usize, &ClusterIngredients) -> Result<DVector<f64>, VarianceError>,
{
    let q = fit.n_params();
    let mut scores = Vec::with_capacity(fit.per_cluster.len());
    for (i, c) in fit.per_cluster.iter().enumerate() {
        let a = adjust(i, c)?;
        let v = c.precision_weights().component_mul(&a);
        scores.push(c.derivative.tr_mul(&v));
    }
    let meat = linalg::outer_sum(q, &scores);
    let raw = &fit.omega * meat * &fit.omega;
    debug_assert!(linalg::asymmetry(&raw) <= 1e-10 * raw.amax().max(f64::MIN_POSITIVE));
    Ok(linalg::symmetrize(&raw))
}

pub fn sandwich_robust(fit: &GeeFit) -> DMatrix<f64> {
    assemble(fit, |_, c| Ok(c.residuals.clone())).expect("robust sandwich is infallible")
}

/// `(I − H_i)⁻¹ r_i` by LU with partial pivoting.
fn md_residual(cluster: usize, c: &ClusterIngredients) -> Result<DVector<f64>, VarianceError> {
    let m = c.size();
    let a = DMatrix::identity(m, m) - c.leverage.dense();
    let lu = a.lu();
    let piv = lu.u().diagonal().map(f64::abs);
    if piv.min() <= 1e-13 * piv.max() {
        return Err(VarianceError::SingularLeverage { cluster });
    }
    lu.solve(&c.residuals)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or(VarianceError::SingularLeverage { cluster })
}

/// `(I − H_i)^{-1/2} r_i` through the rank-`q` structure `H_i = L R`:
///
/// ```text
/// (I − L R)^{-1/2} = I + L (S + I − K)⁻¹ R,   K = R L,  S = (I − K)^{1/2}
/// ```
///
/// which follows from `(L R)^k = L K^{k-1} R` applied to the power series of
/// `x ↦ (1 − x)^{-1/2}`. Only a `q × q` principal square root is needed.
fn kc_residual(cluster: usize, c: &ClusterIngredients) -> Result<DVector<f64>, VarianceError> {
    let lev = &c.leverage;
    let q = lev.left().ncols();
    let k = lev.core();
    let i_minus_k = DMatrix::identity(q, q) - &k;
    let s =
        linalg::principal_sqrt(&i_minus_k).map_err(|reason| VarianceError::SquareRootFailure { cluster, reason })?;
    let middle = (s + i_minus_k).try_inverse().ok_or(VarianceError::SquareRootFailure {
        cluster,
        reason: SqrtFailure::NoConvergence,
    })?;
    let projected = lev.right() * &c.residuals;
    let out = &c.residuals + lev.left() * (middle * projected);
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(VarianceError::SquareRootFailure {
            cluster,
            reason: SqrtFailure::NoConvergence,
        })
    }
}

pub fn sandwich_md(fit: &GeeFit) -> Result<DMatrix<f64>, VarianceError> {
    assemble(fit, md_residual)
}

pub fn sandwich_kc(fit: &GeeFit) -> Result<DMatrix<f64>, VarianceError> {
    assemble(fit, kc_residual)
}

pub fn sandwich_family(fit: &GeeFit) -> Result<SandwichFamily, VarianceError> {
    Ok(SandwichFamily {
        robust: sandwich_robust(fit),
        md: sandwich_md(fit)?,
        kc: sandwich_kc(fit)?,
    })
}

/// `M' C M` for each member of the family, clamped at zero against rounding.
pub fn delta_method_variance(
    gradient: &DVector<f64>,
    family: &SandwichFamily,
) -> Result<PerEstimator<f64>, VarianceError> {
    let q = family.robust.nrows();
    if gradient.len() != q {
        return Err(VarianceError::GradientLength {
            expected: q,
            got: gradient.len(),
        });
    }
    Ok(family.map(|c| gradient.dot(&(c * gradient)).max(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Cluster, ClusterDataset, CovariateSpec};
    use crate::gee::{fit_gee, Leverage};

    fn toy(n_per_arm: usize) -> ClusterDataset {
        let mut clusters = Vec::new();
        for k in 0..2 * n_per_arm {
            let z = (k % 2) as u8;
            let y: Vec<u8> = (0..4).map(|j| ((j + k) % 3 == 0) as u8).collect();
            let x = DMatrix::from_fn(4, 1, |i, _| ((i * 7 + k * 3) % 5) as f64 * 0.4 - 0.8);
            clusters.push(Cluster::new(format!("c{k}"), z, y, x).unwrap());
        }
        ClusterDataset::new(clusters, vec!["x".into()]).unwrap()
    }

    #[test]
    fn zero_leverage_collapses_to_robust() {
        let ds = toy(3);
        let mut fit = fit_gee(&ds, &CovariateSpec::AllMainEffects, None).unwrap();
        for c in &mut fit.per_cluster {
            c.leverage = Leverage::zero(c.size(), 3);
        }
        let fam = sandwich_family(&fit).unwrap();
        assert_eq!(fam.md, fam.robust);
        assert_eq!(fam.kc, fam.robust);
    }

    #[test]
    fn uniform_weights_cancel() {
        let ds = toy(3);
        let plain = fit_gee(&ds, &CovariateSpec::Crude, None).unwrap();
        let w = vec![3.7; ds.n_subjects()];
        let weighted = fit_gee(&ds, &CovariateSpec::Crude, Some(&w)).unwrap();
        let a = sandwich_family(&plain).unwrap();
        let b = sandwich_family(&weighted).unwrap();
        for e in VarianceEstimator::ALL {
            let (x, y) = (a.get(e), b.get(e));
            assert!((x - y).amax() <= 1e-10 * x.amax(), "{e}");
        }
    }

    #[test]
    fn duplicated_clusters_scale_robust_by_inverse_k() {
        let ds = toy(2);
        let base = sandwich_robust(&fit_gee(&ds, &CovariateSpec::AllMainEffects, None).unwrap());
        for k in [2usize, 3] {
            let clusters: Vec<Cluster> = (0..k).flat_map(|_| ds.clusters().iter().cloned()).collect();
            let big = ClusterDataset::new(clusters, ds.covariate_names().to_vec()).unwrap();
            let v = sandwich_robust(&fit_gee(&big, &CovariateSpec::AllMainEffects, None).unwrap());
            let scaled = &base / k as f64;
            assert!((&v - &scaled).amax() <= 1e-9 * scaled.amax(), "k = {k}");
        }
    }

    #[test]
    fn delta_method_extracts_coordinates() {
        let ds = toy(3);
        let fit = fit_gee(&ds, &CovariateSpec::AllMainEffects, None).unwrap();
        let fam = sandwich_family(&fit).unwrap();
        let m = DVector::from_column_slice(&[0.0, 0.0, 1.0]);
        let v = delta_method_variance(&m, &fam).unwrap();
        for e in VarianceEstimator::ALL {
            assert_eq!(*v.get(e), fam.get(e)[(2, 2)]);
        }
        let zero = delta_method_variance(&DVector::zeros(3), &fam).unwrap();
        assert_eq!(zero, PerEstimator::default());
        assert!(delta_method_variance(&DVector::zeros(2), &fam).is_err());
    }

    #[test]
    fn family_is_symmetric_with_nonnegative_diagonal() {
        let ds = toy(3);
        let w: Vec<f64> = (0..ds.n_subjects()).map(|i| 1.0 + (i % 4) as f64).collect();
        let fit = fit_gee(&ds, &CovariateSpec::AllMainEffects, Some(&w)).unwrap();
        let fam = sandwich_family(&fit).unwrap();
        for e in VarianceEstimator::ALL {
            let c = fam.get(e);
            assert!(linalg::asymmetry(c) <= 1e-10 * c.amax());
            assert!(c.diagonal().iter().all(|&d| d >= 0.0));
        }
    }

    #[test]
    fn estimator_names_round_trip() {
        for e in VarianceEstimator::ALL {
            assert_eq!(VarianceEstimator::parse(e.name()), Some(e));
        }
        assert_eq!(VarianceEstimator::parse("fg"), None);
    }
}
