//! Logistic GEE under the independence working correlation, optionally
//! weighted, together with the per-cluster pieces the sandwich estimators
//! consume.
//!
//! With independence working correlation the estimating equation
//! `Σ_i D_i' V_i⁻¹ W_i (Y_i − μ_i) = 0` is the score of a weighted logistic
//! likelihood, so the root is found by Newton (Fisher scoring coincides with
//! Newton under the canonical link) with step-halving on that likelihood.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::data::{ClusterDataset, CovariateSpec, DataError};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NonConvergence {
    /// A fitted mean fell to `mu_floor` or below (or to `1 - mu_floor` or above).
    Separation,
    /// `‖β‖∞` exceeded the divergence bound.
    Diverged,
    MaxIterations,
}

impl fmt::Display for NonConvergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NonConvergence::Separation => "fitted probabilities reached 0 or 1 (separation)",
            NonConvergence::Diverged => "coefficients diverged",
            NonConvergence::MaxIterations => "iteration limit reached",
        })
    }
}

/// Summary of the Newton iterations, attached to failures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationTrace {
    pub iterations: usize,
    pub last_step: f64,
    pub last_score: f64,
    pub max_abs_beta: f64,
}

impl fmt::Display for IterationTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} iterations, last step {:.3e}, score {:.3e}, max |beta| {:.3}",
            self.iterations, self.last_step, self.last_score, self.max_abs_beta
        )
    }
}

#[derive(Debug, Error)]
pub enum GeeError {
    #[error("GEE did not converge: {reason} ({trace})")]
    NonConvergence {
        reason: NonConvergence,
        trace: IterationTrace,
        /// Last iterate with its ingredients, when they could be assembled.
        last_iterate: Option<Box<GeeFit>>,
    },
    #[error("information matrix is not positive definite ({trace})")]
    SingularInformation { trace: IterationTrace },
    #[error("weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl GeeError {
    pub fn is_non_convergence(&self) -> bool {
        matches!(self, GeeError::NonConvergence { .. })
    }
}

/// Newton solver controls. The defaults are the documented trip-wires that
/// make non-convergence counts reproducible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub step_tol: f64,
    pub score_tol: f64,
    pub max_abs_beta: f64,
    /// With the default of zero only fitted means that are exactly 0 or 1 in
    /// floating point trip this check.
    pub mu_floor: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            step_tol: 1e-8,
            score_tol: 1e-6,
            max_abs_beta: 30.0,
            mu_floor: 0.0,
        }
    }
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log(1 + exp(x))` without overflow.
fn log1pexp(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Weighted logistic problem split into blocks (clusters).
pub(crate) struct LogisticProblem<'a> {
    pub designs: &'a [DMatrix<f64>],
    pub responses: &'a [DVector<f64>],
    pub weights: &'a [DVector<f64>],
}

pub(crate) struct NewtonSolution {
    pub beta: DVector<f64>,
    pub trace: IterationTrace,
    pub outcome: Result<(), NewtonFailure>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum NewtonFailure {
    NonConvergence(NonConvergence),
    SingularInformation,
}

impl LogisticProblem<'_> {
    fn n_params(&self) -> usize {
        self.designs.first().map_or(0, |x| x.ncols())
    }

    fn log_likelihood(&self, beta: &DVector<f64>) -> f64 {
        let mut ll = 0.0;
        for ((x, y), w) in self.designs.iter().zip(self.responses).zip(self.weights) {
            let eta = x * beta;
            for i in 0..eta.len() {
                ll += w[i] * (y[i] * eta[i] - log1pexp(eta[i]));
            }
        }
        ll
    }

    /// Score and information at `beta`, plus the smallest distance of a
    /// fitted mean from {0, 1}.
    fn score_information(&self, beta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>, f64) {
        let q = self.n_params();
        let mut score = DVector::zeros(q);
        let mut info = DMatrix::zeros(q, q);
        let mut closest = f64::INFINITY;
        for ((x, y), w) in self.designs.iter().zip(self.responses).zip(self.weights) {
            let eta = x * beta;
            let mu = eta.map(expit);
            closest = mu.iter().fold(closest, |c, &m| c.min(m).min(1.0 - m));
            let resid = DVector::from_fn(mu.len(), |i, _| w[i] * (y[i] - mu[i]));
            score.gemv_tr(1.0, x, &resid, 1.0);
            let wx = DMatrix::from_fn(x.nrows(), q, |i, j| w[i] * mu[i] * (1.0 - mu[i]) * x[(i, j)]);
            info.gemm_tr(1.0, x, &wx, 1.0);
        }
        (score, linalg::symmetrize(&info), closest)
    }

    pub fn solve(&self, opts: &SolverOptions) -> NewtonSolution {
        let q = self.n_params();
        let mut beta = DVector::zeros(q);
        let mut trace = IterationTrace {
            iterations: 0,
            last_step: f64::INFINITY,
            last_score: f64::INFINITY,
            max_abs_beta: 0.0,
        };
        let fail = |beta: DVector<f64>, trace, f| NewtonSolution {
            beta,
            trace,
            outcome: Err(f),
        };
        let mut ll = self.log_likelihood(&beta);
        loop {
            let (score, info, closest) = self.score_information(&beta);
            trace.last_score = score.amax();
            if closest <= opts.mu_floor {
                return fail(beta, trace, NewtonFailure::NonConvergence(NonConvergence::Separation));
            }
            if trace.iterations > 0 && trace.last_step < opts.step_tol && trace.last_score < opts.score_tol {
                return NewtonSolution {
                    beta,
                    trace,
                    outcome: Ok(()),
                };
            }
            if trace.iterations >= opts.max_iterations {
                return fail(
                    beta,
                    trace,
                    NewtonFailure::NonConvergence(NonConvergence::MaxIterations),
                );
            }
            let Some(chol) = info.cholesky() else {
                return fail(beta, trace, NewtonFailure::SingularInformation);
            };
            let mut step = chol.solve(&score);
            let mut candidate = &beta + &step;
            let mut ll_new = self.log_likelihood(&candidate);
            let mut halvings = 0;
            while !(ll_new >= ll - 1e-12 * ll.abs().max(1.0)) && halvings < 30 {
                step *= 0.5;
                candidate = &beta + &step;
                ll_new = self.log_likelihood(&candidate);
                halvings += 1;
            }
            trace.iterations += 1;
            trace.last_step = step.amax();
            beta = candidate;
            ll = ll_new;
            trace.max_abs_beta = beta.amax();
            if !trace.max_abs_beta.is_finite() || trace.max_abs_beta > opts.max_abs_beta {
                return fail(beta, trace, NewtonFailure::NonConvergence(NonConvergence::Diverged));
            }
        }
    }
}

/// Leverage `H_i = D_i Ω̂ D_i' V_i⁻¹ W_i`, stored as the rank-`q` product
/// `left · right` with `left = D_i` (`m_i × q`) and
/// `right = Ω̂ D_i' V_i⁻¹ W_i` (`q × m_i`).
#[derive(Debug, Clone, PartialEq)]
pub struct Leverage {
    left: DMatrix<f64>,
    right: DMatrix<f64>,
}

impl Leverage {
    pub fn new(left: DMatrix<f64>, right: DMatrix<f64>) -> Self {
        assert_eq!(left.ncols(), right.nrows());
        assert_eq!(left.nrows(), right.ncols());
        Self { left, right }
    }

    pub fn zero(m: usize, q: usize) -> Self {
        Self::new(DMatrix::zeros(m, q), DMatrix::zeros(q, m))
    }

    pub fn left(&self) -> &DMatrix<f64> {
        &self.left
    }

    pub fn right(&self) -> &DMatrix<f64> {
        &self.right
    }

    pub fn size(&self) -> usize {
        self.left.nrows()
    }

    /// The `m_i × m_i` leverage matrix.
    pub fn dense(&self) -> DMatrix<f64> {
        &self.left * &self.right
    }

    /// `right · left`, the `q × q` matrix sharing the non-zero spectrum of `H_i`.
    pub fn core(&self) -> DMatrix<f64> {
        &self.right * &self.left
    }
}

/// Everything a sandwich estimator needs from one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterIngredients {
    /// `D_i = ∂μ_i/∂β'`, `m_i × q`.
    pub derivative: DMatrix<f64>,
    /// Diagonal of `V_i`, `μ(1 − μ)`.
    pub working_variance: DVector<f64>,
    /// Diagonal of `W_i`.
    pub weights: DVector<f64>,
    /// `Y_i − μ̂_i`.
    pub residuals: DVector<f64>,
    pub leverage: Leverage,
}

impl ClusterIngredients {
    pub fn size(&self) -> usize {
        self.residuals.len()
    }

    /// `V_i⁻¹ W_i` diagonal.
    pub fn precision_weights(&self) -> DVector<f64> {
        self.weights.component_div(&self.working_variance)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeeFit {
    pub beta: DVector<f64>,
    pub converged: bool,
    pub n_iterations: usize,
    pub per_cluster: Vec<ClusterIngredients>,
    /// `(Σ D_i' V_i⁻¹ W_i D_i)⁻¹`.
    pub omega: DMatrix<f64>,
    pub spec: CovariateSpec,
    /// Label of the weighting applied, `None` when unweighted.
    pub weighting: Option<String>,
}

impl GeeFit {
    pub fn n_params(&self) -> usize {
        self.beta.len()
    }

    /// The treatment coefficient, always the last one.
    pub fn treatment_coef(&self) -> f64 {
        self.beta[self.beta.len() - 1]
    }

    pub fn is_weighted(&self) -> bool {
        self.weighting.is_some()
    }

    pub fn with_weighting(mut self, label: impl Into<String>) -> Self {
        self.weighting = Some(label.into());
        self
    }

    /// `Σ_i D_i' V_i⁻¹ W_i r_i` at the stored coefficients.
    pub fn score(&self) -> DVector<f64> {
        let mut s = DVector::zeros(self.n_params());
        for c in &self.per_cluster {
            let v = c.precision_weights().component_mul(&c.residuals);
            s.gemv_tr(1.0, &c.derivative, &v, 1.0);
        }
        s
    }
}

fn validate_weights(ds: &ClusterDataset, w: &[f64]) -> Result<(), GeeError> {
    if w.len() != ds.n_subjects() {
        return Err(GeeError::InvalidWeights(format!(
            "{} weights for {} subjects",
            w.len(),
            ds.n_subjects()
        )));
    }
    if let Some((i, v)) = w.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
        return Err(GeeError::InvalidWeights(format!(
            "weight {v} at subject {i} is not strictly positive and finite"
        )));
    }
    Ok(())
}

/// Fits the logistic marginal model for `spec` with the default solver
/// options. `weights`, when given, are per subject in cluster order.
pub fn fit_gee(ds: &ClusterDataset, spec: &CovariateSpec, weights: Option<&[f64]>) -> Result<GeeFit, GeeError> {
    fit_gee_with(ds, spec, weights, &SolverOptions::default())
}

pub fn fit_gee_with(
    ds: &ClusterDataset,
    spec: &CovariateSpec,
    weights: Option<&[f64]>,
    opts: &SolverOptions,
) -> Result<GeeFit, GeeError> {
    if let Some(w) = weights {
        validate_weights(ds, w)?;
    }
    let designs = ds.design_matrices(spec)?;
    let responses: Vec<DVector<f64>> = ds
        .clusters()
        .iter()
        .map(|c| DVector::from_iterator(c.size(), c.outcomes().iter().map(|&y| y as f64)))
        .collect();
    let weight_blocks: Vec<DVector<f64>> = match weights {
        Some(w) => ds
            .split_by_cluster(w)
            .into_iter()
            .map(DVector::from_column_slice)
            .collect(),
        None => ds
            .clusters()
            .iter()
            .map(|c| DVector::from_element(c.size(), 1.0))
            .collect(),
    };
    let problem = LogisticProblem {
        designs: &designs,
        responses: &responses,
        weights: &weight_blocks,
    };
    let sol = problem.solve(opts);
    let weighting = weights.map(|_| "weighted".to_string());
    let assemble = |converged: bool| {
        assemble_fit(
            &designs,
            &responses,
            &weight_blocks,
            &sol.beta,
            converged,
            sol.trace.iterations,
            spec,
            weighting.clone(),
        )
    };
    match sol.outcome {
        Ok(()) => assemble(true).ok_or(GeeError::SingularInformation { trace: sol.trace }),
        Err(NewtonFailure::SingularInformation) => Err(GeeError::SingularInformation { trace: sol.trace }),
        Err(NewtonFailure::NonConvergence(reason)) => Err(GeeError::NonConvergence {
            reason,
            trace: sol.trace,
            last_iterate: assemble(false).map(Box::new),
        }),
    }
}

#[allow(clippy::too_many_arguments)]
fn assemble_fit(
    designs: &[DMatrix<f64>],
    responses: &[DVector<f64>],
    weights: &[DVector<f64>],
    beta: &DVector<f64>,
    converged: bool,
    n_iterations: usize,
    spec: &CovariateSpec,
    weighting: Option<String>,
) -> Option<GeeFit> {
    let q = beta.len();
    let mut bread_inv = DMatrix::zeros(q, q);
    let mut parts = Vec::with_capacity(designs.len());
    for ((x, y), w) in designs.iter().zip(responses).zip(weights) {
        let mu = (x * beta).map(expit);
        let v = mu.map(|m| m * (1.0 - m));
        let d = DMatrix::from_fn(x.nrows(), q, |i, j| v[i] * x[(i, j)]);
        let g = w.component_div(&v);
        // D' V⁻¹ W D
        let gd = DMatrix::from_fn(x.nrows(), q, |i, j| g[i] * d[(i, j)]);
        bread_inv.gemm_tr(1.0, &d, &gd, 1.0);
        parts.push((d, v, w.clone(), y - &mu, gd));
    }
    let omega = linalg::spd_inverse(&linalg::symmetrize(&bread_inv))?;
    let per_cluster = parts
        .into_iter()
        .map(|(d, v, w, r, gd)| {
            // Ω̂ D' V⁻¹ W = Ω̂ (V⁻¹ W D)'
            let right = &omega * gd.transpose();
            ClusterIngredients {
                leverage: Leverage::new(d.clone(), right),
                derivative: d,
                working_variance: v,
                weights: w,
                residuals: r,
            }
        })
        .collect();
    Some(GeeFit {
        beta: beta.clone(),
        converged,
        n_iterations,
        per_cluster,
        omega,
        spec: spec.clone(),
        weighting,
    })
}

#[derive(Debug, Error, PartialEq)]
pub enum ClosedFormError {
    #[error("arm {arm} has pooled incidence {incidence}; closed form needs (0, 1)")]
    DegenerateArm { arm: u8, incidence: f64 },
    #[error("arm {0} has no subjects")]
    EmptyArm(u8),
}

/// Closed-form crude independence-GEE coefficients
/// `(logit P̂₀, logit P̂₁ − logit P̂₀)` from pooled arm incidences.
pub fn closed_form_crude(ds: &ClusterDataset) -> Result<(f64, f64), ClosedFormError> {
    let arm = |z: u8| {
        let p = ds.pooled_incidence(z).ok_or(ClosedFormError::EmptyArm(z))?;
        if p <= 0.0 || p >= 1.0 {
            Err(ClosedFormError::DegenerateArm { arm: z, incidence: p })
        } else {
            Ok(p)
        }
    };
    let p0 = arm(0)?;
    let p1 = arm(1)?;
    Ok((logit(p0), logit(p1) - logit(p0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Cluster;

    /// Four clusters of four; treated incidence 1/4, control 1/2.
    fn balanced_toy() -> ClusterDataset {
        let mk = |id: &str, z: u8, y: Vec<u8>| {
            let x = DMatrix::from_fn(y.len(), 1, |i, _| i as f64 * 0.3 - 0.4 + z as f64);
            Cluster::new(id, z, y, x).unwrap()
        };
        ClusterDataset::new(
            vec![
                mk("t1", 1, vec![1, 0, 0, 0]),
                mk("t2", 1, vec![0, 0, 1, 0]),
                mk("c1", 0, vec![1, 1, 0, 0]),
                mk("c2", 0, vec![0, 1, 0, 1]),
            ],
            vec!["x".into()],
        )
        .unwrap()
    }

    #[test]
    fn crude_fit_matches_closed_form_toy() {
        let ds = balanced_toy();
        let fit = fit_gee(&ds, &CovariateSpec::Crude, None).unwrap();
        assert!(fit.converged);
        // logit(0.25) - logit(0.5) = -ln 3
        assert!((fit.treatment_coef() + 3f64.ln()).abs() < 1e-8);
        assert!(fit.beta[0].abs() < 1e-8);
        assert!((fit.treatment_coef() - -1.0986).abs() < 1e-4);
    }

    #[test]
    fn unit_weights_equal_unweighted() {
        let ds = balanced_toy();
        let ones = vec![1.0; ds.n_subjects()];
        for spec in [CovariateSpec::Crude, CovariateSpec::AllMainEffects] {
            let a = fit_gee(&ds, &spec, None).unwrap();
            let b = fit_gee(&ds, &spec, Some(&ones)).unwrap();
            assert!((&a.beta - &b.beta).amax() < 1e-12);
        }
    }

    #[test]
    fn separation_is_non_convergence() {
        // Controls all zero, covariate perfectly splits outcomes among treated.
        let mk = |id: &str, z: u8, y: Vec<u8>| {
            let x = DMatrix::from_fn(y.len(), 1, |i, _| if y[i] == 1 { 2.0 } else { -1.0 + i as f64 * 0.1 });
            Cluster::new(id, z, y, x).unwrap()
        };
        let ds = ClusterDataset::new(
            vec![
                mk("a", 1, vec![1, 0, 0]),
                mk("b", 1, vec![0, 1, 0]),
                mk("c", 0, vec![0, 0, 0]),
                mk("d", 0, vec![0, 0, 0]),
            ],
            vec!["x".into()],
        )
        .unwrap();
        let err = fit_gee(&ds, &CovariateSpec::AllMainEffects, None).unwrap_err();
        assert!(err.is_non_convergence(), "{err}");
        if let GeeError::NonConvergence {
            reason, last_iterate, ..
        } = err
        {
            assert!(matches!(reason, NonConvergence::Diverged | NonConvergence::Separation));
            if let Some(last) = last_iterate {
                assert!(!last.converged);
                assert_eq!(last.per_cluster.len(), 4);
            }
        }
    }

    #[test]
    fn invalid_weights_rejected() {
        let ds = balanced_toy();
        let mut w = vec![1.0; ds.n_subjects()];
        w[3] = 0.0;
        assert!(matches!(
            fit_gee(&ds, &CovariateSpec::Crude, Some(&w)),
            Err(GeeError::InvalidWeights(_))
        ));
        assert!(matches!(
            fit_gee(&ds, &CovariateSpec::Crude, Some(&w[..4])),
            Err(GeeError::InvalidWeights(_))
        ));
    }

    #[test]
    fn closed_form_examples() {
        // P̂1 = 0.05, P̂0 = 0.10 via 20-subject clusters.
        let mk = |id: &str, z: u8, events: usize| {
            let y: Vec<u8> = (0..20).map(|i| (i < events) as u8).collect();
            Cluster::new(id, z, y, DMatrix::zeros(20, 0)).unwrap()
        };
        let ds = ClusterDataset::new(vec![mk("t", 1, 1), mk("c", 0, 2)], vec![]).unwrap();
        let (b0, bz) = closed_form_crude(&ds).unwrap();
        assert!((bz - (0.05f64 * 0.90 / (0.95 * 0.10)).ln()).abs() < 1e-14);
        assert!((bz - -0.7472).abs() < 1e-4);
        assert!((b0 - logit(0.1)).abs() < 1e-14);

        let same = ClusterDataset::new(vec![mk("t", 1, 3), mk("c", 0, 3)], vec![]).unwrap();
        assert_eq!(closed_form_crude(&same).unwrap().1, 0.0);

        let zero = ClusterDataset::new(vec![mk("t", 1, 0), mk("c", 0, 3)], vec![]).unwrap();
        assert_eq!(
            closed_form_crude(&zero),
            Err(ClosedFormError::DegenerateArm { arm: 1, incidence: 0.0 })
        );
    }

    #[test]
    fn leverage_reconstruction() {
        let ds = balanced_toy();
        let w: Vec<f64> = (0..ds.n_subjects()).map(|i| 0.5 + 0.1 * i as f64).collect();
        let fit = fit_gee(&ds, &CovariateSpec::AllMainEffects, Some(&w)).unwrap();
        for c in &fit.per_cluster {
            let g = DMatrix::from_diagonal(&c.precision_weights());
            let h = &c.derivative * &fit.omega * c.derivative.transpose() * g;
            let stored = c.leverage.dense();
            assert!((&stored - &h).norm() <= 1e-10 * h.norm());
            assert!(c.working_variance.iter().all(|&v| v > 0.0 && v < 1.0));
        }
        assert!(fit.score().amax() < 1e-8);
    }

    #[test]
    fn expit_logit_round_trip() {
        for x in [-40.0, -3.0, 0.0, 2.5, 40.0] {
            let p = expit(x);
            assert!(p > 0.0 && p < 1.0 || x.abs() > 36.0);
            if x.abs() < 30.0 {
                assert!((logit(p) - x).abs() < 1e-9);
            }
        }
    }
}
