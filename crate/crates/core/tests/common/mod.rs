//! Independent reference implementations used as test oracles. Nothing here
//! calls into the estimators under test beyond reading data.

#![allow(dead_code)]

use crtgee::{Cluster, ClusterDataset};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Small random trial: clusters alternate between arms, sizes uniform in
/// `min_m..=max_m`, standard normal covariates, outcomes from a logistic
/// model with a mild covariate and treatment effect.
pub fn toy_dataset(seed: u64, n_clusters: usize, min_m: usize, max_m: usize, p: usize) -> ClusterDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clusters = (0..n_clusters)
        .map(|k| {
            let z = (k % 2) as u8;
            let m = rng.random_range(min_m..=max_m);
            let x = DMatrix::from_fn(m, p, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let y = (0..m)
                .map(|i| {
                    let eta = -0.2 + 0.6 * x.row(i).sum() - 0.7 * z as f64;
                    (rng.random::<f64>() < expit(eta)) as u8
                })
                .collect();
            Cluster::new(format!("k{k}"), z, y, x).unwrap()
        })
        .collect();
    ClusterDataset::new(clusters, (0..p).map(|j| format!("x{j}")).collect()).unwrap()
}

pub fn random_weights(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..n).map(|_| rng.random_range(0.5..3.0)).collect()
}

/// `logit(ȳ₁) − logit(ȳ₀)` from raw event counts.
pub fn closed_form(ds: &ClusterDataset) -> f64 {
    let mut ev = [0.0f64; 2];
    let mut n = [0.0f64; 2];
    for c in ds.clusters() {
        let z = c.treatment() as usize;
        n[z] += c.size() as f64;
        ev[z] += c.outcomes().iter().map(|&y| y as f64).sum::<f64>();
    }
    let lo = |z: usize| (ev[z] / (n[z] - ev[z])).ln();
    lo(1) - lo(0)
}

/// Intercept, the chosen covariates, treatment last.
pub fn design(c: &Cluster, covs: &[usize]) -> DMatrix<f64> {
    let m = c.size();
    DMatrix::from_fn(m, covs.len() + 2, |i, j| {
        if j == 0 {
            1.0
        } else if j == covs.len() + 1 {
            c.treatment() as f64
        } else {
            c.covariates()[(i, covs[j - 1])]
        }
    })
}

pub struct DenseSandwich {
    pub robust: DMatrix<f64>,
    pub md: DMatrix<f64>,
    pub kc: DMatrix<f64>,
    /// Smallest eigenvalue of `I − H_i` over clusters.
    pub min_gap: f64,
}

/// Robust, MD and KC sandwiches with every matrix formed explicitly:
/// `Ω = (Σ D'V⁻¹WD)⁻¹`, `H = DΩD'V⁻¹W`, `(I−H)⁻¹` by general inversion and
/// `(I−H)^{-1/2}` through the symmetric similarity `G^{1/2} H G^{-1/2}`
/// with `G = V⁻¹W`.
pub fn dense_sandwich(ds: &ClusterDataset, covs: &[usize], beta: &DVector<f64>, weights: &[f64]) -> DenseSandwich {
    let q = beta.len();
    let mut parts = Vec::new();
    let mut info = DMatrix::<f64>::zeros(q, q);
    let mut offset = 0;
    for c in ds.clusters() {
        let x = design(c, covs);
        let m = c.size();
        let mu = (&x * beta).map(expit);
        let v = DMatrix::from_diagonal(&mu.map(|p| p * (1.0 - p)));
        let w = DMatrix::from_diagonal(&DVector::from_column_slice(&weights[offset..offset + m]));
        offset += m;
        let d = &v * &x;
        let v_inv = v.clone().try_inverse().unwrap();
        info += d.transpose() * &v_inv * &w * &d;
        let y = DVector::from_iterator(m, c.outcomes().iter().map(|&y| y as f64));
        parts.push((d, v_inv, w, y - mu));
    }
    let omega = info.try_inverse().unwrap();
    let mut meat = [DMatrix::zeros(q, q), DMatrix::zeros(q, q), DMatrix::zeros(q, q)];
    let mut min_gap = f64::INFINITY;
    for (d, v_inv, w, r) in &parts {
        let m = r.len();
        let g = v_inv * w;
        let h = d * &omega * d.transpose() * &g;
        let eye = DMatrix::<f64>::identity(m, m);
        let md = (&eye - &h).try_inverse().unwrap();
        let g_half = g.map(f64::sqrt);
        let g_mhalf = g.map(|e| if e > 0.0 { 1.0 / e.sqrt() } else { 0.0 });
        let sym = &g_half * d * &omega * d.transpose() * &g_half;
        let eig = (&eye - sym).symmetric_eigen();
        min_gap = min_gap.min(eig.eigenvalues.min());
        let inv_sqrt = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()))
            * eig.eigenvectors.transpose();
        let kc = &g_mhalf * inv_sqrt * &g_half;
        for (slot, a) in meat.iter_mut().zip([eye.clone(), md, kc]) {
            let u = d.transpose() * &g * (a * r);
            *slot += &u * u.transpose();
        }
    }
    let [rb, md, kc] = meat;
    DenseSandwich {
        robust: &omega * rb * &omega,
        md: &omega * md * &omega,
        kc: &omega * kc * &omega,
        min_gap,
    }
}

/// Standardized log OR as a function of `β` directly.
pub fn standardized(ds: &ClusterDataset, covs: &[usize], beta: &DVector<f64>) -> f64 {
    let (mut s1, mut s0, mut n) = (0.0, 0.0, 0.0);
    for c in ds.clusters() {
        let mut x = design(c, covs);
        let t = x.ncols() - 1;
        x.column_mut(t).fill(1.0);
        s1 += (&x * beta).map(expit).sum();
        x.column_mut(t).fill(0.0);
        s0 += (&x * beta).map(expit).sum();
        n += c.size() as f64;
    }
    ((s1 / (n - s1)) / (s0 / (n - s0))).ln()
}

/// Plain Newton–Raphson logistic regression of treatment on `[1, X]`.
pub fn propensity_newton(ds: &ClusterDataset) -> DVector<f64> {
    let p = ds.n_covariates();
    let mut rows = Vec::new();
    let mut z = Vec::new();
    for c in ds.clusters() {
        for i in 0..c.size() {
            let mut r = vec![1.0];
            r.extend(c.covariates().row(i).iter());
            rows.push(r);
            z.push(c.treatment() as f64);
        }
    }
    let x = DMatrix::from_fn(rows.len(), p + 1, |i, j| rows[i][j]);
    let z = DVector::from_vec(z);
    let mut g = DVector::zeros(p + 1);
    for _ in 0..100 {
        let e = (&x * &g).map(expit);
        let score = x.transpose() * (&z - &e);
        let wx = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * e[i] * (1.0 - e[i]));
        let step = (x.transpose() * wx).try_inverse().unwrap() * score;
        g += &step;
        if step.amax() < 1e-13 {
            break;
        }
    }
    g
}

pub fn rel_close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    (a - b).amax() <= tol * b.amax().max(1e-12)
}
