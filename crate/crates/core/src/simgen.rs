//! Data-generating mechanisms for cluster-randomized trials with a binary
//! outcome, and the population-level truth oracle.
//!
//! For subject `j` in cluster `i` the latent outcome is
//! `Y*_ij = η(X_ij, Z_i) + u_i + ε_ij` with `u_i ~ N(0, σ_u²)` and
//! `ε_ij ~ Logistic(0, 1)`, and the observed outcome is
//! `Y_ij ~ Bernoulli(expit(Y*_ij))`. Cluster sizes are Poisson, redrawn until
//! positive, and exactly half the clusters are treated.
//!
//! Randomness is addressed by `(seed, stream)`: each replication owns
//! independent ChaCha streams for sizes, covariates, random effects and
//! outcomes, so a replication is reproducible regardless of which worker
//! generates it.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Cluster, ClusterDataset};
use crate::gee::{expit, logit};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("latent ICC must lie in [0, 1), got {0}")]
    InvalidIcc(f64),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeModel {
    /// Additive, covariate blocks with coefficients (0, 0.4, 0.8).
    Model1,
    /// Additive, covariate blocks with coefficients (0.8, 1.6, 2.4).
    Model2,
    /// Nonlinear with treatment–covariate interactions, correlated covariates.
    Model3,
    /// Nonlinear (sine, products) with interactions, correlated covariates.
    Model4,
}

impl OutcomeModel {
    pub fn from_index(k: u8) -> Option<Self> {
        match k {
            1 => Some(Self::Model1),
            2 => Some(Self::Model2),
            3 => Some(Self::Model3),
            4 => Some(Self::Model4),
            _ => None,
        }
    }

    pub fn index(self) -> u8 {
        match self {
            Self::Model1 => 1,
            Self::Model2 => 2,
            Self::Model3 => 3,
            Self::Model4 => 4,
        }
    }

    fn block_coefficients(self) -> Option<[f64; 3]> {
        match self {
            Self::Model1 => Some([0.0, 0.4, 0.8]),
            Self::Model2 => Some([0.8, 1.6, 2.4]),
            _ => None,
        }
    }

    /// Covariates are equicorrelated at 0.1 for the nonlinear models.
    fn correlated_covariates(self) -> bool {
        matches!(self, Self::Model3 | Self::Model4)
    }

    /// Linear predictor without the random effect.
    pub fn linear_predictor(self, beta0: f64, beta_z: f64, x: &[f64], z: f64) -> f64 {
        if let Some(b) = self.block_coefficients() {
            let k = x.len() / 3;
            let s = |r: std::ops::Range<usize>| x[r].iter().sum::<f64>();
            return beta0 + b[0] * s(0..k) + b[1] * s(k..2 * k) + b[2] * s(2 * k..x.len()) + beta_z * z;
        }
        let sig = |a: f64, t: f64| 1.0 / (1.0 + (-a * t).exp());
        match self {
            Self::Model3 => {
                beta0 - 3.0 * sig(6.0, x[0] + x[1] + x[2] + x[3])
                    + 0.5 * (x[4] + x[5])
                    + 2.0 * x[4] * x[5]
                    + 1.8 * (x[2] + x[3]) * z
                    - 2.0 * sig(4.0, x[4] + x[5]) * z
                    + beta_z * z
            }
            Self::Model4 => {
                beta0 - 1.5 * sig(4.0, x[0] + x[1])
                    + 2.0 * (x[2] + x[3]).sin()
                    + 1.8 * (x[0] * x[2] + x[1] * x[3])
                    + x[4]
                    + x[5]
                    - 1.5 * x[4] * x[5]
                    - 1.5 * (x[2] + x[3]) * z
                    + 2.0 * sig(2.0, x[4] + x[5]) * z
                    + beta_z * z
            }
            _ => unreachable!(),
        }
    }
}

impl fmt::Display for OutcomeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "model{}", self.index())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Incidence {
    Low,
    VeryLow,
}

impl Incidence {
    pub fn name(self) -> &'static str {
        match self {
            Self::Low => "low",
            Self::VeryLow => "very_low",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "low" => Some(Self::Low),
            "very_low" | "verylow" | "very-low" => Some(Self::VeryLow),
            _ => None,
        }
    }
}

/// One row of the reference parameter table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScenarioRow {
    pub model: OutcomeModel,
    pub incidence: Incidence,
    pub n_covariates: usize,
    pub beta0: f64,
    pub beta_z: f64,
    pub p1: f64,
    pub p0: f64,
    pub delta: f64,
}

impl ScenarioRow {
    pub fn key(&self) -> String {
        format!("{}-{}-p{}", self.model, self.incidence.name(), self.n_covariates)
    }
}

const fn row(
    model: OutcomeModel,
    incidence: Incidence,
    n_covariates: usize,
    beta0: f64,
    beta_z: f64,
    p1: f64,
    p0: f64,
    delta: f64,
) -> ScenarioRow {
    ScenarioRow {
        model,
        incidence,
        n_covariates,
        beta0,
        beta_z,
        p1,
        p0,
        delta,
    }
}

use Incidence::{Low, VeryLow};
use OutcomeModel::{Model1, Model2, Model3, Model4};

/// Intercepts and treatment effects calibrated to the target incidences, with
/// the reference population incidences and log odds ratios.
pub const SCENARIOS: [ScenarioRow; 12] = [
    row(Model1, Low, 6, -3.6, -1.2, 0.0455, 0.0987, -0.8317),
    row(Model1, VeryLow, 6, -4.7, -1.1, 0.0224, 0.0490, -0.8103),
    row(Model1, Low, 15, -4.2, -1.2, 0.0484, 0.0954, -0.7292),
    row(Model1, VeryLow, 15, -5.4, -1.2, 0.0221, 0.0486, -0.8155),
    row(Model2, Low, 6, -6.4, -1.8, 0.0490, 0.0974, -0.7392),
    row(Model2, VeryLow, 6, -8.1, -1.7, 0.0240, 0.0507, -0.7756),
    row(Model2, Low, 15, -9.0, -2.4, 0.0559, 0.1045, -0.6785),
    row(Model2, VeryLow, 15, -11.8, -2.2, 0.0254, 0.0499, -0.7007),
    row(Model3, Low, 6, -4.8, -2.8, 0.0498, 0.0988, -0.7380),
    row(Model3, VeryLow, 6, -6.6, -4.2, 0.0253, 0.0511, -0.7298),
    row(Model4, Low, 6, -4.9, -3.0, 0.0504, 0.1004, -0.7433),
    row(Model4, VeryLow, 6, -6.6, -3.2, 0.0246, 0.0490, -0.7144),
];

/// Looks up a scenario by key, e.g. `model1-low-p6` or `model2-very_low-p15`.
pub fn scenario(key: &str) -> Result<&'static ScenarioRow, SimError> {
    let normalized = key
        .trim()
        .to_ascii_lowercase()
        .replace("verylow", "very_low")
        .replace("very-low", "very_low");
    SCENARIOS
        .iter()
        .find(|r| r.key() == normalized)
        .ok_or_else(|| SimError::UnknownScenario(key.to_string()))
}

fn matching_scenario(
    model: OutcomeModel,
    incidence: Incidence,
    n_covariates: usize,
    beta0: f64,
    beta_z: f64,
) -> Option<&'static ScenarioRow> {
    SCENARIOS.iter().find(|r| {
        r.model == model
            && r.incidence == incidence
            && r.n_covariates == n_covariates
            && r.beta0 == beta0
            && r.beta_z == beta_z
    })
}

/// `σ_u = sqrt(ρ/(1−ρ) · π²/3)`, the random-effect SD giving latent ICC `ρ`.
pub fn latent_sd(icc: f64) -> Result<f64, SimError> {
    if !(0.0..1.0).contains(&icc) {
        return Err(SimError::InvalidIcc(icc));
    }
    Ok((icc / (1.0 - icc) * PI * PI / 3.0).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    pub model: OutcomeModel,
    pub incidence: Incidence,
    pub n_clusters: usize,
    pub mean_cluster_size: f64,
    pub icc_latent: f64,
    pub n_covariates: usize,
    pub beta0: f64,
    pub beta_z: f64,
    pub n_reps: usize,
    pub master_seed: u64,
    /// Set when the parameters are not a reference scenario row.
    pub custom: bool,
}

impl SimConfig {
    /// A reference scenario with the given design.
    pub fn from_scenario(
        row: &ScenarioRow,
        n_clusters: usize,
        mean_cluster_size: f64,
        icc_latent: f64,
        n_reps: usize,
        master_seed: u64,
    ) -> Self {
        Self {
            model: row.model,
            incidence: row.incidence,
            n_clusters,
            mean_cluster_size,
            icc_latent,
            n_covariates: row.n_covariates,
            beta0: row.beta0,
            beta_z: row.beta_z,
            n_reps,
            master_seed,
            custom: false,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        latent_sd(self.icc_latent)?;
        if self.n_clusters < 2 || self.n_clusters % 2 != 0 {
            return bad(format!(
                "n_clusters must be even and at least 2, got {}",
                self.n_clusters
            ));
        }
        if !(self.mean_cluster_size.is_finite() && self.mean_cluster_size > 0.0) {
            return bad(format!(
                "mean_cluster_size must be positive, got {}",
                self.mean_cluster_size
            ));
        }
        if self.n_reps == 0 {
            return bad("n_reps must be positive".into());
        }
        if !(self.beta0.is_finite() && self.beta_z.is_finite()) {
            return bad("coefficients must be finite".into());
        }
        if self.model.correlated_covariates() && self.n_covariates != 6 {
            return bad(format!("{} requires 6 covariates", self.model));
        }
        if !self.model.correlated_covariates() && (self.n_covariates == 0 || self.n_covariates % 3 != 0) {
            return bad(format!("{} needs a positive multiple of 3 covariates", self.model));
        }
        if !self.custom
            && matching_scenario(self.model, self.incidence, self.n_covariates, self.beta0, self.beta_z).is_none()
        {
            return bad("parameters match no reference scenario; mark the config custom".into());
        }
        Ok(())
    }

    /// The reference row these parameters come from, if any.
    pub fn reference(&self) -> Option<&'static ScenarioRow> {
        matching_scenario(self.model, self.incidence, self.n_covariates, self.beta0, self.beta_z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TruthSpec {
    pub delta: f64,
    pub p1: f64,
    pub p0: f64,
    pub population_clusters: usize,
    pub population_mean_size: usize,
    pub oracle_seed: u64,
}

#[derive(Clone, Copy)]
#[repr(u64)]
enum Stream {
    Sizes = 0,
    Covariates = 1,
    RandomEffects = 2,
    Outcomes = 3,
    Truth = 4,
}

const STREAMS_PER_INDEX: u64 = 8;

fn stream_rng(seed: u64, index: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_mul(STREAMS_PER_INDEX).wrapping_add(stream as u64));
    rng
}

fn draw_size<R: Rng>(rng: &mut R, poisson: &Poisson<f64>) -> usize {
    loop {
        let m = poisson.sample(rng) as usize;
        if m >= 1 {
            return m;
        }
    }
}

fn draw_covariates<R: Rng>(rng: &mut R, model: OutcomeModel, out: &mut [f64]) {
    if model.correlated_covariates() {
        let common: f64 = rng.sample(StandardNormal);
        let (a, b) = (0.1f64.sqrt(), 0.9f64.sqrt());
        for x in out.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *x = a * common + b * e;
        }
    } else {
        for x in out.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
    }
}

/// Standard logistic draw by inversion.
fn draw_logistic<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.random::<f64>();
    let u = u.max(f64::MIN_POSITIVE);
    (u / (1.0 - u)).ln()
}

/// `P(Y = 1)` for latent mean `a`: `E[expit(a + ε)]` over a standard logistic
/// `ε`, which integrates to `eᵃ(eᵃ − 1 − a)/(eᵃ − 1)²`.
pub fn outcome_probability(a: f64) -> f64 {
    if a.abs() < 1e-3 {
        return 0.5 + a / 6.0;
    }
    if a > 30.0 {
        return 1.0 - outcome_probability(-a);
    }
    let k = a.exp_m1();
    (1.0 + k) * (k - a) / (k * k)
}

fn draw_outcome<R: Rng>(rng: &mut R, latent_mean: f64) -> u8 {
    let p = expit(latent_mean + draw_logistic(rng));
    (rng.random::<f64>() < p) as u8
}

/// Cluster random effects `u_i ~ N(0, σ_u²)` of replication `rep_index`, in
/// cluster order. These are the values `generate_dataset` uses.
pub fn random_effects(cfg: &SimConfig, rep_index: u64) -> Result<Vec<f64>, SimError> {
    let sigma_u = latent_sd(cfg.icc_latent)?;
    let mut rng = stream_rng(cfg.master_seed, rep_index, Stream::RandomEffects);
    Ok((0..cfg.n_clusters)
        .map(|_| sigma_u * rng.sample::<f64, _>(StandardNormal))
        .collect())
}

/// Generates replication `rep_index` of `cfg`. Deterministic in
/// `(cfg.master_seed, rep_index)`.
pub fn generate_dataset(cfg: &SimConfig, rep_index: u64) -> Result<ClusterDataset, SimError> {
    cfg.validate()?;
    let poisson = Poisson::new(cfg.mean_cluster_size).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    let seed = cfg.master_seed;
    let mut sizes_rng = stream_rng(seed, rep_index, Stream::Sizes);
    let mut cov_rng = stream_rng(seed, rep_index, Stream::Covariates);
    let mut y_rng = stream_rng(seed, rep_index, Stream::Outcomes);
    let p = cfg.n_covariates;
    let n_treated = cfg.n_clusters / 2;

    let mut clusters = Vec::with_capacity(cfg.n_clusters);
    let mut x = vec![0.0; p];
    let effects = random_effects(cfg, rep_index)?;
    for (i, &u) in effects.iter().enumerate() {
        let m = draw_size(&mut sizes_rng, &poisson);
        let z = (i < n_treated) as u8;
        let mut covs = Vec::with_capacity(m * p);
        let mut ys = Vec::with_capacity(m);
        for _ in 0..m {
            draw_covariates(&mut cov_rng, cfg.model, &mut x);
            let eta = cfg.model.linear_predictor(cfg.beta0, cfg.beta_z, &x, z as f64);
            ys.push(draw_outcome(&mut y_rng, eta + u));
            covs.extend_from_slice(&x);
        }
        let cluster = Cluster::new(format!("{}", i + 1), z, ys, DMatrix::from_row_slice(m, p, &covs))
            .expect("generated cluster is valid");
        clusters.push(cluster);
    }
    let names = (1..=p).map(|k| format!("x{k}")).collect();
    Ok(ClusterDataset::new(clusters, names).expect("generated dataset is valid"))
}

pub const TRUTH_CLUSTERS: usize = 5000;
pub const TRUTH_MEAN_SIZE: usize = 100;
const TRUTH_SHARD: usize = 100;

/// Population-level participant-average log odds ratio. Every simulated
/// subject contributes both potential outcomes (shared covariates and random
/// effect) through their exact incidence `outcome_probability`, rather than a
/// Bernoulli draw; `Δ = logit(P₁) − logit(P₀)` from the pooled incidences.
pub fn compute_true_delta(cfg: &SimConfig, oracle_seed: u64) -> Result<TruthSpec, SimError> {
    compute_true_delta_sized(cfg, oracle_seed, TRUTH_CLUSTERS, TRUTH_MEAN_SIZE)
}

pub fn compute_true_delta_sized(
    cfg: &SimConfig,
    oracle_seed: u64,
    n_clusters: usize,
    mean_size: usize,
) -> Result<TruthSpec, SimError> {
    let sigma_u = latent_sd(cfg.icc_latent)?;
    let poisson = Poisson::new(mean_size as f64).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    let shards = n_clusters.div_ceil(TRUTH_SHARD);
    let per_shard: Vec<(f64, f64, u64)> = (0..shards)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream_rng(oracle_seed, s as u64, Stream::Truth);
            let in_shard = TRUTH_SHARD.min(n_clusters - s * TRUTH_SHARD);
            let mut x = vec![0.0; cfg.n_covariates];
            let (mut y1, mut y0, mut n) = (0.0, 0.0, 0u64);
            for _ in 0..in_shard {
                let m = draw_size(&mut rng, &poisson);
                let u = sigma_u * rng.sample::<f64, _>(StandardNormal);
                for _ in 0..m {
                    draw_covariates(&mut rng, cfg.model, &mut x);
                    y1 += outcome_probability(cfg.model.linear_predictor(cfg.beta0, cfg.beta_z, &x, 1.0) + u);
                    y0 += outcome_probability(cfg.model.linear_predictor(cfg.beta0, cfg.beta_z, &x, 0.0) + u);
                    n += 1;
                }
            }
            (y1, y0, n)
        })
        .collect();
    // Summed in shard order so the result does not depend on the schedule.
    let (y1, y0, n) = per_shard
        .into_iter()
        .fold((0.0, 0.0, 0u64), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    let p1 = y1 / n as f64;
    let p0 = y0 / n as f64;
    Ok(TruthSpec {
        delta: logit(p1) - logit(p0),
        p1,
        p0,
        population_clusters: n_clusters,
        population_mean_size: mean_size,
        oracle_seed,
    })
}
