//! Study configuration for `simulate`.
//!
//! A flat TOML file with one `[scenario]` table:
//!
//! ```toml
//! methods = ["crude", "multi", "ipw_logit", "ow_logit"]
//! variance_estimators = ["robust", "md", "kc"]
//! n_reps = 1000
//! master_seed = 20240101
//! oracle_seed = 7          # optional, defaults to master_seed
//! workers = 4              # optional
//! output = "out/model1"    # optional
//!
//! [scenario]
//! key = "model1-low-p6"
//! n_clusters = 30
//! mean_cluster_size = 100
//! icc_latent = 0.01
//! ```
//!
//! Instead of `key`, a custom scenario gives `model`, `incidence`,
//! `n_covariates`, `beta0`, `beta_z` and `custom = true`.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use crtgee::simgen::{scenario, Incidence, OutcomeModel, SimConfig};
use crtgee::simulation::normalize_methods;
use crtgee::{Method, VarianceEstimator};
use serde::{Deserialize, Serialize};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStudy {
    methods: Option<Vec<String>>,
    variance_estimators: Option<Vec<String>>,
    n_reps: usize,
    master_seed: u64,
    oracle_seed: Option<u64>,
    workers: Option<usize>,
    output: Option<PathBuf>,
    scenario: RawScenario,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    key: Option<String>,
    model: Option<u8>,
    incidence: Option<String>,
    n_covariates: Option<usize>,
    beta0: Option<f64>,
    beta_z: Option<f64>,
    #[serde(default)]
    custom: bool,
    n_clusters: usize,
    mean_cluster_size: f64,
    icc_latent: f64,
}

/// Everything needed to reproduce a run, minus the worker count.
#[derive(Debug, Clone, Serialize)]
pub struct StudyConfig {
    pub scenario_key: Option<String>,
    pub sim: SimConfig,
    pub methods: Vec<Method>,
    pub variance_estimators: Vec<VarianceEstimator>,
    pub oracle_seed: u64,
    #[serde(skip)]
    pub workers: Option<usize>,
    #[serde(skip)]
    pub output: Option<PathBuf>,
}

pub fn parse_methods<S: AsRef<str>>(names: &[S]) -> Result<Vec<Method>> {
    if names.is_empty() {
        bail!("at least one method is required");
    }
    names
        .iter()
        .map(|n| {
            let n = n.as_ref().trim();
            Method::parse(n).ok_or_else(|| {
                let known: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                anyhow!("unknown method `{n}` (expected one of {})", known.join(", "))
            })
        })
        .collect()
}

fn parse_estimators(names: &[String]) -> Result<Vec<VarianceEstimator>> {
    if names.is_empty() {
        bail!("variance_estimators must not be empty");
    }
    let mut out = Vec::new();
    for n in names {
        let e = VarianceEstimator::parse(n.trim()).ok_or_else(|| anyhow!("unknown variance estimator `{n}`"))?;
        if !out.contains(&e) {
            out.push(e);
        }
    }
    Ok(out)
}

fn resolve_scenario(s: &RawScenario, n_reps: usize, seed: u64) -> Result<(Option<String>, SimConfig)> {
    if let Some(key) = &s.key {
        let explicit = s.model.is_some()
            || s.incidence.is_some()
            || s.n_covariates.is_some()
            || s.beta0.is_some()
            || s.beta_z.is_some()
            || s.custom;
        if explicit {
            bail!("[scenario] gives a key and explicit parameters; use one or the other");
        }
        let row = scenario(key)?;
        let sim = SimConfig::from_scenario(row, s.n_clusters, s.mean_cluster_size, s.icc_latent, n_reps, seed);
        return Ok((Some(row.key()), checked(sim)?));
    }
    let need = |name: &str| anyhow!("[scenario] needs `key` or `{name}`");
    let model = s.model.ok_or_else(|| need("model"))?;
    let incidence = s.incidence.as_deref().ok_or_else(|| need("incidence"))?;
    let sim = SimConfig {
        model: OutcomeModel::from_index(model).ok_or_else(|| anyhow!("model must be 1..=4, got {model}"))?,
        incidence: Incidence::parse(incidence).ok_or_else(|| anyhow!("unknown incidence `{incidence}`"))?,
        n_clusters: s.n_clusters,
        mean_cluster_size: s.mean_cluster_size,
        icc_latent: s.icc_latent,
        n_covariates: s.n_covariates.ok_or_else(|| need("n_covariates"))?,
        beta0: s.beta0.ok_or_else(|| need("beta0"))?,
        beta_z: s.beta_z.ok_or_else(|| need("beta_z"))?,
        n_reps,
        master_seed: seed,
        custom: s.custom,
    };
    let key = sim.reference().map(|r| r.key());
    Ok((key, checked(sim)?))
}

fn checked(sim: SimConfig) -> Result<SimConfig> {
    sim.validate()?;
    Ok(sim)
}

impl StudyConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawStudy = toml::from_str(text)?;
        let methods = match &raw.methods {
            Some(m) => parse_methods(m)?,
            None => Method::ALL.to_vec(),
        };
        let variance_estimators = match &raw.variance_estimators {
            Some(v) => parse_estimators(v)?,
            None => VarianceEstimator::ALL.to_vec(),
        };
        let (scenario_key, sim) = resolve_scenario(&raw.scenario, raw.n_reps, raw.master_seed)?;
        Ok(Self {
            scenario_key,
            sim,
            methods: normalize_methods(&methods),
            variance_estimators,
            oracle_seed: raw.oracle_seed.unwrap_or(raw.master_seed),
            workers: raw.workers,
            output: raw.output,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("invalid config {}", path.display()))
    }
}
