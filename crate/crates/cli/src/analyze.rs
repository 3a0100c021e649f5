//! `analyze`: estimate the treatment effect on a trial CSV with each
//! requested method and report covariate balance.

use std::path::Path;

use anyhow::Result;
use crtgee::effects::EffectError;
use crtgee::propensity::absolute_standardized_difference;
use crtgee::{ClusterDataset, CovariateSpec, EffectEstimate, Method, VarianceEstimator, WeightScheme};
use serde::Serialize;

use crate::{na, to_csv};

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum MethodResult {
    Converged { estimate: EffectEstimate },
    NonConverged { detail: String },
    Failed { detail: String },
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodRow {
    pub method: Method,
    #[serde(flatten)]
    pub result: MethodResult,
}

#[derive(Debug, Clone, Serialize)]
pub struct BalanceRow {
    pub scheme: String,
    pub covariate: String,
    pub asd: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub tool: &'static str,
    pub version: &'static str,
    pub data: String,
    pub n_clusters: usize,
    pub n_subjects: usize,
    pub covariates: Vec<String>,
    pub methods: Vec<MethodRow>,
    pub balance: Vec<BalanceRow>,
    /// Weighting schemes whose propensity model failed; no balance rows.
    pub balance_failures: Vec<String>,
}

impl AnalysisReport {
    pub fn any_non_converged(&self) -> bool {
        self.methods
            .iter()
            .any(|m| matches!(m.result, MethodResult::NonConverged { .. }))
    }

    pub fn any_failed(&self) -> bool {
        self.methods
            .iter()
            .any(|m| matches!(m.result, MethodResult::Failed { .. }))
    }
}

pub fn analyze(ds: &ClusterDataset, data_label: &str, methods: &[Method]) -> Result<AnalysisReport> {
    let spec = CovariateSpec::AllMainEffects;
    let mut rows = Vec::new();
    for &method in methods {
        let result = match method.estimate(ds, &spec) {
            Ok(estimate) => MethodResult::Converged { estimate },
            Err(e) if e.is_non_convergence() => MethodResult::NonConverged { detail: e.to_string() },
            Err(e @ EffectError::Data(_)) => return Err(e.into()),
            Err(e) => MethodResult::Failed { detail: e.to_string() },
        };
        rows.push(MethodRow { method, result });
    }

    let mut balance = Vec::new();
    let mut balance_failures = Vec::new();
    let names = ds.covariate_names();
    if !names.is_empty() {
        let mut push = |scheme: &str, asd: Vec<f64>| {
            for (n, a) in names.iter().zip(asd) {
                balance.push(BalanceRow {
                    scheme: scheme.to_string(),
                    covariate: n.clone(),
                    asd: a,
                });
            }
        };
        push("unweighted", absolute_standardized_difference(ds, None)?);
        for &method in methods {
            let Some(kind) = method.weight_kind() else { continue };
            let scheme = WeightScheme::logistic(kind);
            match scheme.weights(ds) {
                Ok(w) => push(&scheme.label(), absolute_standardized_difference(ds, Some(&w))?),
                Err(e) => balance_failures.push(format!("{}: {e}", scheme.label())),
            }
        }
    }

    Ok(AnalysisReport {
        tool: "crtgee",
        version: env!("CARGO_PKG_VERSION"),
        data: data_label.to_string(),
        n_clusters: ds.n_clusters(),
        n_subjects: ds.n_subjects(),
        covariates: names.to_vec(),
        methods: rows,
        balance,
        balance_failures,
    })
}

pub const EFFECTS_HEADER: [&str; 20] = [
    "method",
    "converged",
    "log_or",
    "or",
    "se_robust",
    "se_md",
    "se_kc",
    "ci_lower_robust",
    "ci_upper_robust",
    "ci_lower_md",
    "ci_upper_md",
    "ci_lower_kc",
    "ci_upper_kc",
    "or_lower_robust",
    "or_upper_robust",
    "or_lower_md",
    "or_upper_md",
    "or_lower_kc",
    "or_upper_kc",
    "detail",
];

fn effect_fields(row: &MethodRow) -> Vec<String> {
    let mut f = vec![row.method.name().to_string()];
    match &row.result {
        MethodResult::Converged { estimate: e } => {
            f.push("true".into());
            f.push(na(Some(e.log_or)));
            f.push(na(Some(e.odds_ratio())));
            f.extend(VarianceEstimator::ALL.iter().map(|&v| na(Some(*e.se.get(v)))));
            for v in VarianceEstimator::ALL {
                let ci = e.ci.get(v);
                f.extend([na(Some(ci.lower)), na(Some(ci.upper))]);
            }
            for v in VarianceEstimator::ALL {
                let ci = e.ci.get(v).exp();
                f.extend([na(Some(ci.lower)), na(Some(ci.upper))]);
            }
            f.push(String::new());
        }
        MethodResult::NonConverged { detail } | MethodResult::Failed { detail } => {
            f.push("false".into());
            f.extend(std::iter::repeat_n("NA".to_string(), EFFECTS_HEADER.len() - 3));
            f.push(detail.clone());
        }
    }
    f
}

impl AnalysisReport {
    pub fn effects_csv(&self) -> String {
        to_csv(&EFFECTS_HEADER, self.methods.iter().map(effect_fields))
    }

    pub fn balance_csv(&self) -> String {
        to_csv(
            &["scheme", "covariate", "asd"],
            self.balance
                .iter()
                .map(|b| vec![b.scheme.clone(), b.covariate.clone(), na(Some(b.asd))]),
        )
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("effects.csv"), self.effects_csv())?;
        std::fs::write(dir.join("balance.csv"), self.balance_csv())?;
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
