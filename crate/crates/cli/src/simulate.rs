//! `simulate`: run a study and render its metrics.

use std::path::Path;

use anyhow::{Context, Result};
use crtgee::metrics::{is_nominal, MethodMetrics};
use crtgee::simulation::{run_simulation, truth_with_workers, FailureCounts};
use crtgee::{TruthSpec, VarianceEstimator};
use serde::Serialize;

use crate::config::StudyConfig;
use crate::{na, to_csv};

pub const METRICS_HEADER: [&str; 17] = [
    "method",
    "ate",
    "bias",
    "re",
    "cvg_robust",
    "cvg_md",
    "cvg_kc",
    "non_con",
    "n_converged",
    "n_reps",
    "emp_var",
    "mcse_robust",
    "mcse_md",
    "mcse_kc",
    "nominal_robust",
    "nominal_md",
    "nominal_kc",
];

#[derive(Debug, Clone, Serialize)]
pub struct MethodReport {
    #[serde(flatten)]
    pub metrics: MethodMetrics,
    pub failures: FailureCounts,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationReport {
    pub tool: &'static str,
    pub version: &'static str,
    pub config: StudyConfig,
    pub truth: TruthSpec,
    /// How the RE denominator is formed.
    pub re_note: &'static str,
    pub methods: Vec<MethodReport>,
}

pub fn run(cfg: &StudyConfig, workers: usize) -> Result<SimulationReport> {
    let truth = truth_with_workers(&cfg.sim, cfg.oracle_seed, workers)?;
    let run = run_simulation(&cfg.sim, &cfg.methods, workers)?;
    let metrics = run.metrics(&truth)?;
    let methods = metrics
        .into_iter()
        .enumerate()
        .map(|(k, metrics)| MethodReport {
            metrics,
            failures: run.failures(k),
        })
        .collect();
    Ok(SimulationReport {
        tool: "crtgee",
        version: env!("CARGO_PKG_VERSION"),
        config: cfg.clone(),
        truth,
        re_note: "each method over its own converged replications; crude variance over crude's converged replications",
        methods,
    })
}

impl SimulationReport {
    fn selected(&self, e: VarianceEstimator) -> bool {
        self.config.variance_estimators.contains(&e)
    }

    pub fn metrics_csv(&self) -> String {
        let rows = self.methods.iter().map(|r| {
            let m = &r.metrics;
            let mut f = vec![m.method.clone(), na(m.mean_ate), na(m.bias), na(m.re_vs_crude)];
            let per = |f: &mut Vec<String>, g: &dyn Fn(VarianceEstimator) -> String| {
                for e in VarianceEstimator::ALL {
                    f.push(if self.selected(e) { g(e) } else { "NA".into() });
                }
            };
            per(&mut f, &|e| na(*m.coverage.get(e)));
            f.push(na(Some(m.non_convergence)));
            f.push(m.n_converged.to_string());
            f.push(m.n_reps.to_string());
            f.push(na(m.empirical_variance));
            per(&mut f, &|e| na(*m.mc_se_coverage.get(e)));
            per(&mut f, &|e| {
                m.coverage.get(e).map_or("NA".into(), |c| is_nominal(c).to_string())
            });
            f
        });
        to_csv(&METRICS_HEADER, rows)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join("summary.json"), json + "\n")?;
        Ok(())
    }
}
