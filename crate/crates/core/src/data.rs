//! Clustered binary-outcome trial data: containers, validation, CSV I/O and
//! design-matrix construction.
//!
//! The CSV layout is `cluster_id,treatment,outcome,<cov1>,...,<covP>` with
//! treatment and outcome written as literal `0`/`1`. Rows are grouped by
//! `cluster_id` in order of first appearance; within a cluster the file order
//! of subjects is kept.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("empty file: no header row")]
    EmptyFile,
    #[error("no data rows")]
    NoRows,
    #[error("missing required column `{0}`")]
    MissingColumn(&'static str),
    #[error("row {row}: expected {expected} fields, found {found}")]
    FieldCount { row: usize, expected: usize, found: usize },
    #[error("row {row}: {column} must be 0 or 1, found `{value}`")]
    NotBinary {
        row: usize,
        column: &'static str,
        value: String,
    },
    #[error("row {row}: covariate `{column}` is not a finite number: `{value}`")]
    BadCovariate { row: usize, column: String, value: String },
    #[error("treatment not constant within cluster {cluster} (row {row})")]
    TreatmentVaries { cluster: String, row: usize },
    #[error("dataset needs at least 2 clusters, found {0}")]
    TooFewClusters(usize),
    #[error("cluster {0} is empty")]
    EmptyCluster(String),
    #[error("cluster {cluster}: {detail}")]
    InvalidCluster { cluster: String, detail: String },
    #[error("invalid covariate selection: {0}")]
    InvalidSpec(String),
}

/// Subjects sharing one randomized unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    id: String,
    treatment: u8,
    outcomes: Vec<u8>,
    /// `m_i × P`, one row per subject.
    covariates: DMatrix<f64>,
}

impl Cluster {
    pub fn new(
        id: impl Into<String>,
        treatment: u8,
        outcomes: Vec<u8>,
        covariates: DMatrix<f64>,
    ) -> Result<Self, DataError> {
        let id = id.into();
        let bad = |detail: String| DataError::InvalidCluster {
            cluster: id.clone(),
            detail,
        };
        if outcomes.is_empty() {
            return Err(DataError::EmptyCluster(id));
        }
        if treatment > 1 {
            return Err(bad(format!("treatment {treatment} is not binary")));
        }
        if let Some(y) = outcomes.iter().find(|&&y| y > 1) {
            return Err(bad(format!("outcome {y} is not binary")));
        }
        if covariates.nrows() != outcomes.len() {
            return Err(bad(format!(
                "{} covariate rows for {} outcomes",
                covariates.nrows(),
                outcomes.len()
            )));
        }
        if covariates.iter().any(|x| !x.is_finite()) {
            return Err(bad("non-finite covariate value".into()));
        }
        Ok(Self {
            id,
            treatment,
            outcomes,
            covariates,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn treatment(&self) -> u8 {
        self.treatment
    }

    pub fn is_treated(&self) -> bool {
        self.treatment == 1
    }

    pub fn outcomes(&self) -> &[u8] {
        &self.outcomes
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    /// Cluster size `m_i`.
    pub fn size(&self) -> usize {
        self.outcomes.len()
    }

    pub fn events(&self) -> usize {
        self.outcomes.iter().map(|&y| y as usize).sum()
    }
}

/// A validated trial dataset. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterDataset {
    clusters: Vec<Cluster>,
    covariate_names: Vec<String>,
}

impl ClusterDataset {
    pub fn new(clusters: Vec<Cluster>, covariate_names: Vec<String>) -> Result<Self, DataError> {
        if clusters.len() < 2 {
            return Err(DataError::TooFewClusters(clusters.len()));
        }
        let p = covariate_names.len();
        for c in &clusters {
            if c.covariates.ncols() != p {
                return Err(DataError::InvalidCluster {
                    cluster: c.id.clone(),
                    detail: format!("{} covariate columns, expected {p}", c.covariates.ncols()),
                });
            }
        }
        Ok(Self {
            clusters,
            covariate_names,
        })
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.clusters.iter().map(Cluster::size).sum()
    }

    /// Per-subject treatment indicators, flattened in cluster order.
    pub fn subject_treatments(&self) -> Vec<u8> {
        self.clusters
            .iter()
            .flat_map(|c| std::iter::repeat_n(c.treatment, c.size()))
            .collect()
    }

    pub fn subject_outcomes(&self) -> Vec<u8> {
        self.clusters.iter().flat_map(|c| c.outcomes.iter().copied()).collect()
    }

    /// Pooled subject-level incidence in arm `treatment`, or `None` if the arm
    /// has no subjects.
    pub fn pooled_incidence(&self, treatment: u8) -> Option<f64> {
        let (events, n) = self
            .clusters
            .iter()
            .filter(|c| c.treatment == treatment)
            .fold((0usize, 0usize), |(e, n), c| (e + c.events(), n + c.size()));
        (n > 0).then(|| events as f64 / n as f64)
    }

    /// A copy keeping only the named covariates, in the order given.
    pub fn select_covariates<S: AsRef<str>>(&self, names: &[S]) -> Result<Self, DataError> {
        let mut idx = Vec::with_capacity(names.len());
        for n in names {
            let n = n.as_ref();
            let j = self
                .covariate_names
                .iter()
                .position(|c| c == n)
                .ok_or_else(|| DataError::InvalidSpec(format!("unknown covariate `{n}`")))?;
            if idx.contains(&j) {
                return Err(DataError::InvalidSpec(format!("covariate `{n}` listed twice")));
            }
            idx.push(j);
        }
        let clusters = self
            .clusters
            .iter()
            .map(|c| Cluster {
                covariates: c.covariates.select_columns(&idx),
                ..c.clone()
            })
            .collect();
        Ok(Self {
            clusters,
            covariate_names: idx.iter().map(|&j| self.covariate_names[j].clone()).collect(),
        })
    }

    /// Splits a flat per-subject vector into per-cluster slices.
    pub fn split_by_cluster<'a, T>(&self, flat: &'a [T]) -> Vec<&'a [T]> {
        let mut out = Vec::with_capacity(self.clusters.len());
        let mut start = 0;
        for c in &self.clusters {
            out.push(&flat[start..start + c.size()]);
            start += c.size();
        }
        out
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(file)
    }

    /// Parses the trial CSV layout. Row numbers in errors are 1-based file
    /// lines, counting the header as line 1.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(reader);
        let mut records = rdr.records();
        let header = match records.next() {
            Some(h) => h?,
            None => return Err(DataError::EmptyFile),
        };
        let header: Vec<String> = header.iter().map(|h| h.trim().to_string()).collect();
        let find = |name: &'static str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or(DataError::MissingColumn(name))
        };
        let id_col = find("cluster_id")?;
        let z_col = find("treatment")?;
        let y_col = find("outcome")?;
        let cov_cols: Vec<usize> = (0..header.len())
            .filter(|&j| j != id_col && j != z_col && j != y_col)
            .collect();
        let covariate_names: Vec<String> = cov_cols.iter().map(|&j| header[j].clone()).collect();

        struct Pending {
            treatment: u8,
            outcomes: Vec<u8>,
            rows: Vec<f64>,
        }
        let mut order: Vec<String> = Vec::new();
        let mut groups: HashMap<String, Pending> = HashMap::new();

        for (k, rec) in records.enumerate() {
            let row = k + 2;
            let rec = rec?;
            if rec.len() == 1 && rec.get(0).is_some_and(|s| s.trim().is_empty()) {
                continue;
            }
            if rec.len() != header.len() {
                return Err(DataError::FieldCount {
                    row,
                    expected: header.len(),
                    found: rec.len(),
                });
            }
            let binary = |col: usize, name: &'static str| -> Result<u8, DataError> {
                match rec[col].trim() {
                    "0" => Ok(0),
                    "1" => Ok(1),
                    other => Err(DataError::NotBinary {
                        row,
                        column: name,
                        value: other.to_string(),
                    }),
                }
            };
            let z = binary(z_col, "treatment")?;
            let y = binary(y_col, "outcome")?;
            let id = rec[id_col].trim().to_string();
            let mut xs = Vec::with_capacity(cov_cols.len());
            for (&j, name) in cov_cols.iter().zip(&covariate_names) {
                let raw = rec[j].trim();
                match raw.parse::<f64>() {
                    Ok(v) if v.is_finite() => xs.push(v),
                    _ => {
                        return Err(DataError::BadCovariate {
                            row,
                            column: name.clone(),
                            value: raw.to_string(),
                        })
                    }
                }
            }
            match groups.get_mut(&id) {
                Some(g) => {
                    if g.treatment != z {
                        return Err(DataError::TreatmentVaries { cluster: id, row });
                    }
                    g.outcomes.push(y);
                    g.rows.extend(xs);
                }
                None => {
                    order.push(id.clone());
                    groups.insert(
                        id,
                        Pending {
                            treatment: z,
                            outcomes: vec![y],
                            rows: xs,
                        },
                    );
                }
            }
        }
        if order.is_empty() {
            return Err(DataError::NoRows);
        }
        let p = covariate_names.len();
        let clusters = order
            .into_iter()
            .map(|id| {
                let g = groups.remove(&id).expect("grouped id");
                let m = g.outcomes.len();
                let x = DMatrix::from_row_slice(m, p, &g.rows);
                Cluster::new(id, g.treatment, g.outcomes, x)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(clusters, covariate_names)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["cluster_id".to_string(), "treatment".into(), "outcome".into()];
        header.extend(self.covariate_names.iter().cloned());
        wtr.write_record(&header)?;
        for c in &self.clusters {
            for (j, &y) in c.outcomes.iter().enumerate() {
                let mut rec = vec![c.id.clone(), c.treatment.to_string(), y.to_string()];
                rec.extend(c.covariates.row(j).iter().map(|v| format!("{v:?}")));
                wtr.write_record(&rec)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Per-cluster design matrices for the logistic mean model.
    ///
    /// Column 0 is the intercept and the last column is the cluster treatment
    /// indicator, so the treatment coefficient always sits at index `q - 1`.
    pub fn design_matrices(&self, spec: &CovariateSpec) -> Result<Vec<DMatrix<f64>>, DataError> {
        let cols = spec.columns(self.n_covariates())?;
        let q = cols.len() + 2;
        Ok(self
            .clusters
            .iter()
            .map(|c| {
                let z = c.treatment as f64;
                DMatrix::from_fn(c.size(), q, |i, j| {
                    if j == 0 {
                        1.0
                    } else if j == q - 1 {
                        z
                    } else {
                        c.covariates[(i, cols[j - 1])]
                    }
                })
            })
            .collect())
    }
}

/// Which covariates enter the outcome mean model.
#[derive(Debug, Clone, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateSpec {
    /// Intercept and treatment only.
    #[default]
    Crude,
    AllMainEffects,
    /// Main effects of the listed covariate column indices.
    Subset(Vec<usize>),
}

impl CovariateSpec {
    /// Covariate column indices used, after validating against `p` columns.
    pub fn columns(&self, p: usize) -> Result<Vec<usize>, DataError> {
        match self {
            CovariateSpec::Crude => Ok(Vec::new()),
            CovariateSpec::AllMainEffects => Ok((0..p).collect()),
            CovariateSpec::Subset(idx) => {
                if idx.is_empty() {
                    return Err(DataError::InvalidSpec("empty subset".into()));
                }
                let mut seen = vec![false; p];
                for &j in idx {
                    if j >= p {
                        return Err(DataError::InvalidSpec(format!(
                            "index {j} out of range for {p} covariates"
                        )));
                    }
                    if std::mem::replace(&mut seen[j], true) {
                        return Err(DataError::InvalidSpec(format!("duplicate index {j}")));
                    }
                }
                Ok(idx.clone())
            }
        }
    }

    /// Number of mean-model coefficients for a dataset with `p` covariates.
    pub fn n_params(&self, p: usize) -> Result<usize, DataError> {
        Ok(self.columns(p)?.len() + 2)
    }

    pub fn is_crude(&self) -> bool {
        matches!(self, CovariateSpec::Crude)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<ClusterDataset, DataError> {
        ClusterDataset::read_csv(s.as_bytes())
    }

    #[test]
    fn six_rows_three_clusters() {
        let ds = parse(
            "cluster_id,treatment,outcome,age\n\
             a,1,0,1.5\na,1,1,2\nb,0,0,3\nb,0,0,-1\nc,1,1,0\nc,1,0,0.25\n",
        )
        .unwrap();
        assert_eq!(ds.n_clusters(), 3);
        assert!(ds.clusters().iter().all(|c| c.size() == 2));
        assert_eq!(ds.covariate_names(), ["age"]);
        assert_eq!(ds.clusters()[0].id(), "a");
        assert_eq!(ds.clusters()[1].covariates()[(1, 0)], -1.0);
    }

    #[test]
    fn clusters_keep_first_appearance_order() {
        let ds = parse("cluster_id,treatment,outcome\nz,1,0\ny,0,1\nz,1,1\n").unwrap();
        let ids: Vec<_> = ds.clusters().iter().map(Cluster::id).collect();
        assert_eq!(ids, ["z", "y"]);
        assert_eq!(ds.clusters()[0].outcomes(), [0, 1]);
    }

    #[test]
    fn treatment_varying_within_cluster() {
        let err = parse("cluster_id,treatment,outcome\nA,0,0\nB,1,0\nA,1,1\n").unwrap_err();
        assert_eq!(err.to_string(), "treatment not constant within cluster A (row 4)");
    }

    #[test]
    fn non_binary_outcome_names_row() {
        let err = parse("cluster_id,treatment,outcome\nA,0,0\nB,1,2\n").unwrap_err();
        match err {
            DataError::NotBinary { row, column, .. } => {
                assert_eq!(row, 3);
                assert_eq!(column, "outcome");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn other_input_errors() {
        assert!(matches!(parse(""), Err(DataError::EmptyFile)));
        assert!(matches!(
            parse("cluster_id,outcome\nA,1\n"),
            Err(DataError::MissingColumn("treatment"))
        ));
        assert!(matches!(
            parse("cluster_id,treatment,outcome,x\nA,0,0,abc\nB,1,0,1\n"),
            Err(DataError::BadCovariate { row: 2, .. })
        ));
        assert!(matches!(
            parse("cluster_id,treatment,outcome,x\nA,0,0,\nB,1,0,1\n"),
            Err(DataError::BadCovariate { row: 2, .. })
        ));
        assert!(matches!(
            parse("cluster_id,treatment,outcome\nA,0,0\n"),
            Err(DataError::TooFewClusters(1))
        ));
        assert!(matches!(
            parse("cluster_id,treatment,outcome\n"),
            Err(DataError::NoRows)
        ));
    }

    fn toy() -> ClusterDataset {
        let c1 = Cluster::new(
            "a",
            1,
            vec![0, 1, 0],
            DMatrix::from_row_slice(3, 3, &[1., 2., 3., 4., 5., 6., 7., 8., 9.]),
        )
        .unwrap();
        let c2 = Cluster::new("b", 0, vec![1], DMatrix::from_row_slice(1, 3, &[0.5, 0.25, 0.125])).unwrap();
        ClusterDataset::new(vec![c1, c2], vec!["x1".into(), "x2".into(), "x3".into()]).unwrap()
    }

    #[test]
    fn design_column_layout() {
        let ds = toy();
        let crude = ds.design_matrices(&CovariateSpec::Crude).unwrap();
        assert_eq!(crude[0].shape(), (3, 2));
        assert!(crude[0].row_iter().all(|r| r[0] == 1.0 && r[1] == 1.0));
        assert_eq!(crude[1].row(0).iter().copied().collect::<Vec<_>>(), [1.0, 0.0]);

        let full = ds.design_matrices(&CovariateSpec::AllMainEffects).unwrap();
        assert_eq!(full[0].shape(), (3, 5));
        assert_eq!(full[0].row(1).iter().copied().collect::<Vec<_>>(), [1., 4., 5., 6., 1.]);

        let sub = ds.design_matrices(&CovariateSpec::Subset(vec![1])).unwrap();
        assert_eq!(sub[0].row(2).iter().copied().collect::<Vec<_>>(), [1., 8., 1.]);
    }

    #[test]
    fn spec_validation() {
        assert!(CovariateSpec::Subset(vec![3]).columns(3).is_err());
        assert!(CovariateSpec::Subset(vec![1, 1]).columns(3).is_err());
        assert!(CovariateSpec::Subset(vec![]).columns(3).is_err());
        assert_eq!(CovariateSpec::Subset(vec![2, 0]).n_params(3).unwrap(), 4);
    }

    #[test]
    fn crude_design_ignores_covariates() {
        let ds = toy();
        let mut clusters = ds.clusters().to_vec();
        clusters[0].covariates.fill(42.0);
        let perturbed = ClusterDataset::new(clusters, ds.covariate_names().to_vec()).unwrap();
        assert_eq!(
            ds.design_matrices(&CovariateSpec::Crude).unwrap(),
            perturbed.design_matrices(&CovariateSpec::Crude).unwrap()
        );
    }

    #[test]
    fn csv_round_trip() {
        let ds = toy();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = ClusterDataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn select_covariates_reorders() {
        let ds = toy().select_covariates(&["x3", "x1"]).unwrap();
        assert_eq!(ds.covariate_names(), ["x3", "x1"]);
        assert_eq!(
            ds.clusters()[0].covariates().row(1).iter().copied().collect::<Vec<_>>(),
            [6., 4.]
        );
        assert!(toy().select_covariates(&["x4"]).is_err());
        assert!(toy().select_covariates(&["x1", "x1"]).is_err());
    }
}
