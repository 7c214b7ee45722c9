//! Dataset representation, CSV ingestion and covariate scaling.
//!
//! A [`Dataset`] holds, per subject: the covariate row (continuous values
//! rescaled to `[0,1]`, categorical values as level indices), the binary
//! assignment `a`, the observed receipt `r_obs` and the (possibly missing)
//! binary outcome `y_obs`. One-sided noncompliance means `a = 0` forces
//! `r_obs = 0`, and for `a = 1` subjects the compliance status is observed
//! and equal to `r_obs`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trees::CovKind;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("column `{0}` not found in CSV header")]
    MissingColumn(String),
    #[error("row {row}, column `{col}`: {msg}")]
    Parse { row: usize, col: String, msg: String },
    #[error("row {row}: one-sided noncompliance violated (a=0 but r=1)")]
    OneSidedViolation { row: usize },
    #[error("covariate `{0}` is constant; cannot scale a degenerate column")]
    DegenerateColumn(String),
    #[error("no treated subjects; compliance rate undefined")]
    NoTreated,
    #[error("no non-missing outcomes")]
    NoOutcomes,
    #[error("categorical covariate `{0}` has {1} levels; at most 64 supported")]
    TooManyLevels(String, usize),
    #[error("{0}")]
    Invalid(String),
}

/// Declared kind of a covariate column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CovariateKind {
    /// Real-valued; min-max scaled to `[0,1]`.
    Continuous,
    /// Ordered categorical with levels `0..n_levels`; the level index is
    /// rescaled to `[0,1]` and split like a continuous covariate.
    Ordered { n_levels: usize },
    /// Unordered categorical with named levels.
    Categorical { levels: Vec<String> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: CovariateKind,
}

/// Schema handed to [`load_csv`]: covariate declarations plus the names of
/// the assignment / receipt / outcome columns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaSpec {
    pub covariates: Vec<ColumnSpec>,
    pub assignment: String,
    pub receipt: String,
    pub outcome: String,
}

/// Min-max parameters used to scale a continuous column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleParams {
    pub min: f64,
    pub max: f64,
}

impl ScaleParams {
    pub fn scale(&self, raw: f64) -> f64 {
        (raw - self.min) / (self.max - self.min)
    }

    pub fn unscale(&self, scaled: f64) -> f64 {
        self.min + scaled * (self.max - self.min)
    }
}

/// Immutable dataset; safe to share read-only across parallel chains.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: Vec<ColumnSpec>,
    /// Row-major `n x p` covariate matrix, continuous columns scaled.
    x: Vec<f64>,
    n: usize,
    p: usize,
    a: Vec<u8>,
    r_obs: Vec<u8>,
    y: Vec<u8>,
    y_missing: Vec<bool>,
    /// Per covariate: `Some` for scaled (continuous / ordered) columns.
    pub scale_params: Vec<Option<ScaleParams>>,
    /// Non-fatal issues encountered at load time (dropped columns, rows).
    pub warnings: Vec<String>,
}

impl Dataset {
    /// Assemble a dataset from already-parsed columns. Continuous and
    /// ordered covariates are scaled here; constant columns are dropped
    /// with a warning.
    pub fn assemble(
        schema: Vec<ColumnSpec>,
        columns: Vec<Vec<f64>>,
        a: Vec<u8>,
        r_obs: Vec<u8>,
        y: Vec<Option<u8>>,
    ) -> Result<Dataset, DataError> {
        let n = a.len();
        assert_eq!(r_obs.len(), n);
        assert_eq!(y.len(), n);
        for (i, (&ai, &ri)) in a.iter().zip(&r_obs).enumerate() {
            if ai == 0 && ri == 1 {
                return Err(DataError::OneSidedViolation { row: i + 1 });
            }
        }

        let mut warnings = Vec::new();
        let mut kept_schema = Vec::new();
        let mut kept_cols: Vec<Vec<f64>> = Vec::new();
        let mut scale_params = Vec::new();
        for (spec, mut col) in schema.into_iter().zip(columns) {
            assert_eq!(col.len(), n);
            match &spec.kind {
                CovariateKind::Continuous => match scale_covariate(&col) {
                    Ok((scaled, params)) => {
                        kept_cols.push(scaled);
                        scale_params.push(Some(params));
                        kept_schema.push(spec);
                    }
                    Err(_) => {
                        warnings.push(format!(
                            "dropping constant continuous covariate `{}`",
                            spec.name
                        ));
                    }
                },
                CovariateKind::Ordered { n_levels } => {
                    // Ordered categoricals split as continuous on the level
                    // index rescaled to [0,1] over the declared range.
                    let params = ScaleParams {
                        min: 0.0,
                        max: (*n_levels - 1).max(1) as f64,
                    };
                    for v in col.iter_mut() {
                        *v = params.scale(*v);
                    }
                    kept_cols.push(col);
                    scale_params.push(Some(params));
                    kept_schema.push(spec);
                }
                CovariateKind::Categorical { levels } => {
                    if levels.len() > 64 {
                        return Err(DataError::TooManyLevels(spec.name.clone(), levels.len()));
                    }
                    kept_cols.push(col);
                    scale_params.push(None);
                    kept_schema.push(spec);
                }
            }
        }

        let p = kept_cols.len();
        let mut x = vec![0.0; n * p];
        for (j, col) in kept_cols.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                x[i * p + j] = v;
            }
        }
        let (y_val, y_missing): (Vec<u8>, Vec<bool>) =
            y.iter().map(|v| (v.unwrap_or(0), v.is_none())).unzip();
        Ok(Dataset {
            schema: kept_schema,
            x,
            n,
            p,
            a,
            r_obs,
            y: y_val,
            y_missing,
            scale_params,
            warnings,
        })
    }

    /// A dataset with `p` continuous covariates and no subjects. The
    /// sampler falls back to the prior on such data, which is useful for
    /// prior-recovery checks.
    pub fn prior_only(p: usize) -> Dataset {
        Dataset {
            schema: (0..p)
                .map(|j| ColumnSpec {
                    name: format!("x{}", j + 1),
                    kind: CovariateKind::Continuous,
                })
                .collect(),
            x: Vec::new(),
            n: 0,
            p,
            a: Vec::new(),
            r_obs: Vec::new(),
            y: Vec::new(),
            y_missing: Vec::new(),
            scale_params: vec![Some(ScaleParams { min: 0.0, max: 1.0 }); p],
            warnings: Vec::new(),
        }
    }

    /// Construct from an all-continuous raw matrix (used by the synthetic
    /// benchmarks). `raw` is row-major `n x p` on any scale.
    pub fn from_continuous_matrix(
        raw: &[f64],
        n: usize,
        p: usize,
        a: Vec<u8>,
        r_obs: Vec<u8>,
        y: Vec<Option<u8>>,
    ) -> Result<Dataset, DataError> {
        let schema = (0..p)
            .map(|j| ColumnSpec {
                name: format!("x{}", j + 1),
                kind: CovariateKind::Continuous,
            })
            .collect();
        let columns = (0..p)
            .map(|j| (0..n).map(|i| raw[i * p + j]).collect())
            .collect();
        Dataset::assemble(schema, columns, a, r_obs, y)
    }

    pub fn n_subjects(&self) -> usize {
        self.n
    }

    pub fn n_covariates(&self) -> usize {
        self.p
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn matrix(&self) -> &[f64] {
        &self.x
    }

    pub fn assignment(&self, i: usize) -> u8 {
        self.a[i]
    }

    pub fn receipt(&self, i: usize) -> u8 {
        self.r_obs[i]
    }

    /// Observed outcome; `None` when missing.
    pub fn outcome(&self, i: usize) -> Option<u8> {
        if self.y_missing[i] {
            None
        } else {
            Some(self.y[i])
        }
    }

    pub fn outcome_missing(&self, i: usize) -> bool {
        self.y_missing[i]
    }

    /// Observed compliance; present iff `a = 1`, where it equals `r_obs`.
    pub fn c_obs(&self, i: usize) -> Option<u8> {
        if self.a[i] == 1 {
            Some(self.r_obs[i])
        } else {
            None
        }
    }

    /// Covariate kinds as seen by the tree machinery.
    pub fn tree_kinds(&self) -> Vec<CovKind> {
        self.schema
            .iter()
            .map(|c| match &c.kind {
                CovariateKind::Continuous | CovariateKind::Ordered { .. } => CovKind::Continuous,
                CovariateKind::Categorical { levels } => CovKind::Categorical {
                    n_levels: levels.len() as u8,
                },
            })
            .collect()
    }
}

/// Min-max scale a raw continuous column to `[0,1]`.
pub fn scale_covariate(raw: &[f64]) -> Result<(Vec<f64>, ScaleParams), DataError> {
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return Err(DataError::DegenerateColumn(String::new()));
    }
    let params = ScaleParams { min, max };
    Ok((raw.iter().map(|&v| params.scale(v)).collect(), params))
}

/// `(y_bar, c_bar)`: mean non-missing outcome over all subjects, and the
/// observed compliance rate among treated subjects.
pub fn observed_rates(ds: &Dataset) -> Result<(f64, f64), DataError> {
    let mut y_sum = 0.0;
    let mut y_n = 0usize;
    let mut c_sum = 0.0;
    let mut n_treated = 0usize;
    for i in 0..ds.n_subjects() {
        if let Some(y) = ds.outcome(i) {
            y_sum += y as f64;
            y_n += 1;
        }
        if ds.assignment(i) == 1 {
            c_sum += ds.receipt(i) as f64;
            n_treated += 1;
        }
    }
    if n_treated == 0 {
        return Err(DataError::NoTreated);
    }
    if y_n == 0 {
        return Err(DataError::NoOutcomes);
    }
    Ok((y_sum / y_n as f64, c_sum / n_treated as f64))
}

/// Number of treated subjects, used to clamp boundary rates before probit
/// inversion.
pub fn n_treated(ds: &Dataset) -> usize {
    (0..ds.n_subjects()).filter(|&i| ds.assignment(i) == 1).count()
}

fn parse_binary(cell: &str, row: usize, col: &str) -> Result<Option<u8>, DataError> {
    match cell.trim() {
        "" => Ok(None),
        "0" => Ok(Some(0)),
        "1" => Ok(Some(1)),
        other => Err(DataError::Parse {
            row,
            col: col.to_string(),
            msg: format!("expected 0/1/empty, got `{other}`"),
        }),
    }
}

/// Load a CSV file against a declared schema.
///
/// Rows with a missing outcome are retained (they still inform the
/// compliance model) but flagged so the outcome likelihood skips them.
/// Rows with a missing covariate cell are dropped with a warning.
pub fn load_csv(path: &Path, schema: &SchemaSpec) -> Result<Dataset, DataError> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let a_idx = find(&schema.assignment)?;
    let r_idx = find(&schema.receipt)?;
    let y_idx = find(&schema.outcome)?;
    let cov_idx: Vec<usize> = schema
        .covariates
        .iter()
        .map(|c| find(&c.name))
        .collect::<Result<_, _>>()?;

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); schema.covariates.len()];
    let mut a = Vec::new();
    let mut r_obs = Vec::new();
    let mut y = Vec::new();
    let mut dropped_rows = 0usize;

    'rows: for (row_i, record) in reader.records().enumerate() {
        let record = record?;
        let row = row_i + 2; // 1-based, after header
        let mut row_covs = Vec::with_capacity(cov_idx.len());
        for (spec, &ci) in schema.covariates.iter().zip(&cov_idx) {
            let cell = record.get(ci).unwrap_or("").trim();
            if cell.is_empty() {
                dropped_rows += 1;
                continue 'rows;
            }
            let v = match &spec.kind {
                CovariateKind::Continuous => cell.parse::<f64>().map_err(|_| DataError::Parse {
                    row,
                    col: spec.name.clone(),
                    msg: format!("expected a number, got `{cell}`"),
                })?,
                CovariateKind::Ordered { n_levels } => {
                    let lv = cell.parse::<usize>().map_err(|_| DataError::Parse {
                        row,
                        col: spec.name.clone(),
                        msg: format!("expected a level index, got `{cell}`"),
                    })?;
                    if lv >= *n_levels {
                        return Err(DataError::Parse {
                            row,
                            col: spec.name.clone(),
                            msg: format!("level {lv} out of range 0..{n_levels}"),
                        });
                    }
                    lv as f64
                }
                CovariateKind::Categorical { levels } => {
                    match levels.iter().position(|l| l == cell) {
                        Some(lv) => lv as f64,
                        None => {
                            return Err(DataError::Parse {
                                row,
                                col: spec.name.clone(),
                                msg: format!("undeclared level `{cell}`"),
                            })
                        }
                    }
                }
            };
            row_covs.push(v);
        }
        let ai = parse_binary(record.get(a_idx).unwrap_or(""), row, &schema.assignment)?
            .ok_or_else(|| DataError::Parse {
                row,
                col: schema.assignment.clone(),
                msg: "assignment may not be missing".into(),
            })?;
        let ri = parse_binary(record.get(r_idx).unwrap_or(""), row, &schema.receipt)?
            .ok_or_else(|| DataError::Parse {
                row,
                col: schema.receipt.clone(),
                msg: "receipt may not be missing".into(),
            })?;
        if ai == 0 && ri == 1 {
            return Err(DataError::OneSidedViolation { row });
        }
        let yi = parse_binary(record.get(y_idx).unwrap_or(""), row, &schema.outcome)?;
        for (col, v) in columns.iter_mut().zip(row_covs) {
            col.push(v);
        }
        a.push(ai);
        r_obs.push(ri);
        y.push(yi);
    }

    let mut ds = Dataset::assemble(schema.covariates.clone(), columns, a, r_obs, y)?;
    if dropped_rows > 0 {
        ds.warnings.push(format!(
            "dropped {dropped_rows} rows with missing covariate cells"
        ));
    }
    Ok(ds)
}
