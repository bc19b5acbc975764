//! Core data types: observed trial datasets, potential-outcome datasets for
//! simulation, contrast specifications, and CSV ingestion.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PI_SUM_TOL: f64 = 1e-12;

/// Joint stratum levels: the observed combinations of the strata columns.
///
/// Levels are indexed 0..L in lexicographic order of their value tuples, so
/// the indexing is a deterministic function of the file contents. Unobserved
/// combinations get no index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrataIndex {
    /// Strata column names; empty means a single implicit level.
    pub columns: Vec<String>,
    /// Value tuple for each joint level, `levels.len() == L`.
    pub levels: Vec<Vec<String>>,
    /// Joint level of each row, values in `0..L`.
    pub of_row: Vec<usize>,
}

impl StrataIndex {
    /// Single-level index for a dataset without strata columns.
    pub fn trivial(n: usize) -> Self {
        StrataIndex {
            columns: Vec::new(),
            levels: vec![vec!["all".to_string()]],
            of_row: vec![0; n],
        }
    }

    /// Build from per-row value tuples (one entry per strata column).
    pub fn from_rows(columns: Vec<String>, rows: Vec<Vec<String>>) -> Self {
        if columns.is_empty() {
            return StrataIndex::trivial(rows.len());
        }
        let mut level_of: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        for row in &rows {
            let next = level_of.len();
            level_of.entry(row.clone()).or_insert(next);
        }
        // re-number in lexicographic order (BTreeMap iterates sorted)
        let levels: Vec<Vec<String>> = level_of.keys().cloned().collect();
        let index_of: BTreeMap<&Vec<String>, usize> =
            levels.iter().enumerate().map(|(i, v)| (v, i)).collect();
        let of_row = rows.iter().map(|r| index_of[r]).collect();
        StrataIndex { columns, levels, of_row }
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    /// Human-readable label of a joint level, e.g. `"1|male"`.
    pub fn label(&self, level: usize) -> String {
        self.levels[level].join("|")
    }
}

/// Observed trial data: the single input to every estimator.
#[derive(Debug, Clone)]
pub struct TrialDataset {
    /// Number of arms.
    pub k: usize,
    /// Target allocation proportions, positive and summing to one.
    pub pi: Vec<f64>,
    /// Assigned arm per patient, 0-based (`0..k`). CSV files carry 1-based values.
    pub arm: Vec<usize>,
    /// Joint stratum structure.
    pub strata: StrataIndex,
    /// Covariates, one row per patient (column-major storage).
    pub covariates: DMatrix<f64>,
    pub covariate_names: Vec<String>,
    /// Observed response `y_{A_i, i}`.
    pub response: Vec<f64>,
}

impl TrialDataset {
    pub fn new(
        pi: Vec<f64>,
        arm: Vec<usize>,
        strata: StrataIndex,
        covariates: DMatrix<f64>,
        covariate_names: Vec<String>,
        response: Vec<f64>,
    ) -> Result<Self> {
        let d = TrialDataset { k: pi.len(), pi, arm, strata, covariates, covariate_names, response };
        d.validate()?;
        Ok(d)
    }

    pub fn n(&self) -> usize {
        self.response.len()
    }

    pub fn n_strata(&self) -> usize {
        self.strata.n_levels()
    }

    fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        validate_pi(&self.pi)?;
        if self.arm.len() != n || self.strata.of_row.len() != n || self.covariates.nrows() != n {
            return Err(Error::InvalidSchema(format!(
                "inconsistent row counts: response {n}, arm {}, strata {}, covariates {}",
                self.arm.len(),
                self.strata.of_row.len(),
                self.covariates.nrows()
            )));
        }
        if self.covariates.ncols() != self.covariate_names.len() {
            return Err(Error::InvalidSchema("covariate name count != column count".into()));
        }
        for (i, &a) in self.arm.iter().enumerate() {
            if a >= self.k {
                return Err(Error::ArmOutOfRange {
                    row: i + 1,
                    value: (a + 1).to_string(),
                    k: self.k,
                });
            }
        }
        for (i, &y) in self.response.iter().enumerate() {
            if !y.is_finite() {
                return Err(Error::BadCell {
                    row: i + 1,
                    column: "response".into(),
                    message: "non-finite value".into(),
                });
            }
        }
        Ok(())
    }

    /// Row indices assigned to `arm` (0-based).
    pub fn arm_rows(&self, arm: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.arm[i] == arm).collect()
    }

    /// Patient counts per arm.
    pub fn arm_counts(&self) -> Vec<usize> {
        let mut c = vec![0usize; self.k];
        for &a in &self.arm {
            c[a] += 1;
        }
        c
    }

    /// Canonical CSV re-emission: header `arm,<strata...>,<covariates...>,response`,
    /// arms 1-based, floats in shortest round-trip form. Loading the emitted text
    /// with the matching schema and re-emitting reproduces it byte for byte.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        out.push_str("arm");
        for c in &self.strata.columns {
            let _ = write!(out, ",{c}");
        }
        for c in &self.covariate_names {
            let _ = write!(out, ",{c}");
        }
        out.push_str(",response\n");
        for i in 0..self.n() {
            let _ = write!(out, "{}", self.arm[i] + 1);
            if !self.strata.columns.is_empty() {
                for v in &self.strata.levels[self.strata.of_row[i]] {
                    let _ = write!(out, ",{v}");
                }
            }
            for j in 0..self.covariates.ncols() {
                let _ = write!(out, ",{}", self.covariates[(i, j)]);
            }
            let _ = writeln!(out, ",{}", self.response[i]);
        }
        out
    }

    /// The schema that round-trips `to_csv_string` output.
    pub fn canonical_schema(&self) -> CsvSchema {
        CsvSchema {
            response: "response".into(),
            arm: "arm".into(),
            strata: self.strata.columns.clone(),
            covariates: self.covariate_names.clone(),
            one_hot: Vec::new(),
            pi: self.pi.clone(),
        }
    }
}

pub(crate) fn validate_pi(pi: &[f64]) -> Result<()> {
    if pi.is_empty() {
        return Err(Error::InvalidAllocation("pi is empty".into()));
    }
    if pi.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
        return Err(Error::InvalidAllocation(format!("every pi_a must be > 0, got {pi:?}")));
    }
    let s: f64 = pi.iter().sum();
    if (s - 1.0).abs() > PI_SUM_TOL {
        return Err(Error::InvalidAllocation(format!("sum(pi) = {s}, must be 1 within 1e-12")));
    }
    Ok(())
}

/// Simulation-only dataset carrying the full potential-response vector per patient.
#[derive(Debug, Clone)]
pub struct PotentialOutcomeDataset {
    pub covariates: DMatrix<f64>,
    pub covariate_names: Vec<String>,
    pub strata: StrataIndex,
    /// Per-patient levels of each randomization margin (used by minimization).
    pub margins: Vec<Vec<usize>>,
    /// `n x k` matrix of potential responses `(y_1, ..., y_k)`.
    pub potential: DMatrix<f64>,
}

impl PotentialOutcomeDataset {
    pub fn n(&self) -> usize {
        self.potential.nrows()
    }

    pub fn k(&self) -> usize {
        self.potential.ncols()
    }

    /// Reveal the observed dataset for a vector of assignments (0-based).
    pub fn observe(&self, arm: Vec<usize>, pi: Vec<f64>) -> Result<TrialDataset> {
        if arm.len() != self.n() {
            return Err(Error::InvalidSchema("assignment length != n".into()));
        }
        let response = arm.iter().enumerate().map(|(i, &a)| self.potential[(i, a)]).collect();
        TrialDataset::new(
            pi,
            arm,
            self.strata.clone(),
            self.covariates.clone(),
            self.covariate_names.clone(),
            response,
        )
    }
}

/// A function of the arm-mean vector to estimate and test.
///
/// Arm numbers are 1-based, matching CSV files and reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContrastSpec {
    /// `theta_b - theta_a`.
    Difference { a: usize, b: usize },
    /// `c' theta` with one coefficient per arm.
    Linear { c: Vec<f64> },
    /// `theta_b / theta_a`.
    RiskRatio { a: usize, b: usize },
    /// `log(theta_b / theta_a)`.
    LogRatio { a: usize, b: usize },
}

impl ContrastSpec {
    pub fn difference(a: usize, b: usize) -> Self {
        ContrastSpec::Difference { a, b }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        let check = |a: usize, b: usize| {
            if a == 0 || b == 0 || a > k || b > k {
                Err(Error::BadContrast(format!("arm numbers must be in 1..={k}, got ({a}, {b})")))
            } else {
                Ok(())
            }
        };
        match self {
            ContrastSpec::Difference { a, b } | ContrastSpec::RiskRatio { a, b } | ContrastSpec::LogRatio { a, b } => check(*a, *b),
            ContrastSpec::Linear { c } => {
                if c.len() != k {
                    Err(Error::BadContrast(format!("linear contrast has {} coefficients, need {k}", c.len())))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            ContrastSpec::Difference { a, b } => format!("difference({a},{b})"),
            ContrastSpec::Linear { c } => format!("linear({c:?})"),
            ContrastSpec::RiskRatio { a, b } => format!("risk_ratio({a},{b})"),
            ContrastSpec::LogRatio { a, b } => format!("log_ratio({a},{b})"),
        }
    }
}

/// Column-role mapping for [`load_csv`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub response: String,
    pub arm: String,
    #[serde(default)]
    pub strata: Vec<String>,
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Categorical covariate columns to expand into indicator columns
    /// (one per observed level except the lexicographically first).
    #[serde(default)]
    pub one_hot: Vec<String>,
    pub pi: Vec<f64>,
}

impl CsvSchema {
    fn validate(&self) -> Result<()> {
        validate_pi(&self.pi)?;
        let mut all: Vec<&String> = vec![&self.response, &self.arm];
        all.extend(self.strata.iter());
        all.extend(self.covariates.iter());
        all.extend(self.one_hot.iter());
        for (i, a) in all.iter().enumerate() {
            for b in all.iter().skip(i + 1) {
                if a == b {
                    return Err(Error::InvalidSchema(format!("column `{a}` mapped to more than one role")));
                }
            }
        }
        Ok(())
    }
}

/// Load an RFC-4180 style CSV file (UTF-8, header row required).
///
/// Multiple strata columns are cross-classified into a single joint level
/// index; covariates are parsed as dense reals except `one_hot` columns,
/// which are expanded into indicators. Missing or unparsable cells are
/// rejected, never imputed.
pub fn load_csv<P: AsRef<Path>>(path: P, schema: &CsvSchema) -> Result<TrialDataset> {
    let text = std::fs::read_to_string(path)?;
    load_csv_str(&text, schema)
}

/// Same as [`load_csv`] but from in-memory text.
pub fn load_csv_str(text: &str, schema: &CsvSchema) -> Result<TrialDataset> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let col = |name: &String| -> Result<usize> {
        header.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn(name.clone()))
    };
    let response_col = col(&schema.response)?;
    let arm_col = col(&schema.arm)?;
    let strata_cols: Vec<usize> = schema.strata.iter().map(col).collect::<Result<_>>()?;
    let cov_cols: Vec<usize> = schema.covariates.iter().map(col).collect::<Result<_>>()?;
    let onehot_cols: Vec<usize> = schema.one_hot.iter().map(col).collect::<Result<_>>()?;

    let k = schema.pi.len();
    let mut arm = Vec::new();
    let mut response = Vec::new();
    let mut strata_rows: Vec<Vec<String>> = Vec::new();
    let mut cov_rows: Vec<Vec<f64>> = Vec::new();
    let mut onehot_rows: Vec<Vec<String>> = Vec::new();

    for (ri, record) in reader.records().enumerate() {
        let row = ri + 1; // 1-based data row for messages
        let record = record?;
        let cell = |c: usize, name: &str| -> Result<String> {
            let v = record.get(c).map(|s| s.trim().to_string()).unwrap_or_default();
            if v.is_empty() {
                Err(Error::BadCell { row, column: name.to_string(), message: "missing value".into() })
            } else {
                Ok(v)
            }
        };
        let arm_raw = cell(arm_col, &schema.arm)?;
        let a: i64 = arm_raw.parse().map_err(|_| Error::ArmOutOfRange { row, value: arm_raw.clone(), k })?;
        if a < 1 || a as usize > k {
            return Err(Error::ArmOutOfRange { row, value: arm_raw, k });
        }
        arm.push(a as usize - 1);

        let y_raw = cell(response_col, &schema.response)?;
        let y: f64 = y_raw.parse().map_err(|_| Error::BadCell {
            row,
            column: schema.response.clone(),
            message: format!("cannot parse `{y_raw}` as a number"),
        })?;
        response.push(y);

        let mut srow = Vec::with_capacity(strata_cols.len());
        for (c, name) in strata_cols.iter().zip(&schema.strata) {
            srow.push(cell(*c, name)?);
        }
        strata_rows.push(srow);

        let mut crow = Vec::with_capacity(cov_cols.len());
        for (c, name) in cov_cols.iter().zip(&schema.covariates) {
            let raw = cell(*c, name)?;
            let v: f64 = raw.parse().map_err(|_| Error::BadCell {
                row,
                column: name.clone(),
                message: format!("cannot parse `{raw}` as a number"),
            })?;
            crow.push(v);
        }
        cov_rows.push(crow);

        let mut orow = Vec::with_capacity(onehot_cols.len());
        for (c, name) in onehot_cols.iter().zip(&schema.one_hot) {
            orow.push(cell(*c, name)?);
        }
        onehot_rows.push(orow);
    }

    let n = response.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }

    // one-hot expansion: indicator per observed level except the first
    let mut names = schema.covariates.clone();
    let mut extra: Vec<Vec<f64>> = Vec::new();
    for (j, name) in schema.one_hot.iter().enumerate() {
        let mut levels: Vec<String> = onehot_rows.iter().map(|r| r[j].clone()).collect();
        levels.sort();
        levels.dedup();
        for level in levels.iter().skip(1) {
            names.push(format!("{name}={level}"));
            extra.push(onehot_rows.iter().map(|r| if &r[j] == level { 1.0 } else { 0.0 }).collect());
        }
    }

    let d_cols = names.len();
    let mut covariates = DMatrix::zeros(n, d_cols);
    for i in 0..n {
        for (j, v) in cov_rows[i].iter().enumerate() {
            covariates[(i, j)] = *v;
        }
    }
    for (e, colvals) in extra.iter().enumerate() {
        for i in 0..n {
            covariates[(i, cov_rows[0].len() + e)] = colvals[i];
        }
    }

    let strata = StrataIndex::from_rows(schema.strata.clone(), strata_rows);
    TrialDataset::new(schema.pi.clone(), arm, strata, covariates, names, response)
}

/// One row of [`summarize_strata`]: counts for a joint stratum level.
#[derive(Debug, Clone, Serialize)]
pub struct StratumCounts {
    pub label: String,
    pub n: usize,
    pub per_arm: Vec<usize>,
}

/// Per-stratum patient counts `(z_l, n(z_l), n_1(z_l), ..., n_k(z_l))`.
pub fn summarize_strata(d: &TrialDataset) -> Vec<StratumCounts> {
    let mut rows: Vec<StratumCounts> = (0..d.n_strata())
        .map(|l| StratumCounts { label: d.strata.label(l), n: 0, per_arm: vec![0; d.k] })
        .collect();
    for i in 0..d.n() {
        let l = d.strata.of_row[i];
        rows[l].n += 1;
        rows[l].per_arm[d.arm[i]] += 1;
    }
    rows
}
