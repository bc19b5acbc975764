//! Per-arm working models for the conditional response mean, producing the
//! prediction matrices consumed by the estimators.
//!
//! Each arm is fit independently on its own patients, so treatment-by-
//! covariate interaction structure arises automatically. Strata indicators
//! are part of the default design for parametric families and can be
//! toggled off to study what happens when the stratum-conditional residual
//! mean is not constant.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::TrialDataset;
use crate::error::{Error, Result};
use crate::forest::{BaggedForest, ForestParams};
use crate::glm::{expit, fit_negbin, irls, GlmFit, Link};
use crate::linalg;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelFamily {
    /// Predicts identically zero; reduces AIPW to the sample mean.
    Zero,
    /// Per-arm least squares (ANHECOVA structure across arms).
    Linear,
    GlmIdentity,
    GlmLogistic,
    GlmPoisson,
    NegativeBinomial,
    Forest(ForestParams),
}

impl ModelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            ModelFamily::Zero => "zero",
            ModelFamily::Linear => "linear",
            ModelFamily::GlmIdentity => "glm_identity",
            ModelFamily::GlmLogistic => "glm_logistic",
            ModelFamily::GlmPoisson => "glm_poisson",
            ModelFamily::NegativeBinomial => "negative_binomial",
            ModelFamily::Forest(_) => "forest",
        }
    }

    /// Canonical-link GLM with an intercept: the fitted score equations force
    /// the raw residual sum to zero (prediction unbiasedness).
    pub fn is_canonical_glm(&self) -> bool {
        matches!(
            self,
            ModelFamily::Linear | ModelFamily::GlmIdentity | ModelFamily::GlmLogistic | ModelFamily::GlmPoisson
        )
    }
}

/// Which covariates enter the design and whether joint-strata indicators are
/// appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkingModelSpec {
    #[serde(flatten)]
    pub family: ModelFamily,
    /// Covariate columns by name; `None` means all columns.
    #[serde(default)]
    pub columns: Option<Vec<String>>,
    /// Append indicators for joint strata levels 2..L.
    #[serde(default = "default_include_strata")]
    pub include_strata: bool,
}

fn default_include_strata() -> bool {
    true
}

impl WorkingModelSpec {
    pub fn new(family: ModelFamily) -> Self {
        let include_strata = !matches!(family, ModelFamily::Forest(_) | ModelFamily::Zero);
        WorkingModelSpec { family, columns: None, include_strata }
    }

    pub fn zero() -> Self {
        Self::new(ModelFamily::Zero)
    }

    pub fn logistic() -> Self {
        Self::new(ModelFamily::GlmLogistic)
    }

    pub fn with_strata(mut self, include: bool) -> Self {
        self.include_strata = include;
        self
    }

    pub fn with_columns(mut self, columns: Vec<String>) -> Self {
        self.columns = Some(columns);
        self
    }
}

/// Resolved design: which covariate columns, whether strata indicators are
/// appended, and the level count they were defined against.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignLayout {
    pub column_indices: Vec<usize>,
    pub column_names: Vec<String>,
    pub include_strata: bool,
    pub n_strata_levels: usize,
    /// Intercept prepended (always true for parametric families).
    pub intercept: bool,
}

impl DesignLayout {
    fn resolve(spec: &WorkingModelSpec, d: &TrialDataset, intercept: bool) -> Result<Self> {
        let column_indices: Vec<usize> = match &spec.columns {
            None => (0..d.covariates.ncols()).collect(),
            Some(names) => names
                .iter()
                .map(|n| {
                    d.covariate_names
                        .iter()
                        .position(|c| c == n)
                        .ok_or_else(|| Error::ColumnMismatch(format!("no covariate column `{n}`")))
                })
                .collect::<Result<_>>()?,
        };
        let column_names = column_indices.iter().map(|&j| d.covariate_names[j].clone()).collect();
        Ok(DesignLayout {
            column_indices,
            column_names,
            include_strata: spec.include_strata,
            n_strata_levels: d.n_strata(),
            intercept,
        })
    }

    pub fn width(&self) -> usize {
        self.intercept as usize
            + self.column_indices.len()
            + if self.include_strata { self.n_strata_levels.saturating_sub(1) } else { 0 }
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.width());
        if self.intercept {
            names.push("(intercept)".into());
        }
        names.extend(self.column_names.iter().cloned());
        if self.include_strata {
            for l in 1..self.n_strata_levels {
                names.push(format!("z={l}"));
            }
        }
        names
    }

    /// Check column compatibility against a dataset before predicting.
    fn check(&self, d: &TrialDataset) -> Result<()> {
        for (&j, name) in self.column_indices.iter().zip(&self.column_names) {
            match d.covariate_names.get(j) {
                Some(n) if n == name => {}
                _ => {
                    return Err(Error::ColumnMismatch(format!(
                        "expected column `{name}` at index {j}"
                    )))
                }
            }
        }
        if self.include_strata && d.n_strata() != self.n_strata_levels {
            return Err(Error::ColumnMismatch(format!(
                "fit used {} strata levels, dataset has {}",
                self.n_strata_levels,
                d.n_strata()
            )));
        }
        Ok(())
    }

    pub fn build(&self, d: &TrialDataset, rows: &[usize]) -> DMatrix<f64> {
        let p = self.width();
        let mut x = DMatrix::zeros(rows.len(), p);
        for (ri, &i) in rows.iter().enumerate() {
            let mut c = 0;
            if self.intercept {
                x[(ri, c)] = 1.0;
                c += 1;
            }
            for &j in &self.column_indices {
                x[(ri, c)] = d.covariates[(i, j)];
                c += 1;
            }
            if self.include_strata {
                let z = d.strata.of_row[i];
                for l in 1..self.n_strata_levels {
                    x[(ri, c)] = (z == l) as u8 as f64;
                    c += 1;
                }
            }
        }
        x
    }
}

#[derive(Debug, Clone)]
pub struct ArmFit {
    pub coef: Option<DVector<f64>>,
    pub forest: Option<BaggedForest>,
    pub dispersion: Option<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
enum FitNode {
    Zero,
    PerArm { family: ModelFamily, layout: DesignLayout, arms: Vec<ArmFit> },
    /// Predictions replaced by per-arm linear combinations of the base
    /// predictions: column a of the output is `base * gamma[:, a]`.
    Calibrated { base: Box<FitNode>, gamma: DMatrix<f64> },
    /// Per-(arm, stratum) additive corrections on top of the base.
    ZCalibrated { base: Box<FitNode>, correction: DMatrix<f64> },
}

/// A fitted set of per-arm conditional-mean functions.
#[derive(Debug, Clone)]
pub struct WorkingModelFit {
    pub k: usize,
    node: FitNode,
    /// Fold the fit belongs to under cross-fitting.
    pub fold: Option<usize>,
}

impl WorkingModelFit {
    pub fn zero(k: usize) -> Self {
        WorkingModelFit { k, node: FitNode::Zero, fold: None }
    }

    pub fn family_name(&self) -> String {
        fn name(node: &FitNode) -> String {
            match node {
                FitNode::Zero => "zero".into(),
                FitNode::PerArm { family, .. } => family.name().into(),
                FitNode::Calibrated { base, .. } => format!("lc({})", name(base)),
                FitNode::ZCalibrated { base, .. } => format!("zcal({})", name(base)),
            }
        }
        name(&self.node)
    }

    pub fn is_z_calibrated(&self) -> bool {
        matches!(self.node, FitNode::ZCalibrated { .. })
    }

    /// Whether the universal variance path is certified for this fit:
    /// either a canonical-link GLM with an intercept and the full joint-strata
    /// indicators in the design, or a stratum-calibrated fit (condition (U)
    /// by construction). Linear recombination loses the certificate.
    pub fn u_certified(&self) -> bool {
        match &self.node {
            FitNode::Zero => false,
            FitNode::PerArm { family, layout, .. } => {
                family.is_canonical_glm() && layout.intercept && layout.include_strata
            }
            FitNode::Calibrated { .. } => false,
            FitNode::ZCalibrated { .. } => true,
        }
    }

    /// Predict the n x k matrix of per-arm conditional means for every row.
    pub fn predict(&self, d: &TrialDataset) -> Result<DMatrix<f64>> {
        let rows: Vec<usize> = (0..d.n()).collect();
        self.predict_rows(d, &rows)
    }

    /// Predict for a subset of rows (order preserved).
    pub fn predict_rows(&self, d: &TrialDataset, rows: &[usize]) -> Result<DMatrix<f64>> {
        let m = predict_node(&self.node, self.k, d, rows)?;
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::BadResponse {
                family: self.family_name(),
                message: "non-finite prediction".into(),
            });
        }
        Ok(m)
    }

    /// Per-arm coefficient records for inspection (JSON).
    pub fn coefficient_json(&self) -> serde_json::Value {
        fn node_json(node: &FitNode, k: usize) -> serde_json::Value {
            match node {
                FitNode::Zero => json!({"kind": "zero"}),
                FitNode::PerArm { family, layout, arms } => {
                    let names = layout.names();
                    let arms_json: Vec<serde_json::Value> = arms
                        .iter()
                        .enumerate()
                        .map(|(a, fit)| {
                            json!({
                                "arm": a + 1,
                                "coefficients": fit.coef.as_ref().map(|c| {
                                    names.iter().cloned().zip(c.iter().cloned()).collect::<Vec<(String, f64)>>()
                                }),
                                "dispersion": fit.dispersion,
                                "iterations": fit.iterations,
                                "gradient_norm": fit.grad_norm,
                            })
                        })
                        .collect();
                    json!({"kind": family.name(), "arms": arms_json})
                }
                FitNode::Calibrated { base, gamma } => json!({
                    "kind": "linear_calibration",
                    "gamma": (0..k).map(|a| gamma.column(a).iter().cloned().collect::<Vec<f64>>()).collect::<Vec<_>>(),
                    "base": node_json(base, k),
                }),
                FitNode::ZCalibrated { base, correction } => json!({
                    "kind": "z_calibration",
                    "corrections": (0..k).map(|a| correction.row(a).iter().cloned().collect::<Vec<f64>>()).collect::<Vec<_>>(),
                    "base": node_json(base, k),
                }),
            }
        }
        node_json(&self.node, self.k)
    }

    pub(crate) fn calibrated(self, gamma: DMatrix<f64>) -> Self {
        WorkingModelFit { k: self.k, node: FitNode::Calibrated { base: Box::new(self.node), gamma }, fold: self.fold }
    }
}

fn predict_node(node: &FitNode, k: usize, d: &TrialDataset, rows: &[usize]) -> Result<DMatrix<f64>> {
    match node {
        FitNode::Zero => Ok(DMatrix::zeros(rows.len(), k)),
        FitNode::PerArm { family, layout, arms } => {
            layout.check(d)?;
            let mut out = DMatrix::zeros(rows.len(), k);
            match family {
                ModelFamily::Forest(_) => {
                    let x = layout_features(layout, d, rows);
                    for (a, arm_fit) in arms.iter().enumerate() {
                        let forest = arm_fit.forest.as_ref().expect("forest arm fit");
                        for ri in 0..rows.len() {
                            out[(ri, a)] = forest.predict_row(&x, ri);
                        }
                    }
                }
                _ => {
                    let x = layout.build(d, rows);
                    for (a, arm_fit) in arms.iter().enumerate() {
                        let coef = arm_fit.coef.as_ref().expect("parametric arm fit");
                        let eta = &x * coef;
                        for ri in 0..rows.len() {
                            out[(ri, a)] = apply_inverse_link(family, eta[ri]);
                        }
                    }
                }
            }
            Ok(out)
        }
        FitNode::Calibrated { base, gamma } => {
            let m = predict_node(base, k, d, rows)?;
            Ok(&m * gamma)
        }
        FitNode::ZCalibrated { base, correction } => {
            let mut m = predict_node(base, k, d, rows)?;
            for (ri, &i) in rows.iter().enumerate() {
                let z = d.strata.of_row[i];
                for a in 0..k {
                    m[(ri, a)] += correction[(a, z)];
                }
            }
            Ok(m)
        }
    }
}

/// Feature matrix for the forest (no intercept column).
fn layout_features(layout: &DesignLayout, d: &TrialDataset, rows: &[usize]) -> DMatrix<f64> {
    let forest_layout = DesignLayout { intercept: false, ..layout.clone() };
    forest_layout.build(d, rows)
}

fn apply_inverse_link(family: &ModelFamily, eta: f64) -> f64 {
    match family {
        ModelFamily::Linear | ModelFamily::GlmIdentity => eta,
        ModelFamily::GlmLogistic => expit(eta),
        ModelFamily::GlmPoisson | ModelFamily::NegativeBinomial => eta.clamp(-30.0, 30.0).exp(),
        ModelFamily::Zero | ModelFamily::Forest(_) => unreachable!("no link"),
    }
}

fn check_response_compat(family: &ModelFamily, y: &[f64]) -> Result<()> {
    match family {
        ModelFamily::GlmLogistic => {
            if y.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::BadResponse {
                    family: "glm_logistic".into(),
                    message: "responses must be binary 0/1".into(),
                });
            }
        }
        ModelFamily::GlmPoisson | ModelFamily::NegativeBinomial => {
            if y.iter().any(|&v| v < 0.0 || v.fract() != 0.0) {
                return Err(Error::BadResponse {
                    family: family.name().into(),
                    message: "responses must be nonnegative integers".into(),
                });
            }
        }
        _ => {}
    }
    Ok(())
}

/// Fit the working model on a row subset, one independent fit per arm.
pub fn fit(spec: &WorkingModelSpec, d: &TrialDataset, rows: &[usize]) -> Result<WorkingModelFit> {
    if matches!(spec.family, ModelFamily::Zero) {
        return Ok(WorkingModelFit::zero(d.k));
    }
    let layout = DesignLayout::resolve(spec, d, true)?;
    let p = layout.width();
    let mut arms = Vec::with_capacity(d.k);
    for a in 0..d.k {
        let arm_rows: Vec<usize> = rows.iter().copied().filter(|&i| d.arm[i] == a).collect();
        let need = match spec.family {
            // trees only need enough rows for one split
            ModelFamily::Forest(_) => 2,
            _ => p + 2,
        };
        if arm_rows.len() < need {
            return Err(Error::TooFewRows { arm: a + 1, got: arm_rows.len(), need });
        }
        let y: Vec<f64> = arm_rows.iter().map(|&i| d.response[i]).collect();
        check_response_compat(&spec.family, &y)?;
        let arm_fit = match &spec.family {
            ModelFamily::Zero => unreachable!(),
            ModelFamily::Linear => {
                let x = layout.build(d, &arm_rows);
                let coef = linalg::ols(&x, &DVector::from_vec(y), "per-arm least squares")?;
                ArmFit { coef: Some(coef), forest: None, dispersion: None, iterations: 1, grad_norm: 0.0 }
            }
            ModelFamily::GlmIdentity | ModelFamily::GlmLogistic | ModelFamily::GlmPoisson => {
                let x = layout.build(d, &arm_rows);
                let link = match spec.family {
                    ModelFamily::GlmIdentity => Link::Identity,
                    ModelFamily::GlmLogistic => Link::Logit,
                    _ => Link::Log,
                };
                let GlmFit { coef, iterations, grad_norm, .. } = irls(&x, &y, link)?;
                ArmFit { coef: Some(coef), forest: None, dispersion: None, iterations, grad_norm }
            }
            ModelFamily::NegativeBinomial => {
                let x = layout.build(d, &arm_rows);
                let (fit, alpha) = fit_negbin(&x, &y)?;
                ArmFit {
                    coef: Some(fit.coef),
                    forest: None,
                    dispersion: Some(alpha),
                    iterations: fit.iterations,
                    grad_norm: fit.grad_norm,
                }
            }
            ModelFamily::Forest(params) => {
                // derive a per-arm stream so arms get independent trees
                let arm_params = ForestParams { seed: crate::seed::split_seed(params.seed, a as u64), ..params.clone() };
                let x = layout_features(&layout, d, &(0..d.n()).collect::<Vec<_>>());
                let local: Vec<usize> = arm_rows.clone();
                let forest = BaggedForest::fit(&x, &d.response, &local, &arm_params);
                ArmFit { coef: None, forest: Some(forest), dispersion: None, iterations: 0, grad_norm: 0.0 }
            }
        };
        arms.push(arm_fit);
    }
    let fit = WorkingModelFit {
        k: d.k,
        node: FitNode::PerArm { family: spec.family.clone(), layout, arms },
        fold: None,
    };
    // training predictions must be finite
    fit.predict_rows(d, rows)?;
    Ok(fit)
}

/// Per-arm prediction-unbiasedness gap `ybar_a - mean_{i: A_i=a} muhat_a(X_i)`.
#[derive(Debug, Clone, Serialize)]
pub struct PuGap {
    pub arm: usize,
    pub gap: f64,
    pub within_tol: bool,
}

pub fn check_prediction_unbiasedness(
    fit: &WorkingModelFit,
    d: &TrialDataset,
    tol: f64,
) -> Result<Vec<PuGap>> {
    let mu = fit.predict(d)?;
    let mut out = Vec::with_capacity(d.k);
    for a in 0..d.k {
        let rows = d.arm_rows(a);
        if rows.is_empty() {
            return Err(Error::EmptyArm { arm: a + 1 });
        }
        let ybar = rows.iter().map(|&i| d.response[i]).sum::<f64>() / rows.len() as f64;
        let mubar = rows.iter().map(|&i| mu[(i, a)]).sum::<f64>() / rows.len() as f64;
        let gap = ybar - mubar;
        out.push(PuGap { arm: a + 1, gap, within_tol: gap.abs() <= tol });
    }
    Ok(out)
}

/// Mean residual of each (arm, stratum) cell for a prediction matrix; errors
/// on the first empty cell.
pub(crate) fn cell_residual_means(d: &TrialDataset, mu: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = d.k;
    let l_count = d.n_strata();
    let mut sums: DMatrix<f64> = DMatrix::zeros(k, l_count);
    let mut counts = vec![vec![0usize; l_count]; k];
    for i in 0..d.n() {
        let a = d.arm[i];
        let z = d.strata.of_row[i];
        sums[(a, z)] += d.response[i] - mu[(i, a)];
        counts[a][z] += 1;
    }
    let mut correction: DMatrix<f64> = DMatrix::zeros(k, l_count);
    for a in 0..k {
        for z in 0..l_count {
            if counts[a][z] == 0 {
                return Err(Error::EmptyCell { arm: a + 1, stratum: d.strata.label(z) });
            }
            correction[(a, z)] = sums[(a, z)] / counts[a][z] as f64;
        }
    }
    Ok(correction)
}

/// Stratum-specific internal bias calibration: add each (arm, stratum) cell's
/// mean residual to the predictions, so within every cell the mean residual
/// over that arm's patients becomes zero.
pub fn z_calibrate(fit: &WorkingModelFit, d: &TrialDataset) -> Result<WorkingModelFit> {
    let mu = fit.predict(d)?;
    let correction = cell_residual_means(d, &mu)?;
    Ok(WorkingModelFit {
        k: fit.k,
        node: FitNode::ZCalibrated { base: Box::new(fit.node.clone()), correction },
        fold: fit.fold,
    })
}
