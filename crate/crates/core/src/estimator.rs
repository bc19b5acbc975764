//! Point estimators for the arm-mean vector: per-arm sample means,
//! g-computation, AIPW, cross-fitted AIPW, and the linear / joint
//! calibration strategies, plus contrast evaluation.
//!
//! For arm `a` the AIPW estimator is
//!
//! ```text
//! theta_a = ybar_a - (1/n_a) sum_{i: A_i=a} mu_a(X_i) + (1/n) sum_i mu_a(X_i)
//! ```
//!
//! which reduces to the sample mean when the predictions are constant and to
//! g-computation when the working model is prediction-unbiased. The
//! cross-fitted version fits out-of-fold and evaluates in-fold with
//! fold-specific allocation fractions by default.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::data::{ContrastSpec, TrialDataset};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{fit as fit_model, WorkingModelFit, WorkingModelSpec};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum MethodTag {
    SampleMean,
    GComputation,
    Aipw,
    CrossFit { folds: usize },
    JointCalibration,
    /// Joint calibration on cross-fitted predictions.
    CrossFitJointCalibration { folds: usize },
}

impl MethodTag {
    pub fn describe(&self) -> String {
        match self {
            MethodTag::SampleMean => "sample_mean".into(),
            MethodTag::GComputation => "g_computation".into(),
            MethodTag::Aipw => "aipw".into(),
            MethodTag::CrossFit { folds } => format!("cross_fit({folds})"),
            MethodTag::JointCalibration => "joint_calibration".into(),
            MethodTag::CrossFitJointCalibration { folds } => format!("cross_fit_jc({folds})"),
        }
    }
}

/// Random partition of `0..n` into folds whose sizes differ by at most one.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldPlan {
    pub folds: usize,
    pub of_row: Vec<usize>,
}

impl FoldPlan {
    pub fn random(n: usize, folds: usize, rng: &mut ChaCha12Rng) -> Result<Self> {
        if folds < 2 {
            return Err(Error::InvalidFoldPlan(format!("need J >= 2 folds, got {folds}")));
        }
        if folds > n {
            return Err(Error::InvalidFoldPlan(format!("J = {folds} exceeds n = {n}")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let mut of_row = vec![0usize; n];
        for (pos, &i) in idx.iter().enumerate() {
            of_row[i] = pos % folds;
        }
        Ok(FoldPlan { folds, of_row })
    }

    pub fn rows_in(&self, fold: usize) -> Vec<usize> {
        (0..self.of_row.len()).filter(|&i| self.of_row[i] == fold).collect()
    }

    pub fn rows_out(&self, fold: usize) -> Vec<usize> {
        (0..self.of_row.len()).filter(|&i| self.of_row[i] != fold).collect()
    }
}

/// Coefficient record of a joint calibration, kept for its variance estimator.
#[derive(Debug, Clone)]
pub struct JcRecord {
    /// Regressor matrix `W_i = (strata indicators, mu_1(X_i), ..., mu_k(X_i))`
    /// after collinearity pruning, n x q.
    pub w: DMatrix<f64>,
    pub w_names: Vec<String>,
    /// Per-arm coefficient vectors on `w` (intercept excluded), q x k.
    pub gamma: DMatrix<f64>,
    pub dropped: Vec<String>,
}

/// An estimated arm-mean vector together with the prediction matrix that
/// produced it (stitched out-of-fold predictions for cross-fitting).
#[derive(Debug, Clone)]
pub struct ThetaEstimate {
    pub theta: DVector<f64>,
    pub method: MethodTag,
    pub mu: DMatrix<f64>,
    pub folds: Option<FoldPlan>,
    pub jc: Option<JcRecord>,
}

impl ThetaEstimate {
    pub fn k(&self) -> usize {
        self.theta.len()
    }
}

fn arm_mean(d: &TrialDataset, a: usize) -> Result<f64> {
    let rows = d.arm_rows(a);
    if rows.is_empty() {
        return Err(Error::EmptyArm { arm: a + 1 });
    }
    Ok(rows.iter().map(|&i| d.response[i]).sum::<f64>() / rows.len() as f64)
}

/// Eq.-style AIPW evaluation for a given prediction matrix.
pub(crate) fn aipw_from_mu(d: &TrialDataset, mu: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = d.n() as f64;
    let mut theta = DVector::zeros(d.k);
    for a in 0..d.k {
        let rows = d.arm_rows(a);
        if rows.is_empty() {
            return Err(Error::EmptyArm { arm: a + 1 });
        }
        let ybar = rows.iter().map(|&i| d.response[i]).sum::<f64>() / rows.len() as f64;
        let mu_arm = rows.iter().map(|&i| mu[(i, a)]).sum::<f64>() / rows.len() as f64;
        let mu_all = mu.column(a).sum() / n;
        theta[a] = ybar - mu_arm + mu_all;
    }
    Ok(theta)
}

/// Unadjusted per-arm sample means.
pub fn sample_mean(d: &TrialDataset) -> Result<ThetaEstimate> {
    let mut theta = DVector::zeros(d.k);
    for a in 0..d.k {
        theta[a] = arm_mean(d, a)?;
    }
    Ok(ThetaEstimate {
        theta,
        method: MethodTag::SampleMean,
        mu: DMatrix::zeros(d.n(), d.k),
        folds: None,
        jc: None,
    })
}

/// Plug-in estimator `theta_a = (1/n) sum_i mu_a(X_i)`.
pub fn g_computation(d: &TrialDataset, fit: &WorkingModelFit) -> Result<ThetaEstimate> {
    let mu = fit.predict(d)?;
    let n = d.n() as f64;
    let theta = DVector::from_fn(d.k, |a, _| mu.column(a).sum() / n);
    Ok(ThetaEstimate { theta, method: MethodTag::GComputation, mu, folds: None, jc: None })
}

/// Augmented inverse propensity weighted estimator.
pub fn aipw(d: &TrialDataset, fit: &WorkingModelFit) -> Result<ThetaEstimate> {
    let mu = fit.predict(d)?;
    let theta = aipw_from_mu(d, &mu)?;
    Ok(ThetaEstimate { theta, method: MethodTag::Aipw, mu, folds: None, jc: None })
}

/// Fold-specific or whole-sample allocation fractions in the cross-fit sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum PiMode {
    FoldSpecific,
    WholeSample,
}

/// Cross-fitted AIPW: fit on each fold's complement, evaluate in-fold.
pub fn cross_fit_aipw(
    d: &TrialDataset,
    spec: &WorkingModelSpec,
    plan: &FoldPlan,
    pi_mode: PiMode,
) -> Result<ThetaEstimate> {
    cross_fit_aipw_with(d, |data, rows| fit_model(spec, data, rows), plan, pi_mode)
}

/// Cross-fit with an injectable fitter (used to assert the equivalence of
/// cross-fitted and plain AIPW under identical fits).
pub fn cross_fit_aipw_with<F>(
    d: &TrialDataset,
    fitter: F,
    plan: &FoldPlan,
    pi_mode: PiMode,
) -> Result<ThetaEstimate>
where
    F: Fn(&TrialDataset, &[usize]) -> Result<WorkingModelFit>,
{
    if plan.of_row.len() != d.n() {
        return Err(Error::InvalidFoldPlan("fold plan length != n".into()));
    }
    let mut stitched = DMatrix::zeros(d.n(), d.k);
    let mut theta = DVector::zeros(d.k);
    for j in 0..plan.folds {
        let in_rows = plan.rows_in(j);
        let out_rows = plan.rows_out(j);
        let fit = fitter(d, &out_rows)?;
        let mu_in = fit.predict_rows(d, &in_rows)?;
        for (ri, &i) in in_rows.iter().enumerate() {
            for a in 0..d.k {
                stitched[(i, a)] = mu_in[(ri, a)];
            }
        }
        let n_j = in_rows.len() as f64;
        for a in 0..d.k {
            let n_aj = in_rows.iter().filter(|&&i| d.arm[i] == a).count();
            if n_aj == 0 {
                return Err(Error::EmptyArmInFold { arm: a + 1, fold: j + 1 });
            }
            let pi_hat = match pi_mode {
                PiMode::FoldSpecific => n_aj as f64 / n_j,
                PiMode::WholeSample => d.arm_counts()[a] as f64 / d.n() as f64,
            };
            let mut sum = 0.0;
            for (ri, &i) in in_rows.iter().enumerate() {
                let m = mu_in[(ri, a)];
                let ind = (d.arm[i] == a) as u8 as f64;
                sum += ind / pi_hat * (d.response[i] - m) + m;
            }
            theta[a] += sum / n_j;
        }
    }
    theta /= plan.folds as f64;
    Ok(ThetaEstimate {
        theta,
        method: MethodTag::CrossFit { folds: plan.folds },
        mu: stitched,
        folds: Some(plan.clone()),
        jc: None,
    })
}

/// Linear calibration: per arm, regress `y_a` on an intercept and the k base
/// predictions over that arm's patients, then replace arm-a predictions with
/// the fitted combination (intercept absorbed by AIPW's centering).
///
/// Collinear or constant prediction columns are pruned per arm; if every
/// column is pruned the fit degrades to constant predictions, which makes the
/// AIPW estimator collapse to the sample mean.
pub fn linear_calibrate(d: &TrialDataset, fit: &WorkingModelFit) -> Result<WorkingModelFit> {
    let mu = fit.predict(d)?;
    let k = d.k;
    let mut gamma = DMatrix::zeros(k, k);
    for a in 0..k {
        let rows = d.arm_rows(a);
        if rows.is_empty() {
            return Err(Error::EmptyArm { arm: a + 1 });
        }
        let mut arm_mu = DMatrix::zeros(rows.len(), k);
        for (ri, &i) in rows.iter().enumerate() {
            for b in 0..k {
                arm_mu[(ri, b)] = mu[(i, b)];
            }
        }
        let keep = linalg::prune_columns(&arm_mu);
        if keep.is_empty() {
            continue; // no regressor signal in this arm: predictions stay 0
        }
        let mut x = DMatrix::zeros(rows.len(), keep.len() + 1);
        for ri in 0..rows.len() {
            x[(ri, 0)] = 1.0;
            for (jj, &b) in keep.iter().enumerate() {
                x[(ri, jj + 1)] = arm_mu[(ri, b)];
            }
        }
        let y = DVector::from_fn(rows.len(), |ri, _| d.response[rows[ri]]);
        let coef = linalg::ols(&x, &y, "linear calibration")?;
        for (jj, &b) in keep.iter().enumerate() {
            gamma[(b, a)] = coef[jj + 1];
        }
    }
    Ok(fit.clone().calibrated(gamma))
}

/// Build the joint-calibration regressor `W = (strata indicators, mu(X))`,
/// with the first strata indicator dropped (absorbed by the intercept) and
/// redundant columns pruned by a rank-revealing QR.
fn build_w(d: &TrialDataset, mu: &DMatrix<f64>) -> (DMatrix<f64>, Vec<String>, Vec<String>) {
    let n = d.n();
    let l_count = d.n_strata();
    let k = d.k;
    let q_full = l_count.saturating_sub(1) + k;
    let mut w = DMatrix::zeros(n, q_full);
    let mut names = Vec::with_capacity(q_full);
    for l in 1..l_count {
        for i in 0..n {
            w[(i, l - 1)] = (d.strata.of_row[i] == l) as u8 as f64;
        }
        names.push(format!("z={}", d.strata.label(l)));
    }
    for a in 0..k {
        for i in 0..n {
            w[(i, l_count - 1 + a)] = mu[(i, a)];
        }
        names.push(format!("mu[{}]", a + 1));
    }
    let keep = linalg::prune_columns(&w);
    let dropped: Vec<String> = (0..q_full).filter(|j| !keep.contains(j)).map(|j| names[j].clone()).collect();
    let kept_names: Vec<String> = keep.iter().map(|&j| names[j].clone()).collect();
    (linalg::select_columns(&w, &keep), kept_names, dropped)
}

/// Joint calibration: per arm, OLS of `y_a` on `(1, W)` over that arm's
/// patients; the AIPW estimator is then applied with `mu*_a(W_i) = gamma_a' W_i`.
pub fn joint_calibrate(d: &TrialDataset, fit: &WorkingModelFit) -> Result<ThetaEstimate> {
    let mu = fit.predict(d)?;
    let est = joint_calibrate_from_mu(d, &mu, None)?;
    Ok(est)
}

pub(crate) fn joint_calibrate_from_mu(
    d: &TrialDataset,
    mu: &DMatrix<f64>,
    cf: Option<(&FoldPlan, PiMode)>,
) -> Result<ThetaEstimate> {
    let (w, w_names, dropped) = build_w(d, mu);
    let q = w.ncols();
    let k = d.k;
    let mut gamma = DMatrix::zeros(q, k);
    let mut mu_star = DMatrix::zeros(d.n(), k);
    for a in 0..k {
        let rows = d.arm_rows(a);
        if rows.len() < q + 2 {
            return Err(Error::TooFewRows { arm: a + 1, got: rows.len(), need: q + 2 });
        }
        let mut x = DMatrix::zeros(rows.len(), q + 1);
        for (ri, &i) in rows.iter().enumerate() {
            x[(ri, 0)] = 1.0;
            for j in 0..q {
                x[(ri, j + 1)] = w[(i, j)];
            }
        }
        // refuse rank deficiency that survives whole-sample pruning (for
        // example an (arm, stratum) cell empty within this arm)
        let gram = x.transpose() * &x;
        let chol = gram.clone().cholesky().ok_or_else(|| Error::RankDeficient {
            context: format!("joint calibration, arm {}", a + 1),
            dropped: dropped.join(", "),
        })?;
        let y = DVector::from_fn(rows.len(), |ri, _| d.response[rows[ri]]);
        let coef = chol.solve(&(x.transpose() * y));
        for j in 0..q {
            gamma[(j, a)] = coef[j + 1];
        }
        let col = &w * gamma.column(a);
        mu_star.set_column(a, &col);
    }
    let (theta, method, folds) = match cf {
        None => (aipw_from_mu(d, &mu_star)?, MethodTag::JointCalibration, None),
        Some((plan, pi_mode)) => {
            let theta = cross_fit_sum(d, &mu_star, plan, pi_mode)?;
            (theta, MethodTag::CrossFitJointCalibration { folds: plan.folds }, Some(plan.clone()))
        }
    };
    Ok(ThetaEstimate {
        theta,
        method,
        mu: mu_star,
        folds,
        jc: Some(JcRecord { w, w_names, gamma, dropped }),
    })
}

/// The cross-fit sum of Eq.-(3) form evaluated on an already-stitched
/// prediction matrix.
pub(crate) fn cross_fit_sum(
    d: &TrialDataset,
    mu: &DMatrix<f64>,
    plan: &FoldPlan,
    pi_mode: PiMode,
) -> Result<DVector<f64>> {
    let mut theta = DVector::zeros(d.k);
    for j in 0..plan.folds {
        let in_rows = plan.rows_in(j);
        let n_j = in_rows.len() as f64;
        for a in 0..d.k {
            let n_aj = in_rows.iter().filter(|&&i| d.arm[i] == a).count();
            if n_aj == 0 {
                return Err(Error::EmptyArmInFold { arm: a + 1, fold: j + 1 });
            }
            let pi_hat = match pi_mode {
                PiMode::FoldSpecific => n_aj as f64 / n_j,
                PiMode::WholeSample => d.arm_counts()[a] as f64 / d.n() as f64,
            };
            let mut sum = 0.0;
            for &i in &in_rows {
                let m = mu[(i, a)];
                let ind = (d.arm[i] == a) as u8 as f64;
                sum += ind / pi_hat * (d.response[i] - m) + m;
            }
            theta[a] += sum / n_j;
        }
    }
    Ok(theta / plan.folds as f64)
}

/// Evaluate a contrast at the estimated arm means.
pub fn evaluate_contrast(est: &ThetaEstimate, c: &ContrastSpec) -> Result<f64> {
    evaluate_contrast_theta(&est.theta, c)
}

pub fn evaluate_contrast_theta(theta: &DVector<f64>, c: &ContrastSpec) -> Result<f64> {
    c.validate(theta.len())?;
    match c {
        ContrastSpec::Difference { a, b } => Ok(theta[b - 1] - theta[a - 1]),
        ContrastSpec::Linear { c } => Ok(c.iter().zip(theta.iter()).map(|(ci, ti)| ci * ti).sum()),
        ContrastSpec::RiskRatio { a, b } => {
            if theta[a - 1] <= 0.0 {
                return Err(Error::BadContrast(format!(
                    "risk_ratio denominator theta_{a} = {} is not positive",
                    theta[a - 1]
                )));
            }
            Ok(theta[b - 1] / theta[a - 1])
        }
        ContrastSpec::LogRatio { a, b } => {
            if theta[a - 1] <= 0.0 || theta[b - 1] <= 0.0 {
                return Err(Error::BadContrast("log_ratio needs positive arm means".into()));
            }
            Ok((theta[b - 1] / theta[a - 1]).ln())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::StrataIndex;
    use crate::model::{z_calibrate, ModelFamily};
    use crate::seed::stream_rng;
    use rand::Rng;

    fn small_dataset() -> TrialDataset {
        // arms (1,1,2,2), y = (1,3,2,4)
        TrialDataset::new(
            vec![0.5, 0.5],
            vec![0, 0, 1, 1],
            StrataIndex::trivial(4),
            DMatrix::zeros(4, 0),
            vec![],
            vec![1.0, 3.0, 2.0, 4.0],
        )
        .unwrap()
    }

    fn random_dataset(n: usize, seed: u64) -> TrialDataset {
        let mut rng = stream_rng(seed, 0);
        let covariates = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let arm: Vec<usize> = (0..n).map(|_| (rng.random::<f64>() < 0.5) as usize).collect();
        let strata = StrataIndex::from_rows(
            vec!["s".into()],
            (0..n).map(|_| vec![(rng.random_range(0..2u8)).to_string()]).collect(),
        );
        let response: Vec<f64> = (0..n)
            .map(|i| covariates[(i, 0)] + 0.5 * arm[i] as f64 + 0.5 * rng.random::<f64>())
            .collect();
        TrialDataset::new(vec![0.5, 0.5], arm, strata, covariates, vec!["x1".into(), "x2".into()], response)
            .unwrap()
    }

    #[test]
    fn sample_mean_trivial() {
        let d = small_dataset();
        let est = sample_mean(&d).unwrap();
        assert_eq!(est.theta[0], 2.0);
        assert_eq!(est.theta[1], 3.0);
    }

    #[test]
    fn aipw_worked_example() {
        let d = small_dataset();
        let mut mu = DMatrix::zeros(4, 2);
        // mu_1 = (0,1,0,1), mu_2 = (1,1,2,2)
        for (i, v) in [0.0, 1.0, 0.0, 1.0].iter().enumerate() {
            mu[(i, 0)] = *v;
        }
        for (i, v) in [1.0, 1.0, 2.0, 2.0].iter().enumerate() {
            mu[(i, 1)] = *v;
        }
        let theta = aipw_from_mu(&d, &mu).unwrap();
        assert!((theta[0] - 2.0).abs() < 1e-15);
        assert!((theta[1] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn aipw_with_constant_mu_is_sample_mean() {
        let d = random_dataset(60, 1);
        let mu = DMatrix::from_element(d.n(), d.k, 7.3);
        let theta = aipw_from_mu(&d, &mu).unwrap();
        let sm = sample_mean(&d).unwrap();
        assert!((theta - sm.theta).amax() < 1e-12);
    }

    #[test]
    fn aipw_zero_model_equals_sample_mean_bitwise() {
        for seed in 0..10 {
            let d = random_dataset(40, seed);
            let est = aipw(&d, &WorkingModelFit::zero(d.k)).unwrap();
            let sm = sample_mean(&d).unwrap();
            assert_eq!(est.theta, sm.theta);
        }
    }

    #[test]
    fn g_computation_zero_fit_is_zero() {
        let d = random_dataset(30, 2);
        let est = g_computation(&d, &WorkingModelFit::zero(d.k)).unwrap();
        assert!(est.theta.amax() == 0.0);
    }

    #[test]
    fn g_computation_equals_aipw_iff_prediction_unbiased() {
        let d = random_dataset(200, 3);
        let spec = WorkingModelSpec::new(ModelFamily::GlmIdentity);
        let f = fit_model(&spec, &d, &(0..d.n()).collect::<Vec<_>>()).unwrap();
        let g = g_computation(&d, &f).unwrap();
        let a = aipw(&d, &f).unwrap();
        assert!((g.theta - a.theta).amax() < 1e-10, "canonical fit should equate them");

        // a deliberately biased fit separates them
        let shifted = {
            let mut mu = f.predict(&d).unwrap();
            for i in 0..d.n() {
                mu[(i, 0)] += 0.5;
            }
            mu
        };
        let g2 = DVector::from_fn(d.k, |a, _| shifted.column(a).sum() / d.n() as f64);
        let a2 = aipw_from_mu(&d, &shifted).unwrap();
        assert!((g2 - a2).amax() > 1e-3);
    }

    #[test]
    fn aipw_invariant_to_constant_shift_of_mu() {
        let d = random_dataset(80, 4);
        let mut rng = stream_rng(4, 1);
        let mu = DMatrix::from_fn(d.n(), d.k, |_, _| rng.random::<f64>());
        let theta1 = aipw_from_mu(&d, &mu).unwrap();
        let mut shifted = mu.clone();
        for i in 0..d.n() {
            shifted[(i, 0)] += 123.456;
            shifted[(i, 1)] -= 55.5;
        }
        let theta2 = aipw_from_mu(&d, &shifted).unwrap();
        assert!((theta1 - theta2).amax() < 1e-12);
    }

    #[test]
    fn fold_plan_sizes_differ_by_at_most_one() {
        let mut rng = stream_rng(5, 0);
        for n in [10usize, 11, 97, 100] {
            for j in [2usize, 3, 5] {
                let plan = FoldPlan::random(n, j, &mut rng).unwrap();
                let sizes: Vec<usize> = (0..j).map(|f| plan.rows_in(f).len()).collect();
                let max = *sizes.iter().max().unwrap();
                let min = *sizes.iter().min().unwrap();
                assert!(max - min <= 1, "n={n} J={j} sizes={sizes:?}");
                assert_eq!(sizes.iter().sum::<usize>(), n);
            }
        }
    }

    #[test]
    fn cross_fit_identical_fits_equal_folds_matches_aipw() {
        // appendix equivalence: identical fits across folds, equal fold
        // sizes, whole-sample allocation fractions
        let d = random_dataset(120, 6);
        let spec = WorkingModelSpec::new(ModelFamily::GlmIdentity);
        let full_fit = fit_model(&spec, &d, &(0..d.n()).collect::<Vec<_>>()).unwrap();
        let mut rng = stream_rng(6, 1);
        let plan = FoldPlan::random(d.n(), 4, &mut rng).unwrap();
        let cf = cross_fit_aipw_with(&d, |_, _| Ok(full_fit.clone()), &plan, PiMode::WholeSample).unwrap();
        let plain = aipw(&d, &full_fit).unwrap();
        assert!((cf.theta - plain.theta).amax() < 1e-12);
    }

    #[test]
    fn cross_fit_zero_family_fold_pi() {
        // zero predictions with fold-specific pi: average of per-fold arm means
        let d = random_dataset(90, 7);
        let mut rng = stream_rng(7, 1);
        let plan = FoldPlan::random(d.n(), 3, &mut rng).unwrap();
        let cf = cross_fit_aipw_with(&d, |data, _| Ok(WorkingModelFit::zero(data.k)), &plan, PiMode::FoldSpecific)
            .unwrap();
        for a in 0..d.k {
            let mut expect = 0.0;
            for j in 0..3 {
                let rows = plan.rows_in(j);
                let arm_rows: Vec<usize> = rows.iter().copied().filter(|&i| d.arm[i] == a).collect();
                expect += arm_rows.iter().map(|&i| d.response[i]).sum::<f64>() / arm_rows.len() as f64;
            }
            expect /= 3.0;
            assert!((cf.theta[a] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_fit_empty_arm_in_fold_errors() {
        let mut d = random_dataset(30, 8);
        for a in d.arm.iter_mut().take(10) {
            *a = 0;
        }
        // craft a plan whose fold 0 is exactly those arm-0 rows
        let mut of_row = vec![1usize; 30];
        for (i, v) in of_row.iter_mut().enumerate().take(10) {
            *v = 0;
            d.arm[i] = 0;
        }
        let plan = FoldPlan { folds: 2, of_row };
        let err = cross_fit_aipw_with(&d, |data, _| Ok(WorkingModelFit::zero(data.k)), &plan, PiMode::FoldSpecific)
            .unwrap_err();
        assert!(matches!(err, Error::EmptyArmInFold { arm: 2, fold: 1 }));
    }

    #[test]
    fn linear_calibration_identity_when_mu_is_own_ols_fit() {
        // single-arm trial where mu_1 is already the least-squares fit of y
        let mut rng = stream_rng(9, 0);
        let n = 50;
        let covariates = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>());
        let response: Vec<f64> = (0..n).map(|i| 1.0 + 2.0 * covariates[(i, 0)] + rng.random::<f64>()).collect();
        let d = TrialDataset::new(
            vec![1.0],
            vec![0; n],
            StrataIndex::trivial(n),
            covariates,
            vec!["x".into()],
            response,
        )
        .unwrap();
        let f = fit_model(&WorkingModelSpec::new(ModelFamily::Linear).with_strata(false), &d, &(0..n).collect::<Vec<_>>()).unwrap();
        let before = f.predict(&d).unwrap();
        let cal = linear_calibrate(&d, &f).unwrap();
        let after = cal.predict(&d).unwrap();
        // regression of y on its own OLS fit has slope 1; intercept is
        // absorbed, and the fitted values already center correctly
        let a1 = aipw_from_mu(&d, &before).unwrap();
        let a2 = aipw_from_mu(&d, &after).unwrap();
        assert!((a1 - a2).amax() < 1e-10);
    }

    #[test]
    fn linear_calibration_constant_mu_degrades_to_sample_mean() {
        let d = random_dataset(70, 10);
        let constant = WorkingModelFit::zero(d.k); // all-zero predictions are constant
        let cal = linear_calibrate(&d, &constant).unwrap();
        let est = aipw(&d, &cal).unwrap();
        let sm = sample_mean(&d).unwrap();
        assert!((est.theta - sm.theta).amax() < 1e-12);
    }

    #[test]
    fn joint_calibration_exact_linear_responses() {
        // y exactly linear in W within each arm: residuals vanish
        let mut rng = stream_rng(11, 0);
        let n = 80;
        let covariates = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>());
        let arm: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let strata = StrataIndex::from_rows(
            vec!["s".into()],
            (0..n).map(|i| vec![((i / 2) % 2).to_string()]).collect(),
        );
        let mu_truth = |i: usize, c: &DMatrix<f64>| 2.0 * c[(i, 0)];
        let response: Vec<f64> =
            (0..n).map(|i| mu_truth(i, &covariates) + ((i / 2) % 2) as f64 * 0.5 + arm[i] as f64).collect();
        let d = TrialDataset::new(vec![0.5, 0.5], arm, strata, covariates, vec!["x".into()], response).unwrap();
        let base = fit_model(&WorkingModelSpec::new(ModelFamily::Linear).with_strata(false), &d, &(0..n).collect::<Vec<_>>()).unwrap();
        let est = joint_calibrate(&d, &base).unwrap();
        let jc = est.jc.as_ref().unwrap();
        // per-arm residual variance must be ~0
        for a in 0..d.k {
            let rows = d.arm_rows(a);
            let resid: f64 = rows
                .iter()
                .map(|&i| {
                    let pred: f64 = (0..jc.w.ncols()).map(|j| jc.w[(i, j)] * jc.gamma[(j, a)]).sum();
                    let centered = d.response[i] - pred;
                    centered
                })
                .map(|r| r * r)
                .sum::<f64>();
            let mean_r: f64 = rows
                .iter()
                .map(|&i| {
                    let pred: f64 = (0..jc.w.ncols()).map(|j| jc.w[(i, j)] * jc.gamma[(j, a)]).sum();
                    d.response[i] - pred
                })
                .sum::<f64>()
                / rows.len() as f64;
            let var = resid / rows.len() as f64 - mean_r * mean_r;
            assert!(var < 1e-12, "arm {a} residual variance {var}");
        }
    }

    #[test]
    fn joint_calibration_after_z_calibration_is_unchanged() {
        // strata indicators span the Z-calibration correction, so JC of the
        // calibrated fit equals JC of the raw fit
        let d = random_dataset(160, 12);
        let base = fit_model(&WorkingModelSpec::new(ModelFamily::Linear).with_strata(false), &d, &(0..d.n()).collect::<Vec<_>>()).unwrap();
        let zc = z_calibrate(&base, &d).unwrap();
        let jc1 = joint_calibrate(&d, &base).unwrap();
        let jc2 = joint_calibrate(&d, &zc).unwrap();
        assert!((jc1.theta - jc2.theta).amax() < 1e-10);
    }

    #[test]
    fn contrast_evaluation() {
        let theta = DVector::from_vec(vec![2.0, 2.5]);
        assert!((evaluate_contrast_theta(&theta, &ContrastSpec::difference(1, 2)).unwrap() - 0.5).abs() < 1e-15);
        let theta = DVector::from_vec(vec![0.2, 0.4]);
        assert!(
            (evaluate_contrast_theta(&theta, &ContrastSpec::RiskRatio { a: 1, b: 2 }).unwrap() - 2.0).abs() < 1e-15
        );
        let linear = ContrastSpec::Linear { c: vec![-1.0, 1.0] };
        let diff = ContrastSpec::difference(1, 2);
        let theta = DVector::from_vec(vec![1.25, 3.5]);
        assert_eq!(
            evaluate_contrast_theta(&theta, &linear).unwrap(),
            evaluate_contrast_theta(&theta, &diff).unwrap()
        );
        let bad = DVector::from_vec(vec![0.0, 0.4]);
        assert!(evaluate_contrast_theta(&bad, &ContrastSpec::RiskRatio { a: 1, b: 2 }).is_err());
    }

    #[test]
    fn translation_equivariance() {
        let d = random_dataset(150, 13);
        let mut shifted = d.clone();
        for y in shifted.response.iter_mut() {
            *y += 5.0;
        }
        let all: Vec<usize> = (0..d.n()).collect();
        let spec = WorkingModelSpec::new(ModelFamily::Linear);
        let f1 = fit_model(&spec, &d, &all).unwrap();
        let f2 = fit_model(&spec, &shifted, &all).unwrap();
        for (e1, e2) in [
            (sample_mean(&d).unwrap(), sample_mean(&shifted).unwrap()),
            (aipw(&d, &f1).unwrap(), aipw(&shifted, &f2).unwrap()),
            (g_computation(&d, &f1).unwrap(), g_computation(&shifted, &f2).unwrap()),
            (joint_calibrate(&d, &f1).unwrap(), joint_calibrate(&shifted, &f2).unwrap()),
        ] {
            for a in 0..d.k {
                assert!((e2.theta[a] - e1.theta[a] - 5.0).abs() < 1e-9, "{:?}", e1.method);
            }
        }
    }

    #[test]
    fn patient_permutation_invariance() {
        // moderate logistic signal so the fits are well conditioned
        let mut rng = stream_rng(14, 0);
        let n = 120;
        let covariates = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let arm: Vec<usize> = (0..n).map(|_| (rng.random::<f64>() < 0.5) as usize).collect();
        let strata = StrataIndex::from_rows(
            vec!["s".into()],
            (0..n).map(|_| vec![(rng.random_range(0..2u8)).to_string()]).collect(),
        );
        let response: Vec<f64> = (0..n)
            .map(|i| {
                let p = 1.0 / (1.0 + (-(0.3 + 0.8 * covariates[(i, 0)])).exp());
                (rng.random::<f64>() < p) as u8 as f64
            })
            .collect();
        let d = TrialDataset::new(vec![0.5, 0.5], arm, strata, covariates, vec!["x1".into(), "x2".into()], response)
            .unwrap();
        // reverse row order with matched assignments
        let perm: Vec<usize> = (0..d.n()).rev().collect();
        let d2 = TrialDataset::new(
            d.pi.clone(),
            perm.iter().map(|&i| d.arm[i]).collect(),
            StrataIndex {
                columns: d.strata.columns.clone(),
                levels: d.strata.levels.clone(),
                of_row: perm.iter().map(|&i| d.strata.of_row[i]).collect(),
            },
            DMatrix::from_fn(d.n(), d.covariates.ncols(), |i, j| d.covariates[(perm[i], j)]),
            d.covariate_names.clone(),
            perm.iter().map(|&i| d.response[i]).collect(),
        )
        .unwrap();
        let all: Vec<usize> = (0..d.n()).collect();
        let spec = WorkingModelSpec::logistic();
        let f1 = fit_model(&spec, &d, &all).unwrap();
        let f2 = fit_model(&spec, &d2, &all).unwrap();
        let a1 = aipw(&d, &f1).unwrap();
        let a2 = aipw(&d2, &f2).unwrap();
        assert!((a1.theta - a2.theta).amax() < 1e-10);
        let s1 = sample_mean(&d).unwrap();
        let s2 = sample_mean(&d2).unwrap();
        assert!((s1.theta - s2.theta).amax() < 1e-12);
    }
}
