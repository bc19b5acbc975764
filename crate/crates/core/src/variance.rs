//! Consistent estimators of the asymptotic covariance of `sqrt(n) (theta_hat
//! - theta)` under covariate-adaptive randomization, and delta-method
//! standard errors for contrasts.
//!
//! The full ("robust") estimator is
//!
//! ```text
//! Vhat = diag[ pi_a^{-1} (s_a^2 - 2 Qhat_aa + Sigmahat_aa) ]
//!        + Qhat + Qhat' - Sigmahat
//!        - sum_z (n(z)/n) (RY(z) - RX(z)) (Omega_SR - Omega(z)) (RY(z) - RX(z))
//! ```
//!
//! where the last term needs the scheme's Omega(z) and is dropped by the
//! universal/naive flavor. The naive flavor is that same formula used in the
//! pretense of simple randomization, which is exactly the drop since
//! `Omega(z) = Omega_SR` there.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{ContrastSpec, TrialDataset};
use crate::error::{Error, Result};
use crate::estimator::ThetaEstimate;
use crate::linalg::{sample_cov, sample_var};
use crate::scheme::OmegaSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    RobustB,
    Universal,
    Naive,
    Jc,
}

impl Flavor {
    pub fn describe(&self) -> &'static str {
        match self {
            Flavor::RobustB => "robust",
            Flavor::Universal => "universal",
            Flavor::Naive => "naive",
            Flavor::Jc => "jc",
        }
    }
}

/// Sample moments entering the variance formula.
#[derive(Debug, Clone)]
pub struct VarComponents {
    pub n: usize,
    pub pi: Vec<f64>,
    /// Per-arm sample variances of the response.
    pub s2: Vec<f64>,
    /// `(a, b)`: sample covariance of `y` and `mu_b(X)` over arm-a patients.
    pub qhat: DMatrix<f64>,
    /// Sample covariance of the prediction vector over all patients.
    pub sigma_hat: DMatrix<f64>,
    /// Per-stratum diagonal matrices `RY(z)`, `RX(z)` and weights `n(z)/n`.
    pub r_y: Vec<DMatrix<f64>>,
    pub r_x: Vec<DMatrix<f64>>,
    pub stratum_weight: Vec<f64>,
}

/// Compute every component of the variance formula for an estimate. The
/// `theta` entering `RY(z)` is the estimate under evaluation; predictions are
/// the matrix the estimator actually used (stitched for cross-fitting).
pub fn var_components(d: &TrialDataset, est: &ThetaEstimate) -> Result<VarComponents> {
    let n = d.n();
    let k = d.k;
    let mu = &est.mu;

    let mut s2 = vec![0.0; k];
    let mut qhat = DMatrix::zeros(k, k);
    for a in 0..k {
        let rows = d.arm_rows(a);
        if rows.len() < 2 {
            return Err(Error::TooFewRows { arm: a + 1, got: rows.len(), need: 2 });
        }
        let y: Vec<f64> = rows.iter().map(|&i| d.response[i]).collect();
        s2[a] = sample_var(&y);
        for b in 0..k {
            let mu_b: Vec<f64> = rows.iter().map(|&i| mu[(i, b)]).collect();
            qhat[(a, b)] = sample_cov(&y, &mu_b);
        }
    }

    let mut sigma_hat = DMatrix::zeros(k, k);
    for a in 0..k {
        let col_a: Vec<f64> = (0..n).map(|i| mu[(i, a)]).collect();
        for b in a..k {
            let col_b: Vec<f64> = (0..n).map(|i| mu[(i, b)]).collect();
            let c = sample_cov(&col_a, &col_b);
            sigma_hat[(a, b)] = c;
            sigma_hat[(b, a)] = c;
        }
    }

    let mu_bar: Vec<f64> = (0..k).map(|a| mu.column(a).sum() / n as f64).collect();
    let l_count = d.n_strata();
    let mut r_y = Vec::with_capacity(l_count);
    let mut r_x = Vec::with_capacity(l_count);
    let mut stratum_weight = Vec::with_capacity(l_count);
    for z in 0..l_count {
        let in_z: Vec<usize> = (0..n).filter(|&i| d.strata.of_row[i] == z).collect();
        stratum_weight.push(in_z.len() as f64 / n as f64);
        let mut ry = DMatrix::zeros(k, k);
        let mut rx = DMatrix::zeros(k, k);
        for a in 0..k {
            let cell: Vec<usize> = in_z.iter().copied().filter(|&i| d.arm[i] == a).collect();
            if cell.is_empty() {
                return Err(Error::EmptyCell { arm: a + 1, stratum: d.strata.label(z) });
            }
            let ybar_az = cell.iter().map(|&i| d.response[i]).sum::<f64>() / cell.len() as f64;
            ry[(a, a)] = (ybar_az - est.theta[a]) / d.pi[a];
            let mubar_az = in_z.iter().map(|&i| mu[(i, a)]).sum::<f64>() / in_z.len() as f64;
            rx[(a, a)] = (mubar_az - mu_bar[a]) / d.pi[a];
        }
        r_y.push(ry);
        r_x.push(rx);
    }

    Ok(VarComponents { n, pi: d.pi.clone(), s2, qhat, sigma_hat, r_y, r_x, stratum_weight })
}

#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    /// Estimated asymptotic covariance of `sqrt(n) (theta_hat - theta)`.
    pub v: DMatrix<f64>,
    pub flavor: Flavor,
    /// Set when the finite-sample correction produced a negative diagonal
    /// entry; the stored matrix is never clipped.
    pub non_psd: bool,
}

fn base_terms(c: &VarComponents) -> DMatrix<f64> {
    let k = c.pi.len();
    let mut v = &c.qhat + c.qhat.transpose() - &c.sigma_hat;
    for a in 0..k {
        v[(a, a)] += (c.s2[a] - 2.0 * c.qhat[(a, a)] + c.sigma_hat[(a, a)]) / c.pi[a];
    }
    v
}

fn finish(mut v: DMatrix<f64>, flavor: Flavor) -> CovarianceEstimate {
    // numerical symmetrization
    let vt = v.transpose();
    v = (&v + vt) * 0.5;
    let non_psd = v.diagonal().iter().any(|&x| x < 0.0);
    CovarianceEstimate { v, flavor, non_psd }
}

/// The full estimator with the scheme correction; refuses when the scheme's
/// Omega is unknown (Pocock-Simon), directing callers to the universal or
/// joint-calibration flavor.
pub fn vhat_robust(c: &VarComponents, omega: &OmegaSpec) -> Result<CovarianceEstimate> {
    if !omega.is_known() {
        return Err(Error::FlavorRefused {
            flavor: "robust".into(),
            reason: "Omega(z) is unknown under Pocock-Simon minimization".into(),
            alternatives: "universal (requires condition (U), e.g. Z-calibration), jc, naive".into(),
        });
    }
    let mut v = base_terms(c);
    for (z, w) in c.stratum_weight.iter().enumerate() {
        let omega_z = omega.omega_for_stratum(z).expect("known omega");
        let r = &c.r_y[z] - &c.r_x[z];
        let delta = &omega.omega_sr - omega_z;
        v -= (&r * delta * &r) * *w;
    }
    Ok(finish(v, Flavor::RobustB))
}

/// The formula without the scheme correction: consistent whenever condition
/// (U) holds, under any scheme satisfying the allocation assumptions.
pub fn vhat_universal(c: &VarComponents) -> CovarianceEstimate {
    finish(base_terms(c), Flavor::Universal)
}

/// Same formula as [`vhat_universal`] but tagged as the naive choice that
/// pretends simple randomization.
pub fn vhat_naive(c: &VarComponents) -> CovarianceEstimate {
    finish(base_terms(c), Flavor::Naive)
}

/// Variance for the joint-calibration estimator: the universal formula
/// evaluated at `mu*` and the JC estimate. Requires the JC record.
pub fn vhat_jc(d: &TrialDataset, est: &ThetaEstimate) -> Result<CovarianceEstimate> {
    if est.jc.is_none() {
        return Err(Error::MissingJcRecord);
    }
    let c = var_components(d, est)?;
    Ok(finish(base_terms(&c), Flavor::Jc))
}

/// Delta-method inference for a contrast.
#[derive(Debug, Clone, Serialize)]
pub struct ContrastInference {
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
    pub flavor: Flavor,
}

fn contrast_gradient(theta: &DVector<f64>, c: &ContrastSpec) -> Result<DVector<f64>> {
    let k = theta.len();
    c.validate(k)?;
    let mut g = DVector::zeros(k);
    match c {
        ContrastSpec::Difference { a, b } => {
            g[a - 1] = -1.0;
            g[b - 1] += 1.0;
        }
        ContrastSpec::Linear { c } => {
            for (i, ci) in c.iter().enumerate() {
                g[i] = *ci;
            }
        }
        ContrastSpec::RiskRatio { a, b } => {
            let (ta, tb) = (theta[a - 1], theta[b - 1]);
            if ta == 0.0 {
                return Err(Error::BadContrast("risk_ratio gradient needs theta_a != 0".into()));
            }
            g[a - 1] = -tb / (ta * ta);
            g[b - 1] += 1.0 / ta;
        }
        ContrastSpec::LogRatio { a, b } => {
            let (ta, tb) = (theta[a - 1], theta[b - 1]);
            if ta == 0.0 || tb == 0.0 {
                return Err(Error::BadContrast("log_ratio gradient needs nonzero arm means".into()));
            }
            g[a - 1] = -1.0 / ta;
            g[b - 1] += 1.0 / tb;
        }
    }
    Ok(g)
}

/// Standard error, z statistic, and two-sided normal p-value for `f(theta)`.
///
/// Negative diagonal entries arising from the finite-sample correction are
/// clipped to zero inside this computation only; the stored covariance is
/// left untouched. A contrast variance that is still nonpositive is an error.
pub fn delta_se(
    v: &CovarianceEstimate,
    est: &ThetaEstimate,
    c: &ContrastSpec,
    n: usize,
) -> Result<ContrastInference> {
    let g = contrast_gradient(&est.theta, c)?;
    let k = est.k();
    let mut vv = v.v.clone();
    for a in 0..k {
        if vv[(a, a)] < 0.0 {
            vv[(a, a)] = 0.0;
        }
    }
    let quad = (g.transpose() * &vv * &g)[(0, 0)];
    if quad <= 0.0 {
        return Err(Error::NonPsdVariance { value: quad });
    }
    let se = (quad / n as f64).sqrt();
    let estimate = crate::estimator::evaluate_contrast_theta(&est.theta, c)?;
    let z = estimate / se;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p = 2.0 * (1.0 - normal.cdf(z.abs()));
    Ok(ContrastInference { estimate, se, z, p, flavor: v.flavor })
}

/// Plug-in influence decomposition: the n x k matrix with entries
/// `phi_a,i = I(A_i=a)/pi_a [y_i - mu_a(X_i) - theta_a + mubar_a] + mu_a(X_i) - mubar_a`.
pub fn influence_decomposition(d: &TrialDataset, est: &ThetaEstimate) -> DMatrix<f64> {
    let n = d.n();
    let k = d.k;
    let mu = &est.mu;
    let mu_bar: Vec<f64> = (0..k).map(|a| mu.column(a).sum() / n as f64).collect();
    DMatrix::from_fn(n, k, |i, a| {
        let ind = (d.arm[i] == a) as u8 as f64;
        ind / d.pi[a] * (d.response[i] - mu[(i, a)] - est.theta[a] + mu_bar[a]) + mu[(i, a)] - mu_bar[a]
    })
}

/// Condition-(G2) diagnostic: per-arm sample covariance between the residual
/// `y - mu_a(X)` and the prediction `mu_a(X)` over that arm's patients. For a
/// joint-calibration fit this is OLS orthogonality and should vanish.
pub fn g2_orthogonality(d: &TrialDataset, est: &ThetaEstimate) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(d.k);
    for a in 0..d.k {
        let rows = d.arm_rows(a);
        if rows.len() < 2 {
            return Err(Error::TooFewRows { arm: a + 1, got: rows.len(), need: 2 });
        }
        let resid: Vec<f64> = rows.iter().map(|&i| d.response[i] - est.mu[(i, a)]).collect();
        let pred: Vec<f64> = rows.iter().map(|&i| est.mu[(i, a)]).collect();
        out.push(sample_cov(&resid, &pred));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::StrataIndex;
    use crate::estimator::{aipw, joint_calibrate, sample_mean};
    use crate::model::{fit as fit_model, ModelFamily, WorkingModelSpec};
    use crate::scheme::{omega_for, SchemeSpec};
    use crate::seed::stream_rng;
    use rand::Rng;

    fn dataset(n: usize, seed: u64) -> TrialDataset {
        let mut rng = stream_rng(seed, 0);
        let covariates = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let arm: Vec<usize> = (0..n).map(|_| (rng.random::<f64>() < 0.5) as usize).collect();
        let strata = StrataIndex::from_rows(
            vec!["s".into()],
            (0..n).map(|_| vec![(rng.random_range(0..2u8)).to_string()]).collect(),
        );
        let response: Vec<f64> = (0..n)
            .map(|i| covariates[(i, 0)] - 0.4 * covariates[(i, 1)] + 0.8 * arm[i] as f64 + rng.random::<f64>())
            .collect();
        TrialDataset::new(vec![0.5, 0.5], arm, strata, covariates, vec!["x1".into(), "x2".into()], response)
            .unwrap()
    }

    #[test]
    fn zero_mu_components() {
        let d = dataset(100, 1);
        let est = sample_mean(&d).unwrap();
        let c = var_components(&d, &est).unwrap();
        assert_eq!(c.qhat, DMatrix::zeros(2, 2));
        assert_eq!(c.sigma_hat, DMatrix::zeros(2, 2));
        for z in 0..d.n_strata() {
            assert_eq!(c.r_x[z], DMatrix::zeros(2, 2));
        }
        // vhat under simple randomization reduces to diag(pi^-1 s2)
        let omega = omega_for(&SchemeSpec::simple(vec![0.5, 0.5]));
        let v = vhat_robust(&c, &omega).unwrap();
        for a in 0..2 {
            assert!((v.v[(a, a)] - c.s2[a] / 0.5).abs() < 1e-12);
        }
        assert!((v.v[(0, 1)]).abs() < 1e-15);
    }

    #[test]
    fn constant_response_within_arm_gives_zero_s2() {
        let d = {
            let mut d = dataset(40, 2);
            for i in 0..d.n() {
                d.response[i] = d.arm[i] as f64;
            }
            d
        };
        let est = sample_mean(&d).unwrap();
        let c = var_components(&d, &est).unwrap();
        assert_eq!(c.s2, vec![0.0, 0.0]);
    }

    #[test]
    fn six_patient_worked_components() {
        // brute-force oracle on a tiny dataset, single stratum
        let d = TrialDataset::new(
            vec![0.5, 0.5],
            vec![0, 0, 0, 1, 1, 1],
            StrataIndex::trivial(6),
            DMatrix::zeros(6, 0),
            vec![],
            vec![1.0, 2.0, 3.0, 2.0, 4.0, 6.0],
        )
        .unwrap();
        let mut mu = DMatrix::zeros(6, 2);
        for (i, v) in [0.5, 1.0, 1.5, 1.0, 2.0, 3.0].iter().enumerate() {
            mu[(i, 0)] = *v;
        }
        for (i, v) in [1.0, 1.0, 2.0, 2.0, 3.0, 3.0].iter().enumerate() {
            mu[(i, 1)] = *v;
        }
        let est = ThetaEstimate {
            theta: crate::estimator::aipw_from_mu(&d, &mu).unwrap(),
            method: crate::estimator::MethodTag::Aipw,
            mu: mu.clone(),
            folds: None,
            jc: None,
        };
        let c = var_components(&d, &est).unwrap();
        // s2_1: var of (1,2,3) = 1; s2_2: var of (2,4,6) = 4
        assert!((c.s2[0] - 1.0).abs() < 1e-12);
        assert!((c.s2[1] - 4.0).abs() < 1e-12);
        // qhat(1,1): cov((1,2,3),(0.5,1,1.5)) = 0.5
        assert!((c.qhat[(0, 0)] - 0.5).abs() < 1e-12);
        // qhat(2,2): cov((2,4,6),(2,3,3)) = 1
        assert!((c.qhat[(1, 1)] - 1.0).abs() < 1e-12);
        // qhat(1,2): cov over arm 1 of y=(1,2,3) and mu2=(1,1,2) = 0.5
        assert!((c.qhat[(0, 1)] - 0.5).abs() < 1e-12);
        // sigma over all 6 rows
        let m1 = [0.5, 1.0, 1.5, 1.0, 2.0, 3.0];
        let m2 = [1.0, 1.0, 2.0, 2.0, 3.0, 3.0];
        assert!((c.sigma_hat[(0, 0)] - sample_var(&m1)).abs() < 1e-12);
        assert!((c.sigma_hat[(0, 1)] - sample_cov(&m1, &m2)).abs() < 1e-12);
    }

    #[test]
    fn robust_equals_universal_under_simple_randomization() {
        let d = dataset(150, 3);
        let all: Vec<usize> = (0..d.n()).collect();
        let f = fit_model(&WorkingModelSpec::new(ModelFamily::Linear), &d, &all).unwrap();
        let est = aipw(&d, &f).unwrap();
        let c = var_components(&d, &est).unwrap();
        let omega = omega_for(&SchemeSpec::simple(vec![0.5, 0.5]));
        let vr = vhat_robust(&c, &omega).unwrap();
        let vu = vhat_universal(&c);
        assert!((&vr.v - &vu.v).amax() < 1e-12);
    }

    #[test]
    fn robust_refuses_unknown_omega() {
        let d = dataset(60, 4);
        let est = sample_mean(&d).unwrap();
        let c = var_components(&d, &est).unwrap();
        let omega = omega_for(&SchemeSpec::pocock_simon(vec![0.5, 0.5], 0.8));
        match vhat_robust(&c, &omega) {
            Err(Error::FlavorRefused { alternatives, .. }) => {
                assert!(alternatives.contains("universal"));
            }
            other => panic!("expected refusal, got {other:?}"),
        }
    }

    #[test]
    fn delta_se_linear_worked_example() {
        let v = CovarianceEstimate {
            v: DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 4.0]),
            flavor: Flavor::Universal,
            non_psd: false,
        };
        let est = ThetaEstimate {
            theta: DVector::from_vec(vec![1.0, 2.0]),
            method: crate::estimator::MethodTag::SampleMean,
            mu: DMatrix::zeros(2, 2),
            folds: None,
            jc: None,
        };
        let inf = delta_se(&v, &est, &ContrastSpec::difference(1, 2), 100).unwrap();
        assert!((inf.se - (6.0f64 / 100.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ratio_gradients_match_finite_differences() {
        let theta = DVector::from_vec(vec![0.42, 0.63]);
        for c in [ContrastSpec::RiskRatio { a: 1, b: 2 }, ContrastSpec::LogRatio { a: 1, b: 2 }] {
            let g = contrast_gradient(&theta, &c).unwrap();
            for a in 0..2 {
                let h = 1e-6 * theta[a].abs();
                let mut tp = theta.clone();
                tp[a] += h;
                let mut tm = theta.clone();
                tm[a] -= h;
                let fp = crate::estimator::evaluate_contrast_theta(&tp, &c).unwrap();
                let fm = crate::estimator::evaluate_contrast_theta(&tm, &c).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                assert!((g[a] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "{c:?} arm {a}: {} vs {fd}", g[a]);
            }
        }
    }

    #[test]
    fn log_ratio_se_is_ratio_se_over_ratio() {
        let d = dataset(200, 5);
        let mut d = d;
        for y in d.response.iter_mut() {
            *y = y.abs() + 0.5;
        }
        let est = sample_mean(&d).unwrap();
        let c = var_components(&d, &est).unwrap();
        let v = vhat_universal(&c);
        let rr = delta_se(&v, &est, &ContrastSpec::RiskRatio { a: 1, b: 2 }, d.n()).unwrap();
        let lr = delta_se(&v, &est, &ContrastSpec::LogRatio { a: 1, b: 2 }, d.n()).unwrap();
        let ratio = est.theta[1] / est.theta[0];
        assert!((lr.se - rr.se / ratio).abs() < 1e-10);
    }

    #[test]
    fn influence_columns_center_near_zero() {
        let d = dataset(400, 6);
        let all: Vec<usize> = (0..d.n()).collect();
        let f = fit_model(&WorkingModelSpec::new(ModelFamily::Linear), &d, &all).unwrap();
        let est = aipw(&d, &f).unwrap();
        let phi = influence_decomposition(&d, &est);
        for a in 0..d.k {
            let mean = phi.column(a).sum() / d.n() as f64;
            assert!(mean.abs() < 1e-10, "arm {a} influence mean {mean}");
        }
    }

    #[test]
    fn influence_reduces_for_zero_mu() {
        let d = dataset(50, 7);
        let est = sample_mean(&d).unwrap();
        let phi = influence_decomposition(&d, &est);
        for i in 0..d.n() {
            for a in 0..d.k {
                let ind = (d.arm[i] == a) as u8 as f64;
                let expect = ind / d.pi[a] * (d.response[i] - est.theta[a]);
                assert!((phi[(i, a)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vhat_invariant_to_constant_mu_shift() {
        let d = dataset(120, 8);
        let all: Vec<usize> = (0..d.n()).collect();
        let f = fit_model(&WorkingModelSpec::new(ModelFamily::Linear), &d, &all).unwrap();
        let est = aipw(&d, &f).unwrap();
        let mut est2 = est.clone();
        for i in 0..d.n() {
            est2.mu[(i, 0)] += 77.7;
        }
        // theta is shift-invariant; components change but Vhat must not
        let c1 = var_components(&d, &est).unwrap();
        let c2 = var_components(&d, &est2).unwrap();
        let v1 = vhat_universal(&c1);
        let v2 = vhat_universal(&c2);
        assert!((&v1.v - &v2.v).amax() < 1e-9);
        let omega = omega_for(&SchemeSpec::permuted_block(vec![0.5, 0.5], 6));
        let r1 = vhat_robust(&c1, &omega).unwrap();
        let r2 = vhat_robust(&c2, &omega).unwrap();
        assert!((&r1.v - &r2.v).amax() < 1e-9);
    }

    #[test]
    fn jc_variance_matches_theorem_plugin_and_g2_holds() {
        let d = dataset(4000, 9);
        let all: Vec<usize> = (0..d.n()).collect();
        let base = fit_model(&WorkingModelSpec::new(ModelFamily::Linear).with_strata(false), &d, &all).unwrap();
        let est = joint_calibrate(&d, &base).unwrap();
        let v = vhat_jc(&d, &est).unwrap();
        // independent plug-in of the JC covariance: diag[pi^-1 var(resid_a)] + Gamma' Sigma_W Gamma
        let jc = est.jc.as_ref().unwrap();
        let q = jc.w.ncols();
        let mut sigma_w = DMatrix::zeros(q, q);
        for r in 0..q {
            let cr: Vec<f64> = (0..d.n()).map(|i| jc.w[(i, r)]).collect();
            for s in r..q {
                let cs: Vec<f64> = (0..d.n()).map(|i| jc.w[(i, s)]).collect();
                let c = sample_cov(&cr, &cs);
                sigma_w[(r, s)] = c;
                sigma_w[(s, r)] = c;
            }
        }
        let mut plugin = jc.gamma.transpose() * &sigma_w * &jc.gamma;
        for a in 0..d.k {
            let rows = d.arm_rows(a);
            let resid: Vec<f64> = rows.iter().map(|&i| d.response[i] - est.mu[(i, a)]).collect();
            plugin[(a, a)] += sample_var(&resid) / d.pi[a];
        }
        for a in 0..d.k {
            for b in 0..d.k {
                let rel = (v.v[(a, b)] - plugin[(a, b)]).abs() / (1.0 + plugin[(a, b)].abs());
                assert!(rel < 0.05, "({a},{b}): {} vs {}", v.v[(a, b)], plugin[(a, b)]);
            }
        }
        // (G2) orthogonality diagnostic
        for g2 in g2_orthogonality(&d, &est).unwrap() {
            assert!(g2.abs() < 1e-8, "g2 residual covariance {g2}");
        }
    }

    #[test]
    fn jc_variance_requires_record() {
        let d = dataset(50, 10);
        let est = sample_mean(&d).unwrap();
        assert!(matches!(vhat_jc(&d, &est), Err(Error::MissingJcRecord)));
    }

    #[test]
    fn empty_stratum_arm_cell_is_an_error() {
        let mut d = dataset(60, 11);
        for i in 0..d.n() {
            if d.strata.of_row[i] == 1 && d.arm[i] == 0 {
                d.arm[i] = 1;
            }
        }
        let est = sample_mean(&d).unwrap();
        assert!(matches!(var_components(&d, &est), Err(Error::EmptyCell { .. })));
    }
}
