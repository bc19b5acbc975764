//! Data-generating processes and the Monte-Carlo harness: bias, SD, mean SE
//! (correct and naive flavors), and coverage for every estimator pipeline
//! under a randomization scheme.
//!
//! Replicate `r` draws everything from seed streams derived from
//! `split(master_seed, r)`, so summaries are bit-for-bit identical across
//! thread counts and execution orders. Aggregation folds replicate results
//! in index order.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::data::{ContrastSpec, PotentialOutcomeDataset, StrataIndex, TrialDataset};
use crate::error::{Error, Result};
use crate::estimator::{
    aipw, cross_fit_aipw, evaluate_contrast_theta, g_computation, joint_calibrate_from_mu,
    sample_mean, FoldPlan, PiMode, ThetaEstimate,
};
use crate::glm::expit;
use crate::model::{fit as fit_model, z_calibrate, ModelFamily, WorkingModelFit, WorkingModelSpec};
use crate::scheme::{omega_for, OmegaSpec, SchemeKind, SchemeSpec, SchemeState};
use crate::seed::{split_seed, stream_rng};
use crate::variance::{
    delta_se, var_components, vhat_naive, vhat_robust, vhat_universal, ContrastInference, Flavor,
};

/// Two-sided 95% normal quantile.
pub const Z975: f64 = 1.959963984540054;

const DEFAULT_ORACLE_DRAWS: usize = 10_000_000;
/// Fixed stream for the truth oracle, independent of the scenario seed so a
/// scenario's truth never varies across runs.
const ORACLE_SEED: u64 = 271_828_182_845;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MedianMode {
    /// Dichotomize continuous covariates at the within-replicate sample median.
    Sample,
    /// Dichotomize at the population median (0 for the built-in DGPs).
    Population,
}

/// Built-in data-generating processes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dgp {
    Figure1,
    Case1,
    Case2,
}

/// Programmatic data generator, for custom simulation studies.
pub trait DataGenerator: Sync + Send {
    fn k(&self) -> usize;
    fn name(&self) -> String;
    fn default_pi(&self) -> Vec<f64>;
    fn draw(&self, n: usize, rng: &mut ChaCha12Rng, median: MedianMode) -> PotentialOutcomeDataset;
    /// Average the conditional mean vector over `draws` covariate draws.
    fn oracle_theta(&self, draws: usize, seed: u64) -> DVector<f64>;
}

const FIG1_EPS: f64 = 1e-3;

fn fig1_m1(xc: f64, xb: f64) -> f64 {
    let arg = 1.0 + xc + 6.0 * xc * xc * xc + xb;
    if arg <= 0.0 {
        FIG1_EPS
    } else {
        arg.ln().max(FIG1_EPS)
    }
}

fn fig1_m2(xc: f64, xb: f64) -> f64 {
    (xc + 10.0 * xc * xc + xb).max(FIG1_EPS)
}

fn case1_means(xc: f64, xb: f64) -> [f64; 2] {
    [
        expit(0.5 + 0.5 * xc + 0.5 * xb - 0.2 * xc * xc),
        expit(0.2 + 0.5 * xc + 0.5 * xb),
    ]
}

fn case2_means(x: &[f64; 4]) -> [f64; 2] {
    let [x1, x2, x3, xb] = *x;
    let eta = 0.2 - 0.5 * x1 + 0.5 * x2 + x3 + 0.2 * xb + x1 * (x2 + x3)
        - 0.2 * x1 * x1 * xb
        - 0.02 * x1 * x1 * (1.0 - xb);
    [expit(eta), 1.0 - 0.02 * x1 * x1 - 0.02 * x2 * x2]
}

fn sample_median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn dichotomize(values: &[f64], mode: MedianMode) -> Vec<usize> {
    let cut = match mode {
        MedianMode::Sample => sample_median(values),
        MedianMode::Population => 0.0,
    };
    values.iter().map(|&x| (x > cut) as usize).collect()
}

/// Case I: `X = (X_c, X_b)` with `X_c ~ U(-5,5)`, binary potential responses,
/// CAR strata from `X_b` and median-dichotomized `X_c`.
pub fn dgp_case1(n: usize, rng: &mut ChaCha12Rng, median: MedianMode) -> PotentialOutcomeDataset {
    let mut xc = Vec::with_capacity(n);
    let mut xb = Vec::with_capacity(n);
    let mut u1 = Vec::with_capacity(n);
    let mut u2 = Vec::with_capacity(n);
    for _ in 0..n {
        xc.push(rng.random::<f64>() * 10.0 - 5.0);
        xb.push((rng.random::<f64>() < 0.5) as u8 as f64);
        u1.push(rng.random::<f64>());
        u2.push(rng.random::<f64>());
    }
    let mut potential = DMatrix::zeros(n, 2);
    for i in 0..n {
        let m = case1_means(xc[i], xb[i]);
        potential[(i, 0)] = (u1[i] < m[0]) as u8 as f64;
        potential[(i, 1)] = (u2[i] < m[1]) as u8 as f64;
    }
    let xc_hi = dichotomize(&xc, median);
    let margins: Vec<Vec<usize>> = (0..n).map(|i| vec![xb[i] as usize, xc_hi[i]]).collect();
    let strata = StrataIndex::from_rows(
        vec!["xb".into(), "xc_hi".into()],
        (0..n).map(|i| vec![(xb[i] as usize).to_string(), xc_hi[i].to_string()]).collect(),
    );
    let covariates = DMatrix::from_fn(n, 2, |i, j| if j == 0 { xc[i] } else { xb[i] });
    PotentialOutcomeDataset {
        covariates,
        covariate_names: vec!["xc".into(), "xb".into()],
        strata,
        margins,
        potential,
    }
}

/// Case II: three continuous covariates plus one binary, unequal allocation,
/// CAR strata from the three median-dichotomized continuous covariates.
pub fn dgp_case2(n: usize, rng: &mut ChaCha12Rng, median: MedianMode) -> PotentialOutcomeDataset {
    let mut xs = vec![[0.0f64; 4]; n];
    let mut u1 = Vec::with_capacity(n);
    let mut u2 = Vec::with_capacity(n);
    for x in xs.iter_mut() {
        x[0] = rng.random::<f64>() * 10.0 - 5.0;
        x[1] = rng.random::<f64>() * 10.0 - 5.0;
        x[2] = rng.random::<f64>() * 10.0 - 5.0;
        x[3] = (rng.random::<f64>() < 0.5) as u8 as f64;
        u1.push(rng.random::<f64>());
        u2.push(rng.random::<f64>());
    }
    let mut potential = DMatrix::zeros(n, 2);
    for i in 0..n {
        let m = case2_means(&xs[i]);
        potential[(i, 0)] = (u1[i] < m[0]) as u8 as f64;
        potential[(i, 1)] = (u2[i] < m[1]) as u8 as f64;
    }
    let dich: Vec<Vec<usize>> = (0..3)
        .map(|j| dichotomize(&xs.iter().map(|x| x[j]).collect::<Vec<_>>(), median))
        .collect();
    let margins: Vec<Vec<usize>> = (0..n).map(|i| vec![dich[0][i], dich[1][i], dich[2][i]]).collect();
    let strata = StrataIndex::from_rows(
        vec!["x1_hi".into(), "x2_hi".into(), "x3_hi".into()],
        (0..n)
            .map(|i| vec![dich[0][i].to_string(), dich[1][i].to_string(), dich[2][i].to_string()])
            .collect(),
    );
    let covariates = DMatrix::from_fn(n, 4, |i, j| xs[i][j]);
    PotentialOutcomeDataset {
        covariates,
        covariate_names: vec!["xc1".into(), "xc2".into(), "xc3".into(), "xb".into()],
        strata,
        margins,
        potential,
    }
}

/// The small Poisson process behind the g-computation bias illustration:
/// `X_c ~ U(0,1)`, `X_b ~ Bernoulli(0.5)`,
/// `y_1 ~ Poisson(log(1 + X_c + 6 X_c^3 + X_b))`,
/// `y_2 ~ Poisson(X_c + 10 X_c^2 + X_b)`, both means clamped below at 1e-3
/// where the log is undefined or the value nonpositive.
pub fn dgp_figure1(n: usize, rng: &mut ChaCha12Rng) -> PotentialOutcomeDataset {
    let mut potential = DMatrix::zeros(n, 2);
    let mut covariates = DMatrix::zeros(n, 2);
    for i in 0..n {
        let xc = rng.random::<f64>();
        let xb = (rng.random::<f64>() < 0.5) as u8 as f64;
        covariates[(i, 0)] = xc;
        covariates[(i, 1)] = xb;
        let p1 = rand_distr::Poisson::new(fig1_m1(xc, xb)).expect("positive mean");
        let p2 = rand_distr::Poisson::new(fig1_m2(xc, xb)).expect("positive mean");
        potential[(i, 0)] = p1.sample(rng);
        potential[(i, 1)] = p2.sample(rng);
    }
    PotentialOutcomeDataset {
        covariates,
        covariate_names: vec!["xc".into(), "xb".into()],
        strata: StrataIndex::trivial(n),
        margins: vec![Vec::new(); n],
        potential,
    }
}

impl Dgp {
    pub fn describe(&self) -> &'static str {
        match self {
            Dgp::Figure1 => "figure1",
            Dgp::Case1 => "case1",
            Dgp::Case2 => "case2",
        }
    }

    pub fn k(&self) -> usize {
        2
    }

    pub fn default_pi(&self) -> Vec<f64> {
        match self {
            Dgp::Figure1 => vec![1.0 / 3.0, 2.0 / 3.0],
            Dgp::Case1 => vec![0.5, 0.5],
            Dgp::Case2 => vec![2.0 / 3.0, 1.0 / 3.0],
        }
    }

    pub fn has_margins(&self) -> bool {
        !matches!(self, Dgp::Figure1)
    }

    pub fn draw(&self, n: usize, rng: &mut ChaCha12Rng, median: MedianMode) -> PotentialOutcomeDataset {
        match self {
            Dgp::Figure1 => dgp_figure1(n, rng),
            Dgp::Case1 => dgp_case1(n, rng, median),
            Dgp::Case2 => dgp_case2(n, rng, median),
        }
    }

    fn mean_sum_chunk(&self, chunk_size: usize, rng: &mut ChaCha12Rng) -> [f64; 2] {
        let mut acc = [0.0f64; 2];
        match self {
            Dgp::Case1 => {
                for _ in 0..chunk_size {
                    let xc = rng.random::<f64>() * 10.0 - 5.0;
                    let xb = (rng.random::<f64>() < 0.5) as u8 as f64;
                    let m = case1_means(xc, xb);
                    acc[0] += m[0];
                    acc[1] += m[1];
                }
            }
            Dgp::Case2 => {
                for _ in 0..chunk_size {
                    let x = [
                        rng.random::<f64>() * 10.0 - 5.0,
                        rng.random::<f64>() * 10.0 - 5.0,
                        rng.random::<f64>() * 10.0 - 5.0,
                        (rng.random::<f64>() < 0.5) as u8 as f64,
                    ];
                    let m = case2_means(&x);
                    acc[0] += m[0];
                    acc[1] += m[1];
                }
            }
            Dgp::Figure1 => {
                for _ in 0..chunk_size {
                    let xc = rng.random::<f64>();
                    let xb = (rng.random::<f64>() < 0.5) as u8 as f64;
                    acc[0] += fig1_m1(xc, xb);
                    acc[1] += fig1_m2(xc, xb);
                }
            }
        }
        acc
    }

    /// Monte-Carlo oracle for the true arm means: average the conditional
    /// means over covariate draws. Chunked with per-chunk derived seeds so
    /// the result is identical under any thread count.
    pub fn oracle_theta(&self, draws: usize, seed: u64) -> DVector<f64> {
        let chunk = 100_000usize;
        let n_chunks = draws.div_ceil(chunk);
        let sizes: Vec<(u64, usize)> = (0..n_chunks)
            .map(|c| (c as u64, chunk.min(draws - c * chunk)))
            .collect();
        #[cfg(feature = "parallel")]
        let sums: Vec<[f64; 2]> = sizes
            .par_iter()
            .map(|&(c, size)| self.mean_sum_chunk(size, &mut stream_rng(seed, c)))
            .collect();
        #[cfg(not(feature = "parallel"))]
        let sums: Vec<[f64; 2]> = sizes
            .iter()
            .map(|&(c, size)| self.mean_sum_chunk(size, &mut stream_rng(seed, c)))
            .collect();
        let mut total = [0.0f64; 2];
        for s in sums {
            total[0] += s[0];
            total[1] += s[1];
        }
        DVector::from_vec(vec![total[0] / draws as f64, total[1] / draws as f64])
    }
}

impl DataGenerator for Dgp {
    fn k(&self) -> usize {
        self.k()
    }
    fn name(&self) -> String {
        self.describe().into()
    }
    fn default_pi(&self) -> Vec<f64> {
        self.default_pi()
    }
    fn draw(&self, n: usize, rng: &mut ChaCha12Rng, median: MedianMode) -> PotentialOutcomeDataset {
        Dgp::draw(self, n, rng, median)
    }
    fn oracle_theta(&self, draws: usize, seed: u64) -> DVector<f64> {
        Dgp::oracle_theta(self, draws, seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Calibration {
    None,
    Z,
    Linear,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "estimator", rename_all = "snake_case")]
pub enum EstimatorKind {
    Mean,
    GComputation,
    Aipw,
    CrossFit {
        folds: usize,
        /// Use the whole-sample allocation fractions instead of fold-specific ones.
        #[serde(default)]
        whole_sample_pi: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlavorChoice {
    Auto,
    Robust,
    Universal,
    Naive,
}

/// One estimator pipeline: working model, calibration step, point estimator,
/// and variance flavor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub label: String,
    #[serde(default)]
    pub model: Option<WorkingModelSpec>,
    pub calibration: Calibration,
    #[serde(flatten)]
    pub estimator: EstimatorKind,
    #[serde(default = "default_flavor")]
    pub variance: FlavorChoice,
}

fn default_flavor() -> FlavorChoice {
    FlavorChoice::Auto
}

impl PipelineSpec {
    pub fn sample_mean() -> Self {
        PipelineSpec {
            label: "sample_mean".into(),
            model: None,
            calibration: Calibration::None,
            estimator: EstimatorKind::Mean,
            variance: FlavorChoice::Auto,
        }
    }

    pub fn aipw(label: &str, model: WorkingModelSpec) -> Self {
        PipelineSpec {
            label: label.into(),
            model: Some(model),
            calibration: Calibration::None,
            estimator: EstimatorKind::Aipw,
            variance: FlavorChoice::Auto,
        }
    }

    pub fn with_calibration(mut self, c: Calibration) -> Self {
        self.calibration = c;
        self
    }

    pub fn with_variance(mut self, v: FlavorChoice) -> Self {
        self.variance = v;
        self
    }

    pub fn model_name(&self) -> String {
        match (&self.estimator, &self.model) {
            (EstimatorKind::Mean, _) => String::new(),
            (_, Some(m)) => m.family.name().to_string(),
            (_, None) => String::new(),
        }
    }

    pub fn method_name(&self) -> String {
        let base = match &self.estimator {
            EstimatorKind::Mean => "sample_mean".to_string(),
            EstimatorKind::GComputation => "g_computation".to_string(),
            EstimatorKind::Aipw => "aipw".to_string(),
            EstimatorKind::CrossFit { folds, .. } => format!("cross_fit({folds})"),
        };
        match self.calibration {
            Calibration::None => base,
            Calibration::Z => format!("{base}+zcal"),
            Calibration::Linear => format!("{base}+lc"),
            Calibration::Joint => format!("{base}+jc"),
        }
    }

    fn validate(&self) -> Result<()> {
        match self.estimator {
            EstimatorKind::Mean => Ok(()),
            _ if self.model.is_none() => Err(Error::InvalidScenario(format!(
                "pipeline `{}` needs a working model",
                self.label
            ))),
            EstimatorKind::GComputation if self.calibration == Calibration::Joint => {
                Err(Error::InvalidScenario(
                    "joint calibration applies to the aipw or cross-fit estimator".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

/// A full simulation scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub dgp: Dgp,
    pub n: usize,
    pub replicates: usize,
    pub scheme: SchemeSpec,
    pub estimators: Vec<PipelineSpec>,
    #[serde(default)]
    pub master_seed: u64,
    pub contrast: ContrastSpec,
    #[serde(default = "default_median_mode")]
    pub median_mode: MedianMode,
    /// Override the oracle truth of the contrast (full theta oracle otherwise).
    #[serde(default)]
    pub truth_override: Option<f64>,
    #[serde(default = "default_oracle_draws")]
    pub oracle_draws: usize,
}

fn default_median_mode() -> MedianMode {
    MedianMode::Sample
}

fn default_oracle_draws() -> usize {
    DEFAULT_ORACLE_DRAWS
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 1 {
            return Err(Error::InvalidScenario("replicates must be >= 1".into()));
        }
        if self.n < 20 {
            return Err(Error::InvalidScenario("n must be >= 20".into()));
        }
        self.scheme.validate()?;
        if self.scheme.k() != self.dgp.k() {
            return Err(Error::InvalidScenario(format!(
                "scheme has {} arms, DGP `{}` has {}",
                self.scheme.k(),
                self.dgp.describe(),
                self.dgp.k()
            )));
        }
        if matches!(self.scheme.kind, SchemeKind::PocockSimon { .. }) && !self.dgp.has_margins() {
            return Err(Error::InvalidScenario(format!(
                "DGP `{}` provides no randomization margins for minimization",
                self.dgp.describe()
            )));
        }
        self.contrast.validate(self.dgp.k())?;
        if self.estimators.is_empty() {
            return Err(Error::InvalidScenario("no estimator pipelines".into()));
        }
        for p in &self.estimators {
            p.validate()?;
        }
        Ok(())
    }

    /// Oracle truth of the contrast.
    pub fn truth(&self) -> Result<f64> {
        if let Some(t) = self.truth_override {
            return Ok(t);
        }
        let theta = self.dgp.oracle_theta(self.oracle_draws, ORACLE_SEED);
        evaluate_contrast_theta(&theta, &self.contrast)
    }
}

/// One replicate's outcome for one pipeline.
#[derive(Debug, Clone)]
enum RepOutcome {
    Ok {
        estimate: f64,
        /// None when the correct flavor was refused (e.g. robust under minimization).
        se_correct: Option<f64>,
        se_naive: f64,
    },
    Failed(#[allow(dead_code)] String),
}

/// Resolve which variance flavor backs the "correct" SE column.
fn resolve_flavor(
    choice: FlavorChoice,
    is_jc: bool,
    u_certified: bool,
    omega: &OmegaSpec,
) -> std::result::Result<Flavor, Error> {
    match choice {
        FlavorChoice::Naive => Ok(Flavor::Naive),
        FlavorChoice::Universal => Ok(if is_jc { Flavor::Jc } else { Flavor::Universal }),
        FlavorChoice::Robust => {
            if omega.is_known() {
                Ok(Flavor::RobustB)
            } else {
                Err(Error::FlavorRefused {
                    flavor: "robust".into(),
                    reason: "Omega(z) is unknown under Pocock-Simon minimization".into(),
                    alternatives: "universal (valid under condition (U) or after z/joint calibration), naive".into(),
                })
            }
        }
        FlavorChoice::Auto => {
            if is_jc {
                Ok(Flavor::Jc)
            } else if omega.is_known() {
                Ok(Flavor::RobustB)
            } else if u_certified {
                Ok(Flavor::Universal)
            } else {
                Err(Error::FlavorRefused {
                    flavor: "auto".into(),
                    reason: "Omega(z) unknown and condition (U) not certified for this pipeline".into(),
                    alternatives: "jc (joint calibration), universal after z-calibration, naive".into(),
                })
            }
        }
    }
}

/// Computed inference for one pipeline on one dataset (shared by the
/// simulation harness and the analyze path).
pub(crate) struct PipelineRun {
    pub est: ThetaEstimate,
    pub fit: Option<WorkingModelFit>,
    pub correct: std::result::Result<ContrastInference, Error>,
    pub naive: ContrastInference,
}

pub(crate) fn run_pipeline(
    d: &TrialDataset,
    p: &PipelineSpec,
    omega: &OmegaSpec,
    contrast: &ContrastSpec,
    rng: &mut ChaCha12Rng,
) -> Result<PipelineRun> {
    p.validate()?;
    let all_rows: Vec<usize> = (0..d.n()).collect();

    // materialize the model spec for this replicate (forests draw a seed)
    let model_spec = p.model.clone().map(|mut spec| {
        if let ModelFamily::Forest(params) = &mut spec.family {
            params.seed = rng.random::<u64>();
        }
        spec
    });

    let mut fit_used: Option<WorkingModelFit> = None;
    let est: ThetaEstimate = match &p.estimator {
        EstimatorKind::Mean => sample_mean(d)?,
        EstimatorKind::GComputation | EstimatorKind::Aipw => {
            let spec = model_spec.as_ref().expect("validated");
            let base = fit_model(spec, d, &all_rows)?;
            let fit = match p.calibration {
                Calibration::None | Calibration::Joint => base,
                Calibration::Z => z_calibrate(&base, d)?,
                Calibration::Linear => crate::estimator::linear_calibrate(d, &base)?,
            };
            let est = match (&p.estimator, p.calibration) {
                (_, Calibration::Joint) => {
                    let mu = fit.predict(d)?;
                    joint_calibrate_from_mu(d, &mu, None)?
                }
                (EstimatorKind::GComputation, _) => g_computation(d, &fit)?,
                _ => aipw(d, &fit)?,
            };
            fit_used = Some(fit);
            est
        }
        EstimatorKind::CrossFit { folds, whole_sample_pi } => {
            let spec = model_spec.as_ref().expect("validated");
            let plan = FoldPlan::random(d.n(), *folds, rng)?;
            let pi_mode = if *whole_sample_pi { PiMode::WholeSample } else { PiMode::FoldSpecific };
            let base = cross_fit_aipw(d, spec, &plan, pi_mode)?;
            match p.calibration {
                Calibration::None => base,
                Calibration::Joint => joint_calibrate_from_mu(d, &base.mu, Some((&plan, pi_mode)))?,
                Calibration::Z => {
                    let corr = crate::model::cell_residual_means(d, &base.mu)?;
                    let mut mu = base.mu.clone();
                    for i in 0..d.n() {
                        let z = d.strata.of_row[i];
                        for a in 0..d.k {
                            mu[(i, a)] += corr[(a, z)];
                        }
                    }
                    let theta = crate::estimator::cross_fit_sum(d, &mu, &plan, pi_mode)?;
                    ThetaEstimate { theta, method: base.method.clone(), mu, folds: Some(plan), jc: None }
                }
                Calibration::Linear => {
                    return Err(Error::InvalidScenario(
                        "linear calibration is not wired to the cross-fit path; use jc".into(),
                    ))
                }
            }
        }
    };

    let comps = var_components(d, &est)?;
    let naive_v = vhat_naive(&comps);
    let naive = delta_se(&naive_v, &est, contrast, d.n())?;

    let is_jc = est.jc.is_some();
    let u_certified = fit_used.as_ref().map(|f| f.u_certified()).unwrap_or(false);
    let correct = match resolve_flavor(p.variance, is_jc, u_certified, omega) {
        Err(e) => Err(e),
        Ok(Flavor::RobustB) => vhat_robust(&comps, omega).and_then(|v| delta_se(&v, &est, contrast, d.n())),
        Ok(Flavor::Naive) => delta_se(&naive_v, &est, contrast, d.n()),
        Ok(Flavor::Universal) | Ok(Flavor::Jc) => {
            let mut v = vhat_universal(&comps);
            if is_jc {
                v.flavor = Flavor::Jc;
            }
            delta_se(&v, &est, contrast, d.n())
        }
    };

    Ok(PipelineRun { est, fit: fit_used, correct, naive })
}

fn run_replicate(spec: &ScenarioSpec, omega: &OmegaSpec, r: usize) -> Vec<RepOutcome> {
    let rep_seed = split_seed(spec.master_seed, r as u64);
    let mut dgp_rng = stream_rng(rep_seed, 0);
    let pot = spec.dgp.draw(spec.n, &mut dgp_rng, spec.median_mode);

    let scheme_rng = stream_rng(rep_seed, 1);
    let assign = || -> Result<TrialDataset> {
        let mut state = SchemeState::new(spec.scheme.clone(), scheme_rng)?;
        let mut arms = Vec::with_capacity(spec.n);
        for i in 0..spec.n {
            arms.push(state.assign_next(pot.strata.of_row[i], &pot.margins[i])?);
        }
        pot.observe(arms, spec.scheme.pi.clone())
    };
    let d = match assign() {
        Ok(d) => d,
        Err(e) => return vec![RepOutcome::Failed(e.to_string()); spec.estimators.len()],
    };

    spec.estimators
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let mut rng = stream_rng(rep_seed, 2 + j as u64);
            match run_pipeline(&d, p, omega, &spec.contrast, &mut rng) {
                Err(e) => RepOutcome::Failed(e.to_string()),
                Ok(run) => {
                    let se_correct = match run.correct {
                        Ok(ci) => Some(ci.se),
                        Err(Error::FlavorRefused { .. }) => None,
                        Err(e) => return RepOutcome::Failed(e.to_string()),
                    };
                    RepOutcome::Ok { estimate: run.naive.estimate, se_correct, se_naive: run.naive.se }
                }
            }
        })
        .collect()
}

/// Per-estimator Monte-Carlo metrics, Table-1 style.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorSummary {
    pub label: String,
    pub working_model: String,
    pub method: String,
    pub n_ok: usize,
    pub n_failed: usize,
    /// Replicates whose correct-flavor SE was refused.
    pub n_se_refused: usize,
    pub mean_estimate: Option<f64>,
    pub bias: Option<f64>,
    pub sd: Option<f64>,
    pub mean_se_correct: Option<f64>,
    pub cp_correct: Option<f64>,
    pub mean_se_naive: Option<f64>,
    pub cp_naive: Option<f64>,
}

/// Scenario-level simulation summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioSummary {
    pub dgp: String,
    pub scheme: String,
    pub n: usize,
    pub replicates: usize,
    pub truth: f64,
    pub contrast: String,
    pub estimators: Vec<EstimatorSummary>,
}

fn fmt_cell(v: Option<f64>, scale: f64) -> String {
    match v {
        None => "--".to_string(),
        Some(x) => format!("{:.4}", x * scale),
    }
}

impl ScenarioSummary {
    /// Table-1 layout CSV: one row per estimator, entries multiplied by 100.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scheme,working_model,method,bias,sd,se,cp,naive_se,naive_cp\n");
        for e in &self.estimators {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                self.scheme,
                e.working_model,
                e.method,
                fmt_cell(e.bias, 100.0),
                fmt_cell(e.sd, 100.0),
                fmt_cell(e.mean_se_correct, 100.0),
                fmt_cell(e.cp_correct, 100.0),
                fmt_cell(e.mean_se_naive, 100.0),
                fmt_cell(e.cp_naive, 100.0),
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable summary")
    }
}

fn aggregate(spec: &ScenarioSpec, truth: f64, outcomes: Vec<Vec<RepOutcome>>) -> ScenarioSummary {
    let mut estimators = Vec::with_capacity(spec.estimators.len());
    for (j, p) in spec.estimators.iter().enumerate() {
        let mut estimates = Vec::new();
        let mut se_correct = Vec::new();
        let mut hit_correct = Vec::new();
        let mut se_naive = Vec::new();
        let mut hit_naive = Vec::new();
        let mut n_failed = 0usize;
        let mut n_se_refused = 0usize;
        for rep in &outcomes {
            match &rep[j] {
                RepOutcome::Failed(_) => n_failed += 1,
                RepOutcome::Ok { estimate, se_correct: sc, se_naive: sn } => {
                    estimates.push(*estimate);
                    se_naive.push(*sn);
                    hit_naive.push(((estimate - truth).abs() <= Z975 * sn) as u8 as f64);
                    match sc {
                        Some(s) => {
                            se_correct.push(*s);
                            hit_correct.push(((estimate - truth).abs() <= Z975 * s) as u8 as f64);
                        }
                        None => n_se_refused += 1,
                    }
                }
            }
        }
        let n_ok = estimates.len();
        let mean = (n_ok > 0).then(|| crate::linalg::mean(&estimates));
        let sd = (n_ok > 1).then(|| crate::linalg::sample_var(&estimates).sqrt());
        estimators.push(EstimatorSummary {
            label: p.label.clone(),
            working_model: p.model_name(),
            method: p.method_name(),
            n_ok,
            n_failed,
            n_se_refused,
            mean_estimate: mean,
            bias: mean.map(|m| m - truth),
            sd,
            mean_se_correct: (!se_correct.is_empty()).then(|| crate::linalg::mean(&se_correct)),
            cp_correct: (!hit_correct.is_empty()).then(|| crate::linalg::mean(&hit_correct)),
            mean_se_naive: (n_ok > 0).then(|| crate::linalg::mean(&se_naive)),
            cp_naive: (n_ok > 0).then(|| crate::linalg::mean(&hit_naive)),
        });
    }
    ScenarioSummary {
        dgp: spec.dgp.describe().into(),
        scheme: spec.scheme.describe(),
        n: spec.n,
        replicates: spec.replicates,
        truth,
        contrast: spec.contrast.describe(),
        estimators,
    }
}

fn collect_outcomes(spec: &ScenarioSpec, parallel: bool) -> Result<(f64, Vec<Vec<RepOutcome>>)> {
    spec.validate()?;
    let truth = spec.truth()?;
    let omega = omega_for(&spec.scheme);
    #[cfg(feature = "parallel")]
    let outcomes: Vec<Vec<RepOutcome>> = if parallel {
        (0..spec.replicates).into_par_iter().map(|r| run_replicate(spec, &omega, r)).collect()
    } else {
        (0..spec.replicates).map(|r| run_replicate(spec, &omega, r)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let outcomes: Vec<Vec<RepOutcome>> = {
        let _ = parallel;
        (0..spec.replicates).map(|r| run_replicate(spec, &omega, r)).collect()
    };
    Ok((truth, outcomes))
}

/// Run a scenario, replicates in parallel when the `parallel` feature is on.
pub fn run_scenario(spec: &ScenarioSpec) -> Result<ScenarioSummary> {
    let (truth, outcomes) = collect_outcomes(spec, true)?;
    Ok(aggregate(spec, truth, outcomes))
}

/// Sequential fallback with identical output, useful for benchmarking the
/// parallel speedup and for determinism checks.
pub fn run_scenario_sequential(spec: &ScenarioSpec) -> Result<ScenarioSummary> {
    let (truth, outcomes) = collect_outcomes(spec, false)?;
    Ok(aggregate(spec, truth, outcomes))
}

/// Per-replicate estimate distributions for the g-computation bias
/// illustration: negative-binomial working model, g-computation vs AIPW.
#[derive(Debug, Clone, Serialize)]
pub struct Figure1Samples {
    pub truth: f64,
    pub gcomp: Vec<f64>,
    pub aipw: Vec<f64>,
    pub n_failed: usize,
}

impl Figure1Samples {
    /// Plot-ready CSV: `method,estimate` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,estimate\n");
        for v in &self.gcomp {
            out.push_str(&format!("g_computation,{v}\n"));
        }
        for v in &self.aipw {
            out.push_str(&format!("aipw,{v}\n"));
        }
        out
    }

    pub fn mean_gcomp(&self) -> f64 {
        crate::linalg::mean(&self.gcomp)
    }

    pub fn mean_aipw(&self) -> f64 {
        crate::linalg::mean(&self.aipw)
    }
}

/// The Figure-1 experiment: `reps` simulated trials of size `n` under simple
/// randomization with `pi = (1/3, 2/3)`, per-arm negative-binomial working
/// models, g-computation and AIPW estimates of the arm-mean difference.
pub fn figure1_experiment(reps: usize, n: usize, master_seed: u64) -> Result<Figure1Samples> {
    if reps < 100 {
        return Err(Error::InvalidScenario("figure1_experiment needs reps >= 100".into()));
    }
    let negbin = WorkingModelSpec::new(ModelFamily::NegativeBinomial);
    let spec = ScenarioSpec {
        dgp: Dgp::Figure1,
        n,
        replicates: reps,
        scheme: SchemeSpec::simple(Dgp::Figure1.default_pi()),
        estimators: vec![
            PipelineSpec {
                label: "gcomp_negbin".into(),
                model: Some(negbin.clone()),
                calibration: Calibration::None,
                estimator: EstimatorKind::GComputation,
                variance: FlavorChoice::Naive,
            },
            PipelineSpec {
                label: "aipw_negbin".into(),
                model: Some(negbin),
                calibration: Calibration::None,
                estimator: EstimatorKind::Aipw,
                variance: FlavorChoice::Naive,
            },
        ],
        master_seed,
        contrast: ContrastSpec::difference(1, 2),
        median_mode: MedianMode::Sample,
        truth_override: None,
        oracle_draws: DEFAULT_ORACLE_DRAWS,
    };
    let (truth, outcomes) = collect_outcomes(&spec, true)?;
    let mut gcomp = Vec::with_capacity(reps);
    let mut aipw_v = Vec::with_capacity(reps);
    let mut n_failed = 0usize;
    for rep in outcomes {
        match (&rep[0], &rep[1]) {
            (RepOutcome::Ok { estimate: g, .. }, RepOutcome::Ok { estimate: a, .. }) => {
                gcomp.push(*g);
                aipw_v.push(*a);
            }
            _ => n_failed += 1,
        }
    }
    Ok(Figure1Samples { truth, gcomp, aipw: aipw_v, n_failed })
}
