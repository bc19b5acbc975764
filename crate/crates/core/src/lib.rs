//! Covariate-adjusted estimation of treatment-arm means and contrasts in
//! randomized clinical trials under covariate-adaptive randomization (CAR).
//!
//! The crate provides:
//!
//! - a trial data model with CSV ingestion ([`data`]);
//! - sequential treatment-assignment schemes (simple, stratified permuted
//!   block, Pocock–Simon minimization) together with their allocation
//!   covariance specifications ([`scheme`]);
//! - pluggable per-arm working models for the conditional response mean:
//!   canonical-link GLMs fit by IRLS, negative binomial, per-arm least
//!   squares, and a bagged regression forest ([`model`], [`glm`], [`forest`]);
//! - point estimators: per-arm sample means, g-computation, AIPW,
//!   cross-fitted AIPW, and linear / stratum / joint calibration
//!   ([`estimator`]);
//! - variance estimators that are robust to working-model misspecification
//!   and account for the randomization scheme, plus delta-method inference
//!   for contrasts ([`variance`]);
//! - a Monte-Carlo harness with deterministic per-replicate seeding
//!   ([`sim`]) and report assembly for the CLI ([`report`]).
//!
//! Replicate-level parallelism uses rayon and is enabled by the `parallel`
//! feature (on by default); disabling it falls back to an identical
//! sequential path. Results are bit-for-bit independent of the thread count
//! either way.

pub mod data;
pub mod error;
pub mod estimator;
pub mod forest;
pub mod glm;
pub mod linalg;
pub mod model;
pub mod report;
pub mod scheme;
pub mod seed;
pub mod sim;
pub mod variance;

pub use data::{ContrastSpec, CsvSchema, PotentialOutcomeDataset, StrataIndex, TrialDataset};
pub use error::{Error, Result};
pub use estimator::{
    aipw, cross_fit_aipw, evaluate_contrast, g_computation, joint_calibrate, linear_calibrate,
    sample_mean, FoldPlan, MethodTag, PiMode, ThetaEstimate,
};
pub use model::{check_prediction_unbiasedness, fit, z_calibrate, ModelFamily, WorkingModelFit, WorkingModelSpec};
pub use scheme::{check_allocation_rate, omega_for, OmegaSpec, SchemeKind, SchemeSpec, SchemeState};
pub use sim::{
    dgp_case1, dgp_case2, dgp_figure1, figure1_experiment, run_scenario, run_scenario_sequential,
    Calibration, Dgp, EstimatorKind, FlavorChoice, MedianMode, PipelineSpec, ScenarioSpec,
    ScenarioSummary,
};
pub use variance::{
    delta_se, influence_decomposition, var_components, vhat_jc, vhat_naive, vhat_robust,
    vhat_universal, CovarianceEstimate, Flavor, VarComponents,
};
