//! Analysis-report assembly for the CLI: point estimates, contrast inference
//! under the correct and naive variance flavors, and diagnostics.

use serde::Serialize;
use serde_json::json;

use crate::data::{ContrastSpec, TrialDataset};
use crate::error::Result;
use crate::model::check_prediction_unbiasedness;
use crate::scheme::{omega_for, SchemeSpec};
use crate::seed::stream_rng;
use crate::sim::{run_pipeline, PipelineSpec};
use crate::variance::{g2_orthogonality, ContrastInference};

#[derive(Debug, Clone, Serialize)]
pub struct ContrastReport {
    pub kind: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
    pub flavor: String,
    pub se_naive: f64,
    pub p_naive: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    /// Per-arm prediction-unbiasedness gaps of the working model.
    pub prediction_unbiasedness_gap: Option<Vec<f64>>,
    /// Per-arm residual-prediction covariance (condition (G2) orthogonality).
    pub g2_orthogonality: Vec<f64>,
    /// Regressor columns dropped by collinearity pruning (joint calibration).
    pub dropped_columns: Vec<String>,
    /// Working-model coefficient records.
    pub coefficients: Option<serde_json::Value>,
    pub covariance_non_psd: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub n: usize,
    pub k: usize,
    pub pi: Vec<f64>,
    pub scheme: String,
    pub working_model: String,
    pub method: String,
    pub theta: Vec<f64>,
    pub contrast: ContrastReport,
    pub diagnostics: Diagnostics,
}

/// Run one estimator pipeline on an observed dataset and assemble the report.
/// A refused correct-SE flavor propagates as an error (the CLI maps it to its
/// refusal exit code); the naive flavor is always reported alongside.
pub fn analyze(
    d: &TrialDataset,
    pipeline: &PipelineSpec,
    scheme: &SchemeSpec,
    contrast: &ContrastSpec,
    seed: u64,
) -> Result<EstimateReport> {
    let omega = omega_for(scheme);
    let mut rng = stream_rng(seed, 0);
    let run = run_pipeline(d, pipeline, &omega, contrast, &mut rng)?;
    let correct: ContrastInference = run.correct?;
    let pu = match &run.fit {
        Some(fit) => Some(
            check_prediction_unbiasedness(fit, d, 1e-8)?
                .into_iter()
                .map(|g| g.gap)
                .collect::<Vec<f64>>(),
        ),
        None => None,
    };
    let g2 = g2_orthogonality(d, &run.est)?;
    let dropped = run.est.jc.as_ref().map(|j| j.dropped.clone()).unwrap_or_default();
    let coefficients = match &run.fit {
        Some(fit) => Some(fit.coefficient_json()),
        None => run.est.jc.as_ref().map(|j| {
            json!({
                "kind": "joint_calibration",
                "regressors": j.w_names,
                "gamma": (0..j.gamma.ncols())
                    .map(|a| j.gamma.column(a).iter().cloned().collect::<Vec<f64>>())
                    .collect::<Vec<_>>(),
            })
        }),
    };
    Ok(EstimateReport {
        n: d.n(),
        k: d.k,
        pi: d.pi.clone(),
        scheme: scheme.describe(),
        working_model: pipeline.model_name(),
        method: pipeline.method_name(),
        theta: run.est.theta.iter().cloned().collect(),
        contrast: ContrastReport {
            kind: contrast.describe(),
            estimate: correct.estimate,
            se: correct.se,
            z: correct.z,
            p: correct.p,
            flavor: correct.flavor.describe().into(),
            se_naive: run.naive.se,
            p_naive: run.naive.p,
        },
        diagnostics: Diagnostics {
            prediction_unbiasedness_gap: pu,
            g2_orthogonality: g2,
            dropped_columns: dropped,
            coefficients,
            covariance_non_psd: false,
        },
    })
}

/// Four significant digits, with an optional x100 scaling.
pub fn sig4(x: f64, times100: bool) -> String {
    let v = if times100 { x * 100.0 } else { x };
    if v == 0.0 {
        return "0".into();
    }
    let mag = v.abs().log10().floor() as i32;
    if !(-4..=7).contains(&mag) {
        return format!("{v:.3e}");
    }
    let decimals = (3 - mag).max(0) as usize;
    format!("{v:.decimals$}")
}

impl EstimateReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable report")
    }

    /// Human-readable table. Entries are scaled by 100 when `times100` is set,
    /// mirroring the usual reporting convention for proportions.
    pub fn human_table(&self, times100: bool) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "n = {}, arms = {}, scheme = {}, model = {}, method = {}\n",
            self.n,
            self.k,
            self.scheme,
            if self.working_model.is_empty() { "-" } else { &self.working_model },
            self.method
        ));
        out.push_str("\narm  pi      theta_hat\n");
        for a in 0..self.k {
            out.push_str(&format!(
                "{:<4} {:<7} {}\n",
                a + 1,
                sig4(self.pi[a], false),
                sig4(self.theta[a], times100)
            ));
        }
        out.push_str(&format!(
            "\ncontrast {}: estimate {}  SE[{}] {}  z {}  p {}\n",
            self.contrast.kind,
            sig4(self.contrast.estimate, times100),
            self.contrast.flavor,
            sig4(self.contrast.se, times100),
            sig4(self.contrast.z, false),
            sig4(self.contrast.p, false),
        ));
        if (self.contrast.se_naive - self.contrast.se).abs() > 1e-12 {
            out.push_str(&format!(
                "         naive SE {}  naive p {}\n",
                sig4(self.contrast.se_naive, times100),
                sig4(self.contrast.p_naive, false),
            ));
        } else {
            out.push_str("         naive SE = correct SE\n");
        }
        if let Some(gaps) = &self.diagnostics.prediction_unbiasedness_gap {
            let cells: Vec<String> = gaps.iter().map(|g| sig4(*g, false)).collect();
            out.push_str(&format!("\nprediction-unbiasedness gaps: [{}]\n", cells.join(", ")));
        }
        let g2: Vec<String> = self.diagnostics.g2_orthogonality.iter().map(|g| sig4(*g, false)).collect();
        out.push_str(&format!("(G2) residual-prediction covariance: [{}]\n", g2.join(", ")));
        if !self.diagnostics.dropped_columns.is_empty() {
            out.push_str(&format!("collinearity drops: {:?}\n", self.diagnostics.dropped_columns));
        }
        out
    }
}
