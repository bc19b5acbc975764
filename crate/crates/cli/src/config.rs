//! Run configuration: one TOML file with an `analyze` or `simulate` section.

use serde::Deserialize;
use std::path::PathBuf;

use carat_core::data::CsvSchema;
use carat_core::sim::{Dgp, MedianMode, PipelineSpec, ScenarioSpec};
use carat_core::{ContrastSpec, SchemeSpec};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub analyze: Option<AnalyzeConfig>,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Analyze,
    Simulate,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
    /// Scale entries of the human-readable table by 100.
    #[serde(default)]
    pub times100: bool,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: default_out_dir(), times100: false }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub dataset: PathBuf,
    pub schema: CsvSchema,
    pub scheme: SchemeSpec,
    pub contrast: ContrastSpec,
    pub pipeline: PipelineSpec,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub dgp: Dgp,
    pub n: usize,
    pub replicates: usize,
    pub scheme: SchemeSpec,
    pub contrast: ContrastSpec,
    pub estimators: Vec<PipelineSpec>,
    #[serde(default = "default_median_mode")]
    pub median_mode: MedianMode,
    #[serde(default)]
    pub truth_override: Option<f64>,
    #[serde(default = "default_oracle_draws")]
    pub oracle_draws: usize,
    /// With `dgp = "figure1"`: also write per-replicate estimate samples
    /// from the g-computation-vs-AIPW experiment.
    #[serde(default)]
    pub emit_samples: bool,
}

fn default_median_mode() -> MedianMode {
    MedianMode::Sample
}

fn default_oracle_draws() -> usize {
    10_000_000
}

impl SimulateConfig {
    pub fn to_scenario(&self, seed: u64) -> ScenarioSpec {
        ScenarioSpec {
            dgp: self.dgp,
            n: self.n,
            replicates: self.replicates,
            scheme: self.scheme.clone(),
            estimators: self.estimators.clone(),
            master_seed: seed,
            contrast: self.contrast.clone(),
            median_mode: self.median_mode,
            truth_override: self.truth_override,
            oracle_draws: self.oracle_draws,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        match self.mode {
            Mode::Analyze => {
                if self.analyze.is_none() {
                    anyhow::bail!("mode = \"analyze\" requires an [analyze] section");
                }
            }
            Mode::Simulate => {
                if self.simulate.is_none() {
                    anyhow::bail!("mode = \"simulate\" requires a [simulate] section");
                }
            }
        }
        Ok(())
    }
}
