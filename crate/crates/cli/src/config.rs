//! JSON run configurations. Relative paths resolve against the directory of
//! the configuration file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use condquant::fpca::FpcaConfig;
use condquant::model::{DesignOptions, GridRule, TermSpec};
use condquant::sim::{ExperimentConfig, ResponseDistribution, SamplingDesign};
use condquant::solver::SolverConfig;

use crate::error::{CliError, CliResult};

pub fn load<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    #[default]
    Joint,
    Pointwise,
}

/// FPCA presmoothing of every functional covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PresmoothConfig {
    pub grid_points: usize,
    pub fpca: FpcaConfig,
}

impl Default for PresmoothConfig {
    fn default() -> Self {
        Self {
            grid_points: 101,
            fpca: FpcaConfig::default(),
        }
    }
}

fn default_response_column() -> String {
    "y".into()
}

fn default_grid_points() -> usize {
    100
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    /// Wide CSV with the response and scalar covariates.
    pub data: PathBuf,
    #[serde(default = "default_response_column")]
    pub response_column: String,
    /// Long CSV per functional covariate.
    #[serde(default)]
    pub functional: BTreeMap<String, PathBuf>,
    pub terms: Vec<TermSpec>,
    #[serde(default)]
    pub method: FitMethod,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default)]
    pub grid_rule: GridRule,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub design: DesignOptions,
    /// When absent, functional covariates must share one observation grid.
    #[serde(default)]
    pub presmooth: Option<PresmoothConfig>,
    /// Points per axis of the coefficient-function evaluations.
    #[serde(default = "default_eval_points")]
    pub coefficient_points: usize,
    /// Levels of the in-sample quantiles.
    #[serde(default = "default_taus")]
    pub taus: Vec<f64>,
    #[serde(default)]
    pub trim: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_eval_points() -> usize {
    101
}

fn default_taus() -> Vec<f64> {
    vec![0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    pub model: PathBuf,
    /// Wide CSV with the scalar covariates of the new subjects.
    pub data: PathBuf,
    #[serde(default)]
    pub functional: BTreeMap<String, PathBuf>,
    #[serde(default = "default_taus")]
    pub taus: Vec<f64>,
    #[serde(default)]
    pub trim: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub distribution: ResponseDistribution,
    pub n: usize,
    pub n_test: usize,
    pub design: SamplingDesign,
    pub sigma: f64,
    pub b: [f64; 4],
    pub seed: u64,
    pub replication: usize,
    pub output_dir: PathBuf,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            distribution: ResponseDistribution::Normal,
            n: 100,
            n_test: 100,
            design: SamplingDesign::Dense,
            sigma: 0.5,
            b: [1.0; 4],
            seed: 1,
            replication: 0,
            output_dir: default_output(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct ExperimentFile {
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
    #[serde(default = "default_summary")]
    pub output: PathBuf,
}

fn default_summary() -> PathBuf {
    PathBuf::from("summary.csv")
}
