//! Run configuration: TOML file, flag overrides and the resolved copy written beside outputs.

use std::path::{Path, PathBuf};

use diffmerge::eval::{SweepConfig, ToyDataset};
use diffmerge::expert::GaussianMixtureSpec;
use diffmerge::integrate::SolverConfig;
use diffmerge::likelihood::{Dequantization, DivergenceConfig};
use diffmerge::train::{TrainConfig, Weighting};
use diffmerge::verify::{Fault, LIKELIHOOD_RANGE, QUALITY_RANGE};
use diffmerge::NoiseSchedule;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides the seed of every section except the dataset's.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub dataset: DatasetSection,
    /// Native schedule of a trained expert; defaults follow the training weighting.
    pub schedule: Option<NoiseSchedule<f64>>,
    pub train: TrainConfig,
    pub model: ModelSection,
    pub solver: SolverConfig,
    pub divergence: DivergenceConfig,
    pub sample: SampleSection,
    pub nll: NllSection,
    pub sweep: SweepConfig,
    pub verify: VerifySection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Versioned JSON data file; when absent the toy generator is used.
    pub path: Option<PathBuf>,
    pub toy: ToyDataset,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub checkpoint: Option<PathBuf>,
    pub quality: Option<PathBuf>,
    pub likelihood: Option<PathBuf>,
    pub eta: Option<f64>,
    pub analytic: Option<AnalyticSection>,
}

/// Closed-form expert; a standard normal when no mixture is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyticSection {
    pub dim: usize,
    pub mixture: Option<GaussianMixtureSpec<f64>>,
    pub gamma_min: f64,
    pub gamma_max: f64,
}

impl Default for AnalyticSection {
    fn default() -> Self {
        Self { dim: 2, mixture: None, gamma_min: LIKELIHOOD_RANGE.0, gamma_max: QUALITY_RANGE.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub n: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { n: 1000 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BoundChoice {
    #[default]
    Ode,
    Vlb,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NllSection {
    pub bound: BoundChoice,
    /// Upper bound on the number of test points.
    pub n_test: Option<usize>,
    pub vlb_mc_t: usize,
    pub dequantization: Dequantization,
}

impl Default for NllSection {
    fn default() -> Self {
        Self { bound: BoundChoice::Ode, n_test: None, vlb_mc_t: 16, dequantization: Dequantization::Uniform }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub fault: Option<Fault>,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Pushes the global seed into every section that draws random numbers.
    pub fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.train.seed = s;
            self.solver.seed = s;
            self.sweep.seed = s;
            self.sweep.ode.seed = s;
            if let Some(st) = self.sweep.stochastic.as_mut() {
                st.seed = s;
            }
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("diffmerge-out"))
    }

    pub fn train_schedule(&self) -> CliResult<NoiseSchedule<f64>> {
        let s = match self.schedule {
            Some(s) => s,
            None => {
                let (lo, hi) = match self.train.weighting {
                    Weighting::Elbo => LIKELIHOOD_RANGE,
                    Weighting::SimpleHighNoise => QUALITY_RANGE,
                };
                NoiseSchedule::linear(lo, hi)?
            }
        };
        Ok(s.validated()?)
    }

    /// TOML text of the resolved configuration, without the thread count, which does not
    /// affect results.
    pub fn resolved_toml(&self) -> CliResult<String> {
        let mut c = self.clone();
        c.threads = None;
        toml::to_string_pretty(&c).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }
}
