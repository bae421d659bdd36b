//! Experiment configuration: a TOML tree with a fixed key set.
//!
//! Unknown keys are hard errors so typos in experiment definitions cannot
//! pass silently; parse failures carry the offending line and column.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::flow::{IntegratorConfig, IntegratorMethod};
use crate::sinkhorn::{GammaSchedule, SolverConfig};
use crate::stochastic::{Averaging, NoiseModel, StochasticRunConfig};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Regularization strength for the static problem (default 1).
    pub epsilon: Option<f64>,
    pub problem: Option<ProblemConfig>,
    pub solver: Option<SolverSection>,
    pub flow: Option<FlowSection>,
    pub noise: Option<NoiseSection>,
    pub stochastic: Option<StochasticSection>,
    pub bridge: Option<BridgeSection>,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub inline: Option<InlineProblem>,
    pub files: Option<FileProblem>,
    pub gaussian_1d: Option<Gaussian1d>,
}

impl ProblemConfig {
    pub fn validate(&self) -> Result<()> {
        let sources =
            self.inline.is_some() as u8 + self.files.is_some() as u8 + self.gaussian_1d.is_some() as u8;
        if sources != 1 {
            return Err(Error::InvalidParameter(format!(
                "exactly one problem source required, found {sources}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineProblem {
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    pub cost: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileProblem {
    pub mu: PathBuf,
    pub nu: PathBuf,
    pub cost: PathBuf,
}

/// Two Gaussian histograms on `m` points spanning `[-extent, extent]`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gaussian1d {
    pub m: usize,
    pub mean0: f64,
    pub var0: f64,
    pub mean_t: f64,
    pub var_t: f64,
    pub extent: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_schedule")]
    pub schedule: String,
    /// Step value; the coefficient `a` for the harmonic and inverse-sqrt
    /// families.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Explicit step list for `schedule = "custom"`.
    pub gammas: Option<Vec<f64>>,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
}

fn default_schedule() -> String {
    "constant".into()
}
fn default_gamma() -> f64 {
    1.0
}
fn default_max_iter() -> usize {
    10_000
}
fn default_tol() -> f64 {
    1e-12
}
fn default_record_every() -> usize {
    1
}

impl SolverSection {
    pub fn schedule(&self) -> Result<GammaSchedule> {
        let schedule = match self.schedule.as_str() {
            "constant" => GammaSchedule::Constant(self.gamma),
            "harmonic" => GammaSchedule::Harmonic(self.gamma),
            "inverse_sqrt" => GammaSchedule::InverseSqrt(self.gamma),
            "custom" => GammaSchedule::Custom(self.gammas.clone().unwrap_or_default()),
            other => {
                return Err(Error::InvalidParameter(format!(
                    "unknown schedule '{other}'"
                )))
            }
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn solver_config(&self) -> Result<SolverConfig> {
        let config = SolverConfig {
            schedule: self.schedule()?,
            max_iter: self.max_iter,
            tol: self.tol,
            record_every: self.record_every,
        };
        config.validate()?;
        Ok(config)
    }
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            schedule: default_schedule(),
            gamma: default_gamma(),
            gammas: None,
            max_iter: default_max_iter(),
            tol: default_tol(),
            record_every: default_record_every(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    #[serde(default = "default_method")]
    pub method: String,
    pub dt: f64,
    pub t_end: f64,
    pub record_dt: f64,
}

fn default_method() -> String {
    "euler".into()
}

impl FlowSection {
    pub fn integrator_config(&self) -> Result<IntegratorConfig> {
        let method = match self.method.as_str() {
            "euler" => IntegratorMethod::Euler,
            "rk4" => IntegratorMethod::Rk4,
            other => {
                return Err(Error::InvalidParameter(format!(
                    "unknown integrator '{other}'"
                )))
            }
        };
        let config = IntegratorConfig {
            method,
            dt: self.dt,
            t_end: self.t_end,
            record_dt: self.record_dt,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default)]
    pub sigma_noise: f64,
    #[serde(default)]
    pub bias_scale: f64,
    #[serde(default)]
    pub bias_decay: f64,
}

impl NoiseSection {
    pub fn noise_model(&self, seed: u64) -> Result<NoiseModel> {
        let model = NoiseModel {
            sigma_noise: self.sigma_noise,
            bias_scale: self.bias_scale,
            bias_decay: self.bias_decay,
            seed,
        };
        model.validate()?;
        Ok(model)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StochasticSection {
    pub averaging: String,
    pub n_iters: usize,
    pub n_seeds: usize,
    #[serde(default = "default_stochastic_record")]
    pub record_every: usize,
    #[serde(default = "default_stochastic_tol")]
    pub tol: f64,
}

fn default_stochastic_record() -> usize {
    100
}
fn default_stochastic_tol() -> f64 {
    1e-3
}

impl StochasticSection {
    pub fn averaging(&self) -> Result<Averaging> {
        match self.averaging.as_str() {
            "ergodic" => Ok(Averaging::Ergodic),
            "last_iterate" => Ok(Averaging::LastIterate),
            other => Err(Error::InvalidParameter(format!(
                "unknown averaging mode '{other}'"
            ))),
        }
    }

    pub fn run_config(&self, schedule: GammaSchedule) -> Result<StochasticRunConfig> {
        let config = StochasticRunConfig {
            schedule,
            n_iters: self.n_iters,
            n_seeds: self.n_seeds,
            record_every: self.record_every,
            tol: self.tol,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeSection {
    /// Number of drift-field time rows on `[0, t_max]`.
    #[serde(default = "default_n_t")]
    pub n_t: usize,
    /// Fields stop short of the terminal time by `1 - t_max`.
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    pub n_particles: usize,
    pub n_steps: usize,
    #[serde(default = "default_value_gamma")]
    pub value_gamma: f64,
    #[serde(default = "default_value_samples")]
    pub value_samples: usize,
    #[serde(default = "default_value_steps")]
    pub value_steps: usize,
}

fn default_n_t() -> usize {
    80
}
fn default_t_max() -> f64 {
    0.99
}
fn default_value_gamma() -> f64 {
    0.5
}
fn default_value_samples() -> usize {
    10_000
}
fn default_value_steps() -> usize {
    100
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub csv_path: PathBuf,
    pub svg_path: Option<PathBuf>,
    /// Required whenever a stochastic component is enabled.
    pub seed: Option<u64>,
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let content = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidParameter(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&content)
        .map_err(|e| Error::InvalidParameter(format!("{}: {e}", path.display())))
}
